//! Seeded 2-D toy distributions and the dataset CSV format.
//!
//! Every [`DatasetSpec`] owns its random stream (ChaCha8 keyed by the spec's
//! seed), so generating one dataset never perturbs another. Gaussian
//! variates come from Box–Muller on that stream, and every point consumes
//! its noise variates even when `noise == 0`, so the noiseless and noisy
//! versions of a spec share their underlying geometry.

use std::f64::consts::{FRAC_PI_8, PI, TAU};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "x0,x1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    /// Two interleaving unit half-circles.
    Moons,
    /// Concentric circles of radii 1 and 0.5.
    Circles,
    /// `N((-3, -3), noise^2 I)`
    GaussPairA,
    /// `N((3, 3), noise^2 I)`
    GaussPairB,
    /// Eight Gaussians on a ring of radius 2.
    EightGaussA,
    /// Eight Gaussians on a ring of radius 4, rotated by pi/8.
    EightGaussB,
    /// Five Gaussians with means on `y = x`.
    LinearGaussA,
    /// Five Gaussians with means on `y = -x + 6`.
    LinearGaussB,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 8] = [
        DatasetKind::Moons,
        DatasetKind::Circles,
        DatasetKind::GaussPairA,
        DatasetKind::GaussPairB,
        DatasetKind::EightGaussA,
        DatasetKind::EightGaussB,
        DatasetKind::LinearGaussA,
        DatasetKind::LinearGaussB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Circles => "circles",
            DatasetKind::GaussPairA => "gauss_pair_a",
            DatasetKind::GaussPairB => "gauss_pair_b",
            DatasetKind::EightGaussA => "eight_gauss_a",
            DatasetKind::EightGaussB => "eight_gauss_b",
            DatasetKind::LinearGaussA => "linear_gauss_a",
            DatasetKind::LinearGaussB => "linear_gauss_b",
        }
    }

    /// Noise standard deviation used when none is given.
    pub fn default_noise(self) -> f64 {
        match self {
            DatasetKind::Moons | DatasetKind::Circles => 0.05,
            DatasetKind::GaussPairA => 1.0,
            DatasetKind::GaussPairB => 0.5f64.sqrt(),
            DatasetKind::EightGaussA => 0.2,
            DatasetKind::EightGaussB => 0.3,
            DatasetKind::LinearGaussA | DatasetKind::LinearGaussB => 0.3,
        }
    }

    /// Default mean of the single-Gaussian kinds.
    pub fn default_mean(self) -> Option<[f64; 2]> {
        match self {
            DatasetKind::GaussPairA => Some([-3.0, -3.0]),
            DatasetKind::GaussPairB => Some([3.0, 3.0]),
            _ => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    /// Standard deviation of the isotropic Gaussian noise (the component
    /// standard deviation for the mixture kinds).
    pub noise: f64,
    pub seed: u64,
    /// Overrides the mean of `gauss_pair_*`; ignored by other kinds.
    pub mean: Option<[f64; 2]>,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, n: usize, noise: f64, seed: u64) -> Self {
        Self { kind, n, noise, seed, mean: None }
    }

    /// Spec with the kind's default noise.
    pub fn with_defaults(kind: DatasetKind, n: usize, seed: u64) -> Self {
        Self::new(kind, n, kind.default_noise(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("dataset size must be >= 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Standard normal variates by Box–Muller, caching the second of each pair.
struct BoxMuller {
    spare: Option<f64>,
}

impl BoxMuller {
    fn new() -> Self {
        Self { spare: None }
    }

    fn sample(&mut self, rng: &mut impl Rng) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // 1 - U keeps the logarithm's argument in (0, 1].
        let u1 = 1.0 - rng.random::<f64>();
        let u2 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

fn ring_means(count: usize, radius: f64, phase: f64) -> Vec<[f64; 2]> {
    (0..count)
        .map(|k| {
            let a = phase + k as f64 * TAU / count as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

fn line_means(xs: [f64; 5], f: impl Fn(f64) -> f64) -> Vec<[f64; 2]> {
    xs.iter().map(|&x| [x, f(x)]).collect()
}

/// Component centres of the mixture kinds.
pub fn mixture_means(kind: DatasetKind) -> Option<Vec<[f64; 2]>> {
    match kind {
        DatasetKind::EightGaussA => Some(ring_means(8, 2.0, 0.0)),
        DatasetKind::EightGaussB => Some(ring_means(8, 4.0, FRAC_PI_8)),
        DatasetKind::LinearGaussA => Some(line_means([-4.0, -2.0, 0.0, 2.0, 4.0], |x| x)),
        DatasetKind::LinearGaussB => Some(line_means([-1.0, 1.0, 3.0, 5.0, 7.0], |x| 6.0 - x)),
        _ => None,
    }
}

/// Draws `spec.n` points as an `n x 2` tensor.
pub fn generate(spec: &DatasetSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = BoxMuller::new();
    let mut data = Vec::with_capacity(spec.n * 2);
    let means = mixture_means(spec.kind);
    for i in 0..spec.n {
        let base: [f64; 2] = match spec.kind {
            DatasetKind::Moons => {
                let t = rng.random::<f64>() * PI;
                if i % 2 == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
            DatasetKind::Circles => {
                let t = rng.random::<f64>() * TAU;
                let r = if i % 2 == 0 { 1.0 } else { 0.5 };
                [r * t.cos(), r * t.sin()]
            }
            DatasetKind::GaussPairA | DatasetKind::GaussPairB => {
                spec.mean.or(spec.kind.default_mean()).expect("gauss kinds have a mean")
            }
            _ => {
                let means = means.as_ref().expect("mixture kinds have means");
                means[rng.random_range(0..means.len())]
            }
        };
        let e0 = normal.sample(&mut rng);
        let e1 = normal.sample(&mut rng);
        data.push(base[0] + spec.noise * e0);
        data.push(base[1] + spec.noise * e1);
    }
    Tensor::matrix(spec.n, 2, data)
}

/// Writes points as CSV with a `x0,x1` header and 17 significant digits.
pub fn save(path: impl AsRef<Path>, points: &Tensor) -> Result<()> {
    let (_, d) = points.expect_matrix("dataset")?;
    if d != 2 {
        return Err(Error::Dimension(format!("dataset files hold 2 columns, got {d}")));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_csv(&mut w, points)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv(w: &mut impl Write, points: &Tensor) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for i in 0..points.rows() {
        let r = points.row(i);
        writeln!(w, "{:.16e},{:.16e}", r[0], r[1])?;
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    read_csv(BufReader::new(file))
}

/// Parses a dataset CSV. Every line, including the last, must end in a
/// newline, which catches files cut off mid-row.
pub fn read_csv(mut r: impl BufRead) -> Result<Tensor> {
    let mut line = String::new();
    let mut data = Vec::new();
    let mut lineno = 0;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        let Some(body) = line.strip_suffix('\n') else {
            return Err(Error::Malformed(format!("line {lineno} is truncated")));
        };
        let body = body.strip_suffix('\r').unwrap_or(body);
        if lineno == 1 {
            if body != CSV_HEADER {
                return Err(Error::Malformed(format!("expected header `{CSV_HEADER}`, got `{body}`")));
            }
            continue;
        }
        let fields: Vec<&str> = body.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Malformed(format!(
                "line {lineno}: expected 2 columns, got {}",
                fields.len()
            )));
        }
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Malformed(format!("line {lineno}: `{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::Malformed(format!("line {lineno}: non-finite value")));
            }
            data.push(v);
        }
    }
    if lineno == 0 {
        return Err(Error::Malformed("empty file".into()));
    }
    Tensor::matrix(data.len() / 2, 2, data)
}
