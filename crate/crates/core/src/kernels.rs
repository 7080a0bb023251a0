//! Gaussian kernel banks and empirical MMD estimators.
//!
//! A [`KernelBank`] is a convex combination of Gaussian kernels
//! `k(a, b) = sum_l w_l exp(-|a - b|^2 / (2 sigma2_l))`. Every kernel equals
//! one at zero distance, so the bank does too.
//!
//! Estimators come in two flavours: graph versions that feed the training
//! loss, and value-only versions ([`mmd2_value`], [`mmd_distance`]) that
//! stream over rows without materializing gram matrices, for evaluation on
//! large test sets.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{sqdist_values, GaussMix, Graph, Var};
use crate::tensor::Tensor;

/// Bandwidth multipliers applied to the median heuristic by default.
pub const DEFAULT_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Pooled points above this count are subsampled by [`median_heuristic`].
pub const MEDIAN_MAX_POINTS: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::InvalidParameter(format!(
                "kernel bank needs matching nonempty bandwidths and weights ({} vs {})",
                bandwidths.len(),
                weights.len()
            )));
        }
        if let Some(b) = bandwidths.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidParameter(format!("bandwidth {b} must be positive")));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("kernel weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("kernel weights sum to {total}, not 1")));
        }
        Ok(Self { bandwidths, weights })
    }

    /// One Gaussian kernel with variance `sigma2`.
    pub fn single(sigma2: f64) -> Result<Self> {
        Self::new(vec![sigma2], vec![1.0])
    }

    /// Equal-weight bank at `base * scales[l]`.
    pub fn scaled(base: f64, scales: &[f64]) -> Result<Self> {
        let n = scales.len().max(1) as f64;
        Self::new(scales.iter().map(|s| s * base).collect(), vec![1.0 / n; scales.len()])
    }

    /// The default five-kernel bank around the median heuristic of the pool.
    pub fn from_samples(a: &Tensor, b: &Tensor, scales: &[f64], seed: u64) -> Result<Self> {
        Self::scaled(median_heuristic(a, b, seed)?, scales)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Kernel value for one squared distance.
    #[inline]
    pub fn eval_sqdist(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s2, w)| w * (-d2 / (2.0 * s2)).exp())
            .sum()
    }

    /// Differentiable gram matrix `K[i, j] = k(a_i, b_j)`.
    pub fn gram(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        g.gaussian_gram(a, b, &self.bandwidths, &self.weights)
    }

    /// Gram matrix as a plain tensor.
    pub fn gram_value(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_pair(a, b)?;
        let d2 = sqdist_values(a, b);
        Tensor::matrix(a.rows(), b.rows(), d2.into_iter().map(|d| self.eval_sqdist(d)).collect())
    }

    /// `mean_ij k(a_i, b_j)` without storing the gram matrix. Summation
    /// order is fixed (row-major), so the result is reproducible.
    pub fn gram_mean(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        check_pair(a, b)?;
        let mix = GaussMix::new(&self.bandwidths, &self.weights);
        let mut total = 0.0;
        for i in 0..a.rows() {
            let ai = a.row(i);
            let mut row = 0.0;
            for j in 0..b.rows() {
                let d2: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                row += mix.eval(d2.max(0.0)).0;
            }
            total += row;
        }
        Ok(total / (a.rows() * b.rows()) as f64)
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    let (m, da) = a.expect_matrix("kernel lhs")?;
    let (n, db) = b.expect_matrix("kernel rhs")?;
    if da != db {
        return Err(Error::Dimension(format!("feature dimensions {da} and {db} differ")));
    }
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn check_vars(g: &Graph, x: Var, z: Var) -> Result<()> {
    check_pair(g.value(x), g.value(z))
}

/// Median of pairwise squared distances over distinct pairs of the pooled
/// set `a ∪ b`. Pools larger than [`MEDIAN_MAX_POINTS`] are subsampled with a
/// `seed`-keyed draw. Returns 1.0 when the median is not positive.
pub fn median_heuristic(a: &Tensor, b: &Tensor, seed: u64) -> Result<f64> {
    let (m, da) = a.expect_matrix("median_heuristic lhs")?;
    let (n, db) = b.expect_matrix("median_heuristic rhs")?;
    if da != db {
        return Err(Error::Dimension(format!("feature dimensions {da} and {db} differ")));
    }
    if m + n < 2 {
        return Err(Error::EmptyInput);
    }
    let total = m + n;
    let picks: Vec<usize> = if total > MEDIAN_MAX_POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = index::sample(&mut rng, total, MEDIAN_MAX_POINTS).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..total).collect()
    };
    let point = |k: usize| if k < m { a.row(k) } else { b.row(k - m) };
    let mut dists = Vec::with_capacity(picks.len() * (picks.len() - 1) / 2);
    for (i, &p) in picks.iter().enumerate() {
        let pi = point(p);
        for &q in &picks[i + 1..] {
            dists.push(pi.iter().zip(point(q)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    let len = dists.len();
    let median = if len % 2 == 1 {
        *dists.select_nth_unstable_by(len / 2, f64::total_cmp).1
    } else {
        let (lo, hi, _) = dists.select_nth_unstable_by(len / 2, f64::total_cmp);
        let lo_max = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo_max + *hi)
    };
    Ok(if median > 0.0 && median.is_finite() { median } else { 1.0 })
}

/// Biased squared MMD:
/// `mean(K_xx) + mean(K_zz) - 2 mean(K_xz)` with full double sums.
pub fn mmd2_biased(g: &mut Graph, bank: &KernelBank, x: Var, z: Var) -> Result<Var> {
    check_vars(g, x, z)?;
    let kxx = bank.gram(g, x, x)?;
    let kzz = bank.gram(g, z, z)?;
    let kxz = bank.gram(g, x, z)?;
    let mxx = g.mean(kxx)?;
    let mzz = g.mean(kzz)?;
    let mxz = g.mean(kxz)?;
    let within = g.add(mxx, mzz)?;
    let cross = g.scale(mxz, -2.0)?;
    g.add(within, cross)
}

/// Equal-size form `1/N^2 sum_nn' [k(x_n,x_n') + k(z_n,z_n') - 2 k(x_n,z_n')]`,
/// averaged entrywise over the combined matrix.
pub fn mmd2_paper_form(g: &mut Graph, bank: &KernelBank, x: Var, z: Var) -> Result<Var> {
    check_vars(g, x, z)?;
    let (n, n2) = (g.value(x).rows(), g.value(z).rows());
    if n != n2 {
        return Err(Error::Dimension(format!(
            "equal-size MMD form needs equal sample counts, got {n} and {n2}"
        )));
    }
    let kxx = bank.gram(g, x, x)?;
    let kzz = bank.gram(g, z, z)?;
    let kxz = bank.gram(g, x, z)?;
    let within = g.add(kxx, kzz)?;
    let cross = g.scale(kxz, 2.0)?;
    let terms = g.sub(within, cross)?;
    g.mean(terms)
}

/// Value of the biased squared MMD, streamed over rows.
pub fn mmd2_value(bank: &KernelBank, x: &Tensor, z: &Tensor) -> Result<f64> {
    check_pair(x, z)?;
    Ok(bank.gram_mean(x, x)? + bank.gram_mean(z, z)? - 2.0 * bank.gram_mean(x, z)?)
}

/// `sqrt(max(MMD_b^2, 0))`, the reported MMD distance.
pub fn mmd_distance(bank: &KernelBank, x: &Tensor, z: &Tensor) -> Result<f64> {
    Ok(mmd2_value(bank, x, z)?.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_mmd(bank: &KernelBank, x: &Tensor, z: &Tensor) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let m = mmd2_biased(&mut g, bank, xv, zv).unwrap();
        g.value(m).item().unwrap()
    }

    #[test]
    fn bank_validation() {
        assert!(KernelBank::new(vec![], vec![]).is_err());
        assert!(KernelBank::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(KernelBank::new(vec![0.0], vec![1.0]).is_err());
        assert!(KernelBank::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(KernelBank::new(vec![1.0, 2.0], vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn gram_at_zero_distance_is_one() {
        let bank = KernelBank::scaled(1.3, &DEFAULT_SCALES).unwrap();
        let a = Tensor::from_rows(&[[0.4, -1.0]]);
        let k = bank.gram_value(&a, &a).unwrap();
        assert!((k.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_kernel_value() {
        let bank = KernelBank::single(1.0).unwrap();
        let a = Tensor::from_rows(&[[0.0, 0.0]]);
        let b = Tensor::from_rows(&[[1.0, 1.0]]);
        let k = bank.gram_value(&a, &b).unwrap();
        assert!((k.data()[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k.data()[0] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn median_of_two_points() {
        let a = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        assert_eq!(median_heuristic(&a, &b, 0).unwrap(), 4.0);
    }

    #[test]
    fn median_falls_back_for_a_repeated_point() {
        let a = Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(median_heuristic(&a, &a, 0).unwrap(), 1.0);
        let empty = Tensor::zeros(vec![0, 2]);
        let one = Tensor::from_rows(&[[0.0, 0.0]]);
        assert!(matches!(median_heuristic(&empty, &one, 0), Err(Error::EmptyInput)));
    }

    #[test]
    fn analytic_single_pair_mmd() {
        let bank = KernelBank::single(1.0).unwrap();
        let x = Tensor::from_rows(&[[0.0, 0.0]]);
        let z = Tensor::from_rows(&[[2f64.sqrt(), 0.0]]);
        let expected = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((scalar_mmd(&bank, &x, &z) - expected).abs() < 1e-12);
        assert!((expected - 1.264241).abs() < 1e-6);
        let d = mmd_distance(&bank, &x, &z).unwrap();
        assert!((d - expected.sqrt()).abs() < 1e-12);
        assert!((d - 1.12438).abs() < 1e-5);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let p = mmd2_paper_form(&mut g, &bank, xv, zv).unwrap();
        assert!((g.value(p).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_give_zero() {
        let bank = KernelBank::scaled(1.0, &DEFAULT_SCALES).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2], [1.0, -3.0], [2.0, 2.0]]);
        assert!(scalar_mmd(&bank, &x, &x).abs() < 1e-12);
        assert_eq!(mmd_distance(&bank, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn paper_form_rejects_unequal_sizes() {
        let bank = KernelBank::single(1.0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 2]));
        let z = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(mmd2_paper_form(&mut g, &bank, x, z), Err(Error::Dimension(_))));
    }

    #[test]
    fn empty_sets_are_rejected() {
        let bank = KernelBank::single(1.0).unwrap();
        let x = Tensor::zeros(vec![0, 2]);
        let z = Tensor::zeros(vec![2, 2]);
        assert!(matches!(mmd_distance(&bank, &x, &z), Err(Error::EmptyInput)));
    }

    #[test]
    fn moving_toward_target_never_increases_distance() {
        let bank = KernelBank::single(1.0).unwrap();
        let target = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=50 {
            let t = step as f64 / 50.0;
            let x = Tensor::matrix(2, 1, vec![3.0 * (1.0 - t), 1.0 + 2.0 * (1.0 - t)]).unwrap();
            let d = mmd_distance(&bank, &x, &target).unwrap();
            assert!(d <= prev + 1e-15, "step {step}: {d} > {prev}");
            prev = d;
        }
        assert!(prev < 1e-12);
    }
}
