//! Held-out metrics, correspondence export, and the report file formats.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::kernels::{mmd_distance, KernelBank};
use crate::loss::{ot_cost_value, LossBreakdown};
use crate::tensor::Tensor;

/// Subsampling seed of the evaluation bank's median heuristic. Fixed so the
/// bank is a function of the test sets alone.
pub const EVAL_BANK_SEED: u64 = 0;

pub const METRICS_HEADER: &str = "dataset,method,beta,ot_fwd,ot_bwd,mmd_fwd,mmd_bwd,seed";
pub const TRACE_HEADER: &str = "epoch,mmd_fwd,mmd_bwd,ot_fwd,ot_bwd,total";
pub const CORRESPONDENCE_HEADER: &str = "src0,src1,dst0,dst1,direction";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `ot_cost(x, T(x))`
    pub ot_fwd: f64,
    /// `ot_cost(T^-1(z), z)`
    pub ot_bwd: f64,
    /// `mmd_distance(T(x), z)`
    pub mmd_fwd: f64,
    /// `mmd_distance(x, T^-1(z))`
    pub mmd_bwd: f64,
    pub n_test: usize,
    /// Identifies the experiment configuration; empty when evaluated ad hoc.
    pub config_hash: String,
}

impl MetricsReport {
    /// `|ot_fwd - ot_bwd| / max(ot_fwd, ot_bwd, 1e-9)`: how far the two
    /// directions of a symmetric model disagree on transport cost.
    pub fn ot_asymmetry(&self) -> f64 {
        (self.ot_fwd - self.ot_bwd).abs() / self.ot_fwd.max(self.ot_bwd).max(1e-9)
    }
}

/// Bank used for reporting: median heuristic over the pooled test sets.
pub fn eval_bank(x_test: &Tensor, z_test: &Tensor, scales: &[f64]) -> Result<KernelBank> {
    KernelBank::from_samples(x_test, z_test, scales, EVAL_BANK_SEED)
}

pub fn evaluate(
    model: &FlowModel,
    bank: &KernelBank,
    x_test: &Tensor,
    z_test: &Tensor,
) -> Result<MetricsReport> {
    let (nx, _) = x_test.expect_matrix("source test set")?;
    let (nz, _) = z_test.expect_matrix("target test set")?;
    if nx == 0 || nz == 0 {
        return Err(Error::EmptyInput);
    }
    let tx = model.forward(x_test)?;
    let iz = model.inverse(z_test)?;
    Ok(MetricsReport {
        ot_fwd: ot_cost_value(x_test, &tx)?,
        ot_bwd: ot_cost_value(&iz, z_test)?,
        mmd_fwd: mmd_distance(bank, &tx, z_test)?,
        mmd_bwd: mmd_distance(bank, x_test, &iz)?,
        n_test: nx.min(nz),
        config_hash: String::new(),
    })
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub dataset: String,
    pub method: String,
    /// Left empty in the CSV when unknown (ad hoc evaluation).
    pub beta: Option<f64>,
    pub seed: Option<u64>,
    pub report: MetricsReport,
}

pub fn write_metrics_csv(w: &mut impl Write, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        let m = &r.report;
        writeln!(
            w,
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.dataset,
            r.method,
            r.beta.map_or(String::new(), |b| b.to_string()),
            m.ot_fwd,
            m.ot_bwd,
            m.mmd_fwd,
            m.mmd_bwd,
            r.seed.map_or(String::new(), |s| s.to_string())
        )?;
    }
    Ok(())
}

pub fn write_trace_csv(w: &mut impl Write, trace: &[LossBreakdown]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for (i, b) in trace.iter().enumerate() {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            i + 1,
            b.mmd_fwd,
            b.mmd_bwd,
            b.ot_fwd,
            b.ot_bwd,
            b.total
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn label(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// A source point and where the map sends it. Backward rows hold
/// `(T^-1(z), z)`, so `dst = T(src)` holds for both directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub src: [f64; 2],
    pub dst: [f64; 2],
    pub direction: Direction,
}

pub fn correspondences(model: &FlowModel, x: &Tensor, z: &Tensor) -> Result<Vec<Correspondence>> {
    if model.dim() != 2 {
        return Err(Error::UnsupportedDimension(model.dim()));
    }
    let tx = model.forward(x)?;
    let iz = model.inverse(z)?;
    let pair = |a: &Tensor, b: &Tensor, i: usize, direction| Correspondence {
        src: [a.get(i, 0), a.get(i, 1)],
        dst: [b.get(i, 0), b.get(i, 1)],
        direction,
    };
    let mut rows = Vec::with_capacity(x.rows() + z.rows());
    rows.extend((0..x.rows()).map(|i| pair(x, &tx, i, Direction::Forward)));
    rows.extend((0..z.rows()).map(|i| pair(&iz, z, i, Direction::Backward)));
    Ok(rows)
}

pub fn write_correspondence_csv(w: &mut impl Write, rows: &[Correspondence]) -> Result<()> {
    writeln!(w, "{CORRESPONDENCE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.src[0],
            r.src[1],
            r.dst[0],
            r.dst[1],
            r.direction.label()
        )?;
    }
    Ok(())
}

pub fn read_correspondence_csv(r: impl BufRead) -> Result<Vec<Correspondence>> {
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h == CORRESPONDENCE_HEADER => {}
        other => {
            return Err(Error::Malformed(format!(
                "expected header `{CORRESPONDENCE_HEADER}`, got {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Malformed(format!("row {}: expected 5 columns", i + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Malformed(format!("row {}: `{s}` is not a number", i + 1)))
        };
        let direction = match f[4] {
            "fwd" => Direction::Forward,
            "bwd" => Direction::Backward,
            other => return Err(Error::Malformed(format!("row {}: direction `{other}`", i + 1))),
        };
        out.push(Correspondence {
            src: [num(f[0])?, num(f[1])?],
            dst: [num(f[2])?, num(f[3])?],
            direction,
        });
    }
    Ok(out)
}

pub fn export_correspondence(
    model: &FlowModel,
    x: &Tensor,
    z: &Tensor,
    path: impl AsRef<Path>,
) -> Result<()> {
    let rows = correspondences(model, x, z)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_correspondence_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

const SOURCE_COLOR: &str = "#1f77b4";
const MAPPED_COLOR: &str = "#ff7f0e";
const LINK_COLOR: &str = "#2ca02c";

/// Scatter of `src` (blue) and `dst` (orange) with a green segment from each
/// source point to its image. Coordinates are fitted to a square canvas.
pub fn scatter_svg(pairs: &[([f64; 2], [f64; 2])], size: u32) -> String {
    let pts = pairs.iter().flat_map(|(a, b)| [*a, *b]);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    if pairs.is_empty() {
        (lo, hi) = ([-1.0; 2], [1.0; 2]);
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let margin = 0.05 * size as f64;
    let scale = (size as f64 - 2.0 * margin) / span;
    // SVG y grows downwards.
    let px = |p: [f64; 2]| (margin + (p[0] - lo[0]) * scale, size as f64 - margin - (p[1] - lo[1]) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">
<rect width="100%" height="100%" fill="white"/>"#
    );
    let _ = writeln!(s, r#"<g stroke="{LINK_COLOR}" stroke-width="0.4" stroke-opacity="0.5">"#);
    for (a, b) in pairs {
        let ((x1, y1), (x2, y2)) = (px(*a), px(*b));
        let _ = writeln!(s, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}"/>"#);
    }
    let _ = writeln!(s, "</g>");
    for (color, pick) in [(SOURCE_COLOR, 0), (MAPPED_COLOR, 1)] {
        let _ = writeln!(s, r#"<g fill="{color}">"#);
        for pair in pairs {
            let (cx, cy) = px(if pick == 0 { pair.0 } else { pair.1 });
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.5"/>"#);
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Forward-direction scatter of a 2-D model.
pub fn write_svg(model: &FlowModel, x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if model.dim() != 2 {
        return Err(Error::UnsupportedDimension(model.dim()));
    }
    let tx = model.forward(x)?;
    let pairs: Vec<_> =
        (0..x.rows()).map(|i| ([x.get(i, 0), x.get(i, 1)], [tx.get(i, 0), tx.get(i, 1)])).collect();
    std::fs::write(path, scatter_svg(&pairs, 600))?;
    Ok(())
}
