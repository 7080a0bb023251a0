//! The symmetric OT-regularized training objective.
//!
//! For batches `x ~ p` and `z ~ q` and a flow `T`:
//!
//! ```text
//! L = MMD_b^2(T(x), z) + MMD_b^2(x, T^-1(z))
//!   + beta * mean |x - T(x)|^2 + beta * mean |T^-1(z) - z|^2
//! ```
//!
//! The within-set terms `mean K(z, z)` and `mean K(x, x)` do not depend on
//! the flow, so the graph handed to the optimizer leaves them out. They are
//! still computed as plain values so that [`LossBreakdown`] reports full
//! squared MMDs.

use crate::error::{Error, Result};
use crate::flow::{BoundFlow, FlowModel};
use crate::graph::{Graph, Reduction, Var};
use crate::kernels::{mmd_distance, KernelBank};
use crate::tensor::Tensor;

/// Per-batch (or per-epoch averaged) loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `MMD_b^2(T(x), z)`
    pub mmd_fwd: f64,
    /// `MMD_b^2(x, T^-1(z))`, zero for one-direction training.
    pub mmd_bwd: f64,
    /// `mean |x - T(x)|^2`
    pub ot_fwd: f64,
    /// `mean |T^-1(z) - z|^2`, zero for one-direction training.
    pub ot_bwd: f64,
    pub beta: f64,
    /// `mmd_fwd + mmd_bwd + beta * (ot_fwd + ot_bwd)`
    pub total: f64,
    /// What the optimizer minimizes: `total` minus the flow-independent
    /// within-set kernel means.
    pub objective: f64,
}

impl LossBreakdown {
    /// Componentwise mean of several breakdowns.
    pub fn average(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.mmd_fwd += b.mmd_fwd;
            acc.mmd_bwd += b.mmd_bwd;
            acc.ot_fwd += b.ot_fwd;
            acc.ot_bwd += b.ot_bwd;
            acc.total += b.total;
            acc.objective += b.objective;
        }
        LossBreakdown {
            mmd_fwd: acc.mmd_fwd / n,
            mmd_bwd: acc.mmd_bwd / n,
            ot_fwd: acc.ot_fwd / n,
            ot_bwd: acc.ot_bwd / n,
            beta: items.first().map_or(0.0, |b| b.beta),
            total: acc.total / n,
            objective: acc.objective / n,
        }
    }
}

/// Paired transport cost `mean_i |a_i - b_i|^2`.
pub fn ot_cost(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (n, _) = g.value(a).expect_matrix("ot_cost lhs")?;
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension(format!(
            "ot_cost needs paired rows, got {:?} and {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let per_row = g.reduce(sq, Reduction::Sum, Some(1))?;
    g.mean(per_row)
}

/// Value of [`ot_cost`] on plain tensors.
pub fn ot_cost_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, _) = a.expect_matrix("ot_cost lhs")?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "ot_cost needs paired rows, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / n as f64)
}

/// `mean K(moved, moved) - 2 mean K(moved, fixed)`: the part of
/// `MMD_b^2(moved, fixed)` that depends on `moved`.
fn mmd_objective(g: &mut Graph, bank: &KernelBank, moved: Var, fixed: Var) -> Result<Var> {
    let kmm = bank.gram(g, moved, moved)?;
    let kmf = bank.gram(g, moved, fixed)?;
    let mmm = g.mean(kmm)?;
    let mmf = g.mean(kmf)?;
    let cross = g.scale(mmf, -2.0)?;
    g.add(mmm, cross)
}

/// Builds the training objective on `g` and returns its root together with
/// the loss breakdown. `symmetric = false` drops the backward MMD and OT terms.
pub fn symot_loss(
    g: &mut Graph,
    flow: &BoundFlow<'_>,
    bank: &KernelBank,
    x_batch: &Tensor,
    z_batch: &Tensor,
    beta: f64,
    symmetric: bool,
) -> Result<(Var, LossBreakdown)> {
    if x_batch.rows() != z_batch.rows() || x_batch.shape() != z_batch.shape() {
        return Err(Error::Dimension(format!(
            "batches must have equal shapes, got {:?} and {:?}",
            x_batch.shape(),
            z_batch.shape()
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    if x_batch.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let x = g.constant(x_batch.clone());
    let z = g.constant(z_batch.clone());

    let tx = flow.forward(g, x)?;
    let fwd_mmd = mmd_objective(g, bank, tx, z)?;
    let fwd_ot = ot_cost(g, x, tx)?;
    let fwd_const = bank.gram_mean(z_batch, z_batch)?;

    let mut parts = LossBreakdown { beta, ..Default::default() };
    parts.mmd_fwd = g.value(fwd_mmd).item()? + fwd_const;
    parts.ot_fwd = g.value(fwd_ot).item()?;

    let weighted = g.scale(fwd_ot, beta)?;
    let mut root = g.add(fwd_mmd, weighted)?;
    let mut dropped = fwd_const;

    if symmetric {
        let iz = flow.inverse(g, z)?;
        let bwd_mmd = mmd_objective(g, bank, iz, x)?;
        let bwd_ot = ot_cost(g, iz, z)?;
        let bwd_const = bank.gram_mean(x_batch, x_batch)?;
        parts.mmd_bwd = g.value(bwd_mmd).item()? + bwd_const;
        parts.ot_bwd = g.value(bwd_ot).item()?;
        let weighted = g.scale(bwd_ot, beta)?;
        root = g.add(root, bwd_mmd)?;
        root = g.add(root, weighted)?;
        dropped += bwd_const;
    }

    parts.objective = g.value(root).item()?;
    parts.total = parts.mmd_fwd + parts.mmd_bwd + beta * (parts.ot_fwd + parts.ot_bwd);
    if !(parts.objective.is_finite() && parts.total.is_finite()) {
        return Err(Error::NonFinite("symot_loss"));
    }
    debug_assert!((parts.total - dropped - parts.objective).abs() < 1e-9 * (1.0 + parts.total.abs()));
    Ok((root, parts))
}

/// Symmetric MMD distance `MMD(T(x), z) + MMD(x, T^-1(z))`.
pub fn d_mmd(model: &FlowModel, bank: &KernelBank, x: &Tensor, z: &Tensor) -> Result<f64> {
    let tx = model.forward(x)?;
    let iz = model.inverse(z)?;
    Ok(mmd_distance(bank, &tx, z)? + mmd_distance(bank, x, &iz)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::DEFAULT_SCALES;

    fn ot(a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let c = ot_cost(&mut g, av, bv)?;
        Ok(g.value(c).item()?)
    }

    #[test]
    fn ot_cost_basics() {
        let a = Tensor::from_rows(&[[0.0, 0.0]]);
        let b = Tensor::from_rows(&[[3.0, 4.0]]);
        assert_eq!(ot(&a, &a).unwrap(), 0.0);
        assert_eq!(ot(&a, &b).unwrap(), 25.0);
        assert_eq!(ot_cost_value(&a, &b).unwrap(), 25.0);
        let c = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(ot(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_model_on_identical_batches_has_zero_total() {
        let model = FlowModel::init(2, 4, 8, 2.0, 3).unwrap();
        let x = Tensor::from_rows(&[[0.0, 1.0], [1.0, -1.0], [2.0, 0.5]]);
        let bank = KernelBank::scaled(1.0, &DEFAULT_SCALES).unwrap();
        for beta in [0.0, 0.03, 100.0] {
            for symmetric in [true, false] {
                let mut g = Graph::new();
                let flow = model.bind(&mut g, true);
                let (_, parts) = symot_loss(&mut g, &flow, &bank, &x, &x, beta, symmetric).unwrap();
                assert!(parts.total.abs() < 1e-12, "{parts:?}");
            }
        }
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let model = FlowModel::init(2, 2, 8, 2.0, 3).unwrap();
        let bank = KernelBank::single(1.0).unwrap();
        let x = Tensor::zeros(vec![3, 2]);
        let z = Tensor::zeros(vec![4, 2]);
        let mut g = Graph::new();
        let flow = model.bind(&mut g, true);
        assert!(symot_loss(&mut g, &flow, &bank, &x, &z, 0.1, true).is_err());
    }

    #[test]
    fn average_of_breakdowns() {
        let a = LossBreakdown { mmd_fwd: 1.0, total: 2.0, beta: 0.5, ..Default::default() };
        let b = LossBreakdown { mmd_fwd: 3.0, total: 4.0, beta: 0.5, ..Default::default() };
        let m = LossBreakdown::average(&[a, b]);
        assert_eq!(m.mmd_fwd, 2.0);
        assert_eq!(m.total, 3.0);
        assert_eq!(m.beta, 0.5);
    }
}
