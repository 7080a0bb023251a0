//! AdamW and the seeded mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::graph::Graph;
use crate::kernels::{KernelBank, DEFAULT_SCALES};
use crate::loss::{symot_loss, LossBreakdown};
use crate::tensor::Tensor;

/// Expands one experiment seed into independent per-purpose seeds
/// (SplitMix64 finalizer over the seed mixed with an FNV-1a hash of `purpose`).
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the transport-cost terms.
    pub beta: f64,
    /// Include the inverse-direction MMD and OT terms.
    pub symmetric: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub blocks: usize,
    pub subnet_width: usize,
    pub gamma: f64,
    /// Bandwidth multipliers of the kernel bank, relative to the median heuristic.
    pub kernel_scales: Vec<f64>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 3e-2,
            symmetric: true,
            epochs: 500,
            batch_size: 200,
            lr: 1e-3,
            weight_decay: 1e-5,
            seed: 0,
            blocks: 8,
            subnet_width: 128,
            gamma: 2.0,
            kernel_scales: DEFAULT_SCALES.to_vec(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_x: usize, n_z: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if n_x == 0 || n_z == 0 {
            return Err(Error::EmptyInput);
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 || self.batch_size > n_x.min(n_z) {
            return bad(format!(
                "batch_size {} must be in 1..={}",
                self.batch_size,
                n_x.min(n_z)
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.kernel_scales.is_empty() || self.kernel_scales.iter().any(|s| !(*s > 0.0)) {
            return bad("kernel_scales must be a nonempty list of positive numbers".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW { lr: self.lr, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
/// ```
///
/// A non-finite gradient rejects the whole step and leaves parameters and
/// state untouched.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    opt: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adamw: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.numel() != state.m[i].len() {
            return Err(Error::Dimension(format!(
                "adamw: parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (theta, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *theta -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * *theta);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FlowModel,
    /// Per-epoch averages over that epoch's batches.
    pub trace: Vec<LossBreakdown>,
    /// The bank used by the loss, fixed before the first step.
    pub bank: KernelBank,
}

/// Kernel bank frozen at the start of training: median heuristic over the
/// pooled, untransformed training sets.
pub fn training_bank(x: &Tensor, z: &Tensor, config: &TrainConfig) -> Result<KernelBank> {
    KernelBank::from_samples(x, z, &config.kernel_scales, derive_seed(config.seed, "bandwidth"))
}

pub fn train(x_data: &Tensor, z_data: &Tensor, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(x_data, z_data, config, |_, _, _| Ok(()))
}

/// [`train`], calling `observer(epoch, model, epoch_loss)` after every epoch
/// (epochs count from 1).
pub fn train_with_observer(
    x_data: &Tensor,
    z_data: &Tensor,
    config: &TrainConfig,
    mut observer: impl FnMut(usize, &FlowModel, &LossBreakdown) -> Result<()>,
) -> Result<TrainOutcome> {
    let (n_x, dim) = x_data.expect_matrix("source data")?;
    let (n_z, dim_z) = z_data.expect_matrix("target data")?;
    if dim != dim_z {
        return Err(Error::Dimension(format!("source has {dim} columns, target {dim_z}")));
    }
    config.validate(n_x, n_z)?;

    let bank = training_bank(x_data, z_data, config)?;
    let mut model = FlowModel::init(
        dim,
        config.blocks,
        config.subnet_width,
        config.gamma,
        derive_seed(config.seed, "init"),
    )?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle"));
    let mut state = OptimizerState::new(&model.parameters());
    let opt = config.adamw();

    let pairs = n_x.min(n_z);
    let batches = pairs / config.batch_size;
    let mut x_order: Vec<usize> = (0..n_x).collect();
    let mut z_order: Vec<usize> = (0..n_z).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        x_order.shuffle(&mut shuffle_rng);
        z_order.shuffle(&mut shuffle_rng);
        let mut epoch_parts = Vec::with_capacity(batches);
        for b in 0..batches {
            let range = b * config.batch_size..(b + 1) * config.batch_size;
            let xb = x_data.gather_rows(&x_order[range.clone()]);
            let zb = z_data.gather_rows(&z_order[range]);
            let abort = |e: Error| Error::TrainingAborted { step, source: Box::new(e) };

            let mut g = Graph::new();
            let flow = model.bind(&mut g, true);
            let (root, parts) =
                symot_loss(&mut g, &flow, &bank, &xb, &zb, config.beta, config.symmetric)
                    .map_err(abort)?;
            g.backward(root).map_err(abort)?;
            let mut grads: Vec<Tensor> = flow
                .vars()
                .iter()
                .zip(model.parameters())
                .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adamw_step(&mut model.parameters_mut(), &grad_refs, &mut state, &opt).map_err(abort)?;
            epoch_parts.push(parts);
            step += 1;
        }
        let summary = LossBreakdown::average(&epoch_parts);
        observer(epoch, &model, &summary)?;
        trace.push(summary);
    }
    Ok(TrainOutcome { model, trace, bank })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
