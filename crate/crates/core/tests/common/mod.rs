#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symot::flow::FlowModel;
use symot::kernels::KernelBank;
use symot::loss::ot_cost_value;
use symot::kernels::mmd2_value;
use symot::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Overwrites every parameter (output layers included) with U(-scale, scale)
/// so the model is a generic point of parameter space.
pub fn randomize(model: &mut FlowModel, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in model.parameters_mut() {
        for v in p.data_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
}

/// The full objective evaluated by plain tensor code (flow value path,
/// streamed kernel means): an oracle independent of the autodiff graph.
pub fn loss_oracle(model: &FlowModel, bank: &KernelBank, x: &Tensor, z: &Tensor, beta: f64, symmetric: bool) -> f64 {
    let tx = model.forward(x).unwrap();
    let mut l = mmd2_value(bank, &tx, z).unwrap() + beta * ot_cost_value(x, &tx).unwrap();
    if symmetric {
        let iz = model.inverse(z).unwrap();
        l += mmd2_value(bank, x, &iz).unwrap() + beta * ot_cost_value(&iz, z).unwrap();
    }
    l
}

/// Central difference of `f` with respect to every scalar parameter.
pub fn fd_param_grads(model: &FlowModel, h: f64, f: impl Fn(&FlowModel) -> f64) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    let shapes: Vec<usize> = model.parameters().iter().map(|p| p.numel()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (pi, &n) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(n);
        for k in 0..n {
            let orig = m.parameters()[pi].data()[k];
            m.parameters_mut()[pi].data_mut()[k] = orig + h;
            let up = f(&m);
            m.parameters_mut()[pi].data_mut()[k] = orig - h;
            let down = f(&m);
            m.parameters_mut()[pi].data_mut()[k] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Worst relative error between analytic and numeric gradients. Entries
/// whose analytic magnitude is below `small` are instead required to agree
/// to `abs_tol` absolutely; a violation there is reported as infinity.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], small: f64, abs_tol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() < small {
            if (a - n).abs() >= abs_tol {
                return f64::INFINITY;
            }
        } else {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
        }
    }
    worst
}

/// Minimal XML well-formedness check: balanced, properly nested tags.
pub fn xml_well_formed(text: &str) -> bool {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        let Some(end) = rest[start..].find('>') else { return false };
        let tag = &rest[start + 1..start + end];
        rest = &rest[start + end + 1..];
        if tag.starts_with('?') || tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            if stack.pop().as_deref() != Some(name.trim()) {
                return false;
            }
        } else if !tag.ends_with('/') {
            stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
        }
    }
    stack.is_empty()
}
