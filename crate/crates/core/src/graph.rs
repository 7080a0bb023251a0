//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its output, and records its parents, so nodes are always
//! in topological order and [`Graph::backward`] is a single reverse sweep.
//! A new graph is built for every training step.
//!
//! Only the operations needed by coupling flows, Gaussian kernels and the
//! transport losses are provided. There is no implicit broadcasting: the
//! only mixed-shape operations are scalar [`Graph::scale`] and the fused
//! [`Graph::linear`] layer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Relu(Var),
    Reduce { src: Var, op: Reduction, axis: Option<usize> },
    SqDist(Var, Var),
    /// Saved `dK/d(d2)` for every entry.
    GaussianGram { a: Var, b: Var, slope: Vec<f64> },
    SelectCols { src: Var, cols: Vec<usize> },
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c += A * B` for row-major `c` (m x n) with arbitrarily strided `a` (m x k)
/// and `b` (k x n).
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserted extents keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `sum_l w_l exp(c_l d2)` with `c_l = -1 / (2 sigma2_l)`, plus its
/// derivative in `d2`.
///
/// When the bandwidths are spaced by exact factors of two (the default bank)
/// every term is a repeated square of the widest one, so a single `exp`
/// serves all of them.
pub(crate) struct GaussMix {
    // (c_l, w_l), widest kernel (c closest to zero) first
    terms: Vec<(f64, f64)>,
    octaves: bool,
}

impl GaussMix {
    pub(crate) fn new(bandwidths: &[f64], weights: &[f64]) -> Self {
        let mut terms: Vec<(f64, f64)> = bandwidths.iter().zip(weights).map(|(s, w)| (-0.5 / s, *w)).collect();
        terms.sort_by(|p, q| q.0.total_cmp(&p.0));
        let octaves = terms.len() > 1 && terms.windows(2).all(|p| p[1].0 == 2.0 * p[0].0);
        GaussMix { terms, octaves }
    }

    #[inline]
    pub(crate) fn eval(&self, d2: f64) -> (f64, f64) {
        let (mut k, mut slope) = (0.0, 0.0);
        if self.octaves {
            let mut e = (self.terms[0].0 * d2).exp();
            for &(c, w) in &self.terms {
                k += w * e;
                slope += c * w * e;
                e *= e;
            }
        } else {
            for &(c, w) in &self.terms {
                let e = w * (c * d2).exp();
                k += e;
                slope += c * e;
            }
        }
        (k, slope)
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SqDist(a, b)
            | Op::ConcatCols(a, b)
            | Op::GaussianGram { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::Linear { x, w, b } => self.rg(*x) || self.rg(*w) || self.rg(*b),
            Op::Neg(a) | Op::Scale(a, _) | Op::Tanh(a) | Op::Exp(a) | Op::Relu(a) => self.rg(*a),
            Op::Reduce { src, .. } | Op::SelectCols { src, .. } => self.rg(*src),
        };
        // Constant subexpressions drop their parents; backward never enters them.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).expect_matrix(what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out);
        let t = Tensor::matrix(m, n, out)?;
        check_finite(&t, "matmul")?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Fully connected layer `x * w^T + b` with `x: n x in`, `w: out x in`,
    /// `b: [out]`. The bias is added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fan_in) = self.matrix_dims(x, "linear input")?;
        let (fan_out, w_in) = self.matrix_dims(w, "linear weight")?;
        if w_in != fan_in || self.shape(b) != [fan_out] {
            return Err(Error::Dimension(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm_acc(
            n,
            fan_in,
            fan_out,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (1, fan_in),
            &mut out,
        );
        let t = Tensor::matrix(n, fan_out, out)?;
        check_finite(&t, "linear")?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        check_finite(&t, "add")?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        check_finite(&t, "sub")?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        check_finite(&t, "mul")?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| -x);
        Ok(self.push(t, Op::Neg(a)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| c * x);
        check_finite(&t, "scale")?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::tanh);
        Ok(self.push(t, Op::Tanh(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::exp);
        check_finite(&t, "exp")?;
        Ok(self.push(t, Op::Exp(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0));
        Ok(self.push(t, Op::Relu(a)))
    }

    /// Sum or mean, over one axis or (with `None`) over everything.
    pub fn reduce(&mut self, src: Var, op: Reduction, axis: Option<usize>) -> Result<Var> {
        let v = self.value(src);
        let t = match axis {
            None => {
                if v.numel() == 0 {
                    return Err(Error::EmptyReduction);
                }
                let s: f64 = v.data().iter().sum();
                Tensor::scalar(match op {
                    Reduction::Sum => s,
                    Reduction::Mean => s / v.numel() as f64,
                })
            }
            Some(axis) => {
                if axis >= v.rank() {
                    return Err(Error::InvalidAxis { axis, rank: v.rank() });
                }
                let (outer, len, inner) = axis_extents(v.shape(), axis);
                if len == 0 {
                    return Err(Error::EmptyReduction);
                }
                let scale = match op {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / len as f64,
                };
                let data = v.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        add_into(&mut out[o * inner..(o + 1) * inner], &data[base..base + inner]);
                    }
                }
                out.iter_mut().for_each(|x| *x *= scale);
                let mut shape = v.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        check_finite(&t, "reduce")?;
        Ok(self.push(t, Op::Reduce { src, op, axis }))
    }

    pub fn sum(&mut self, src: Var) -> Result<Var> {
        self.reduce(src, Reduction::Sum, None)
    }

    pub fn mean(&mut self, src: Var) -> Result<Var> {
        self.reduce(src, Reduction::Mean, None)
    }

    /// Squared Euclidean distances between the rows of `a` (m x d) and `b` (n x d).
    ///
    /// Differences are formed coordinate by coordinate, so entries are
    /// nonnegative and exact zeros survive; the clamp only guards rounding.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims(a, "pairwise_sqdist lhs")?;
        let (n, d2) = self.matrix_dims(b, "pairwise_sqdist rhs")?;
        if d != d2 {
            return Err(Error::Dimension(format!(
                "pairwise_sqdist feature dimensions {d} and {d2} differ"
            )));
        }
        let t = Tensor::matrix(m, n, sqdist_values(self.value(a), self.value(b)))?;
        check_finite(&t, "pairwise_sqdist")?;
        Ok(self.push(t, Op::SqDist(a, b)))
    }

    /// Fused multi-bandwidth Gaussian gram matrix
    /// `K[i, j] = sum_l weights[l] * exp(-|a_i - b_j|^2 / (2 bandwidths[l]))`.
    ///
    /// Equivalent to composing [`Graph::pairwise_sqdist`], [`Graph::scale`],
    /// [`Graph::exp`] and [`Graph::add`], but keeps a single saved slope
    /// matrix instead of one intermediate per bandwidth.
    pub fn gaussian_gram(&mut self, a: Var, b: Var, bandwidths: &[f64], weights: &[f64]) -> Result<Var> {
        let (m, d) = self.matrix_dims(a, "gaussian_gram lhs")?;
        let (n, d2) = self.matrix_dims(b, "gaussian_gram rhs")?;
        if d != d2 {
            return Err(Error::Dimension(format!(
                "gaussian_gram feature dimensions {d} and {d2} differ"
            )));
        }
        if bandwidths.len() != weights.len() || bandwidths.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter("gaussian_gram needs positive bandwidths".into()));
        }
        let mix = GaussMix::new(bandwidths, weights);
        let sq = sqdist_values(self.value(a), self.value(b));
        let mut k = Vec::with_capacity(m * n);
        let mut slope = Vec::with_capacity(m * n);
        for d2 in sq {
            let (kv, sv) = mix.eval(d2);
            k.push(kv);
            slope.push(sv);
        }
        let t = Tensor::matrix(m, n, k)?;
        check_finite(&t, "gaussian_gram")?;
        Ok(self.push(t, Op::GaussianGram { a, b, slope }))
    }

    /// Picks columns `cols` of a matrix (in that order). Used for channel
    /// splits and permutations.
    pub fn select_cols(&mut self, src: Var, cols: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(src, "select_cols input")?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension(format!("column {bad} out of range for {c} columns")));
        }
        let data = self.value(src).data();
        let k = cols.len();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let t = Tensor::matrix(n, k, out)?;
        Ok(self.push(t, Op::SelectCols { src, cols: cols.to_vec() }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.matrix_dims(a, "concat lhs")?;
        let (n2, cb) = self.matrix_dims(b, "concat rhs")?;
        if n != n2 {
            return Err(Error::Dimension(format!("concat row counts {n} and {n2} differ")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::matrix(n, ca + cb, out)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Reverse sweep from a scalar `root`. Gradients of `requires_grad`
    /// leaves accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => {
                        node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Hands out the accumulation buffer for parent `v`.
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        // Adds `vals` into `v`'s buffer, or takes them as the buffer if `v`
        // has none yet (saves zero-filling activation-sized buffers).
        fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, vals: impl Iterator<Item = f64>) {
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(vals).for_each(|(d, x)| *d += x),
                slot => *slot = Some(vals.collect()),
            }
        }

        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.cols();
                if wants(*a) {
                    // dA = dC * B^T
                    let ga = slot(grads, nodes, *a);
                    gemm_acc(m, n, k, g, (n, 1), val(*b), (1, n), ga);
                }
                if wants(*b) {
                    // dB = A^T * dC
                    let gb = slot(grads, nodes, *b);
                    gemm_acc(k, m, n, val(*a), (1, k), g, (n, 1), gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fan_in) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                let fan_out = nodes[w.0].value.rows();
                if wants(*x) {
                    // dX = dY * W
                    let gx = slot(grads, nodes, *x);
                    gemm_acc(n, fan_out, fan_in, g, (fan_out, 1), val(*w), (fan_in, 1), gx);
                }
                if wants(*w) {
                    // dW = dY^T * X
                    let gw = slot(grads, nodes, *w);
                    gemm_acc(fan_out, n, fan_in, g, (1, fan_out), val(*x), (fan_in, 1), gw);
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks_exact(fan_out) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|s| -s));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(s, y)| s * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(s, x)| s * x));
                }
            }
            Op::Neg(a) => accumulate(grads, *a, g.iter().map(|s| -s)),
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|s| c * s)),
            Op::Tanh(a) => accumulate(grads, *a, g.iter().zip(out.data()).map(|(s, y)| s * (1.0 - y * y))),
            Op::Exp(a) => accumulate(grads, *a, g.iter().zip(out.data()).map(|(s, y)| s * y)),
            Op::Relu(a) => {
                accumulate(grads, *a, g.iter().zip(val(*a)).map(|(s, x)| if *x > 0.0 { *s } else { 0.0 }))
            }
            Op::Reduce { src, op, axis } => {
                let shape = nodes[src.0].value.shape().to_vec();
                let gs = slot(grads, nodes, *src);
                match axis {
                    None => {
                        let c = match op {
                            Reduction::Sum => g[0],
                            Reduction::Mean => g[0] / gs.len() as f64,
                        };
                        gs.iter_mut().for_each(|d| *d += c);
                    }
                    Some(axis) => {
                        let (outer, len, inner) = axis_extents(&shape, *axis);
                        let c = match op {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / len as f64,
                        };
                        for o in 0..outer {
                            let go = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for (d, s) in gs[base..base + inner].iter_mut().zip(go) {
                                    *d += c * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::SqDist(a, b) => sqdist_backward(nodes, *a, *b, g, grads),
            Op::GaussianGram { a, b, slope } => {
                let scaled: Vec<f64> = g.iter().zip(slope).map(|(x, y)| x * y).collect();
                sqdist_backward(nodes, *a, *b, &scaled, grads);
            }
            Op::SelectCols { src, cols } => {
                let c = nodes[src.0].value.cols();
                let k = cols.len();
                let gs = slot(grads, nodes, *src);
                for (row_g, row_s) in g.chunks_exact(k.max(1)).zip(gs.chunks_exact_mut(c)) {
                    for (s, &j) in row_g.iter().zip(cols) {
                        row_s[j] += s;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.cols();
                let cb = nodes[b.0].value.cols();
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for (row_g, row_a) in g.chunks_exact(ca + cb).zip(ga.chunks_exact_mut(ca.max(1))) {
                        add_into(row_a, &row_g[..ca]);
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for (row_g, row_b) in g.chunks_exact(ca + cb).zip(gb.chunks_exact_mut(cb.max(1))) {
                        add_into(row_b, &row_g[ca..]);
                    }
                }
            }
        }
    }
}

/// Pushes `g` (upstream gradient w.r.t. the squared distances) into `a` and `b`:
/// `d/da_i = 2 sum_j g_ij (a_i - b_j)`, `d/db_j = 2 sum_i g_ij (b_j - a_i)`.
fn sqdist_backward(nodes: &[Node], a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (m, d) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
    let n = nodes[b.0].value.rows();
    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
    let mut ga = nodes[a.0].requires_grad.then(|| vec![0.0; m * d]);
    let mut gb = nodes[b.0].requires_grad.then(|| vec![0.0; n * d]);
    for i in 0..m {
        let ai = &va[i * d..(i + 1) * d];
        for j in 0..n {
            let w = 2.0 * g[i * n + j];
            if w == 0.0 {
                continue;
            }
            let bj = &vb[j * d..(j + 1) * d];
            for k in 0..d {
                let diff = w * (ai[k] - bj[k]);
                if let Some(ga) = ga.as_mut() {
                    ga[i * d + k] += diff;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j * d + k] -= diff;
                }
            }
        }
    }
    // `a` and `b` may be the same node; add both contributions.
    for (v, part) in [(a, ga), (b, gb)] {
        if let Some(part) = part {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; part.len()]);
            add_into(slot, &part);
        }
    }
}

/// Row-by-row squared distances, shared by the graph op and value-only callers.
pub(crate) fn sqdist_values(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let d = a.cols();
    let (m, n) = (a.rows(), b.rows());
    let (va, vb) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = &va[i * d..(i + 1) * d];
        for j in 0..n {
            let bj = &vb[j * d..(j + 1) * d];
            let s: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(s.max(0.0));
        }
    }
    out
}
