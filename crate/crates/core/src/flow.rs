//! Affine coupling flows with an exact inverse.
//!
//! Each [`CouplingBlock`] keeps the first `ceil(d/2)` channels, rescales and
//! shifts the rest, then reorders all channels with a fixed permutation:
//!
//! ```text
//! z1 = x1
//! z2 = x2 * exp(gamma * tanh(s(x1))) + t(x1)
//! z  = permute(concat(z1, z2))
//! ```
//!
//! Inversion undoes the permutation and solves for `x2`, so the inverse is
//! exact up to floating-point rounding. The `gamma * tanh` clamp keeps every
//! per-block log-scale within `[-gamma, gamma]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Hidden layers per subnet.
pub const HIDDEN_LAYERS: usize = 2;

const CHECKPOINT_MAGIC: &[u8; 6] = b"SYMOT1";

/// Fully connected layer with `weight: out x in` and `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_out, fan_in]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let weight = Tensor::matrix(fan_out, fan_in, draw(fan_out * fan_in)).expect("sized");
        let bias = Tensor::vector(draw(fan_out));
        Self { weight, bias }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// MLP with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub layers: Vec<Dense>,
}

impl Subnet {
    /// `dims = [in, hidden.., out]`; the output layer starts at zero.
    fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| if i == last { Dense::zeros(w[0], w[1]) } else { Dense::uniform(w[0], w[1], rng) })
            .collect();
        Self { layers }
    }

    /// Layer widths `[in, hidden.., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in()];
        dims.extend(self.layers.iter().map(Dense::fan_out));
        dims
    }

    fn validate(&self, fan_in: usize, fan_out: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter("subnet has no layers".into()));
        }
        let dims = self.dims();
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.shape() != [l.fan_out()] || l.fan_in() != dims[i] {
                return Err(Error::Dimension(format!("subnet layer {i} does not chain")));
            }
        }
        if dims[0] != fan_in || dims[dims.len() - 1] != fan_out {
            return Err(Error::Dimension(format!(
                "subnet maps {} -> {}, coupling needs {fan_in} -> {fan_out}",
                dims[0],
                dims[dims.len() - 1]
            )));
        }
        Ok(())
    }

    fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, pair) in vars.chunks_exact(2).enumerate() {
            h = g.linear(h, pair[0], pair[1])?;
            if i + 1 < n {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn param_count(&self) -> usize {
        self.layers.len() * 2
    }
}

/// One affine coupling step followed by a channel permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    pub s_net: Subnet,
    pub t_net: Subnet,
    gamma: f64,
    permutation: Vec<usize>,
    inverse_permutation: Vec<usize>,
}

fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    let mut inv = vec![usize::MAX; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        if p >= perm.len() || inv[p] != usize::MAX {
            return Err(Error::InvalidParameter(format!("{perm:?} is not a permutation")));
        }
        inv[p] = j;
    }
    Ok(inv)
}

/// Width of the half that passes through unchanged.
pub fn split_point(dim: usize) -> usize {
    dim.div_ceil(2)
}

impl CouplingBlock {
    pub fn new(s_net: Subnet, t_net: Subnet, gamma: f64, permutation: Vec<usize>) -> Result<Self> {
        let dim = permutation.len();
        if dim < 2 {
            return Err(Error::UnsupportedDimension(dim));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        let h = split_point(dim);
        s_net.validate(h, dim - h)?;
        t_net.validate(h, dim - h)?;
        let inverse_permutation = invert_permutation(&permutation)?;
        Ok(Self { s_net, t_net, gamma, permutation, inverse_permutation })
    }

    pub fn dim(&self) -> usize {
        self.permutation.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Output channel `j` takes concatenated channel `permutation()[j]`.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    fn param_count(&self) -> usize {
        self.s_net.param_count() + self.t_net.param_count()
    }

    fn halves(&self) -> (Vec<usize>, Vec<usize>) {
        let h = split_point(self.dim());
        ((0..h).collect(), (h..self.dim()).collect())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let (_, d) = g.value(x).expect_matrix("coupling input")?;
        if d < 2 {
            return Err(Error::UnsupportedDimension(d));
        }
        if d != self.dim() {
            return Err(Error::Dimension(format!("block expects {} channels, got {d}", self.dim())));
        }
        Ok(())
    }

    /// `exp(±gamma * tanh(s(x1)))`
    fn scale(&self, g: &mut Graph, s_vars: &[Var], x1: Var, sign: f64) -> Result<Var> {
        let s = self.s_net.apply(g, s_vars, x1)?;
        let th = g.tanh(s)?;
        let ls = g.scale(th, sign * self.gamma)?;
        g.exp(ls)
    }

    /// Graph version of [`CouplingBlock::forward`]; `vars` are this block's
    /// parameters in declaration order.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let (s_vars, t_vars) = vars.split_at(self.s_net.param_count());
        let (first, second) = self.halves();
        let x1 = g.select_cols(x, &first)?;
        let x2 = g.select_cols(x, &second)?;
        let scale = self.scale(g, s_vars, x1, 1.0)?;
        let shift = self.t_net.apply(g, t_vars, x1)?;
        let scaled = g.mul(x2, scale)?;
        let z2 = g.add(scaled, shift)?;
        let z = g.concat_cols(x1, z2)?;
        g.select_cols(z, &self.permutation)
    }

    /// Graph version of [`CouplingBlock::inverse`].
    pub fn inverse_graph(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var> {
        self.check_input(g, z)?;
        let (s_vars, t_vars) = vars.split_at(self.s_net.param_count());
        let (first, second) = self.halves();
        let y = g.select_cols(z, &self.inverse_permutation)?;
        let z1 = g.select_cols(y, &first)?;
        let z2 = g.select_cols(y, &second)?;
        let shift = self.t_net.apply(g, t_vars, z1)?;
        let inv_scale = self.scale(g, s_vars, z1, -1.0)?;
        let centered = g.sub(z2, shift)?;
        let x2 = g.mul(centered, inv_scale)?;
        g.concat_cols(z1, x2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, Self::forward_graph)
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.eval(z, Self::inverse_graph)
    }

    fn eval(
        &self,
        input: &Tensor,
        f: impl Fn(&Self, &mut Graph, &[Var], Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .s_net
            .params()
            .chain(self.t_net.params())
            .map(|p| g.constant(p.clone()))
            .collect();
        let x = g.constant(input.clone());
        let out = f(self, &mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }
}

/// `T = T_K o ... o T_1`, a stack of coupling blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    blocks: Vec<CouplingBlock>,
}

/// Parameters of a [`FlowModel`] placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundFlow<'m> {
    model: &'m FlowModel,
    vars: Vec<Var>,
}

impl BoundFlow<'_> {
    /// Parameter handles in declaration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn block_vars(&self) -> impl DoubleEndedIterator<Item = (&CouplingBlock, &[Var])> {
        let mut offset = 0;
        let ranges: Vec<_> = self
            .model
            .blocks
            .iter()
            .map(|b| {
                let r = offset..offset + b.param_count();
                offset = r.end;
                r
            })
            .collect();
        self.model.blocks.iter().zip(ranges).map(|(b, r)| (b, &self.vars[r]))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.model.check_dim(g.value(x))?;
        let mut h = x;
        for (block, vars) in self.block_vars() {
            h = block.forward_graph(g, vars, h)?;
        }
        Ok(h)
    }

    pub fn inverse(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.model.check_dim(g.value(z))?;
        let mut h = z;
        for (block, vars) in self.block_vars().rev() {
            h = block.inverse_graph(g, vars, h)?;
        }
        Ok(h)
    }
}

impl FlowModel {
    pub fn new(blocks: Vec<CouplingBlock>) -> Result<Self> {
        let dim = blocks.first().map(CouplingBlock::dim).ok_or_else(|| {
            Error::InvalidParameter("a flow needs at least one block".into())
        })?;
        if blocks.iter().any(|b| b.dim() != dim) {
            return Err(Error::Dimension("blocks disagree on dimensionality".into()));
        }
        Ok(Self { dim, blocks })
    }

    /// Seeded model whose subnets end in zero layers, so it starts as a pure
    /// composition of channel permutations.
    pub fn init(dim: usize, blocks: usize, subnet_width: usize, gamma: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::UnsupportedDimension(dim));
        }
        if blocks == 0 || subnet_width == 0 {
            return Err(Error::InvalidParameter("blocks and subnet_width must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = split_point(dim);
        let mut dims = vec![h];
        dims.extend(std::iter::repeat_n(subnet_width, HIDDEN_LAYERS));
        dims.push(dim - h);
        let identity: Vec<usize> = (0..dim).collect();
        let blocks = (0..blocks)
            .map(|_| {
                let s_net = Subnet::init(&dims, &mut rng);
                let t_net = Subnet::init(&dims, &mut rng);
                let mut perm = identity.clone();
                while perm == identity {
                    perm.shuffle(&mut rng);
                }
                CouplingBlock::new(s_net, t_net, gamma, perm)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|b| b.s_net.params().chain(b.t_net.params())).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let CouplingBlock { s_net, t_net, .. } = b;
                s_net.params_mut().chain(t_net.params_mut())
            })
            .collect()
    }

    /// Number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Channel permutation of the whole stack when every subnet outputs zero:
    /// output channel `j` equals input channel `composite_permutation()[j]`.
    pub fn composite_permutation(&self) -> Vec<usize> {
        let mut acc: Vec<usize> = (0..self.dim).collect();
        for b in &self.blocks {
            acc = b.permutation.iter().map(|&p| acc[p]).collect();
        }
        acc
    }

    fn check_dim(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.expect_matrix("flow input")?;
        if d != self.dim {
            return Err(Error::Dimension(format!("model dim {} but input has {d} columns", self.dim)));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFlow<'_> {
        let vars = self.parameters().into_iter().map(|p| g.leaf(p.clone(), trainable)).collect();
        BoundFlow { model: self, vars }
    }

    /// Forward map without gradient tracking.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let flow = self.bind(&mut g, false);
        let x = g.constant(x.clone());
        let y = flow.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Inverse map without gradient tracking.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let flow = self.bind(&mut g, false);
        let z = g.constant(z.clone());
        let y = flow.inverse(&mut g, z)?;
        Ok(g.value(y).clone())
    }

    /// `max |T^-1(T(x)) - x|`
    pub fn roundtrip_error(&self, x: &Tensor) -> Result<f64> {
        let back = self.inverse(&self.forward(x)?)?;
        Ok(back.max_abs_diff(x))
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let put = |w: &mut dyn Write, v: u64| w.write_all(&v.to_le_bytes());
        w.write_all(CHECKPOINT_MAGIC)?;
        put(&mut w, self.dim as u64)?;
        put(&mut w, self.blocks.len() as u64)?;
        let dims = self.blocks[0].s_net.dims();
        put(&mut w, dims.len() as u64)?;
        for &d in &dims {
            put(&mut w, d as u64)?;
        }
        w.write_all(&self.blocks[0].gamma.to_le_bytes())?;
        for b in &self.blocks {
            for &p in &b.permutation {
                put(&mut w, p as u64)?;
            }
        }
        for p in self.parameters() {
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Parses a checkpoint, validating the header before reading tensors.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Malformed("bad checkpoint magic".into()));
        }
        let dim = read_usize(&mut r, "dim")?;
        let n_blocks = read_usize(&mut r, "block count")?;
        let n_dims = read_usize(&mut r, "subnet depth")?;
        if dim < 2 || n_blocks == 0 || n_dims < 2 || n_dims > 64 || dim > 1 << 16 || n_blocks > 1 << 16 {
            return Err(Error::Malformed(format!(
                "implausible header: dim {dim}, {n_blocks} blocks, {n_dims} subnet dims"
            )));
        }
        let dims = (0..n_dims).map(|_| read_usize(&mut r, "subnet dims")).collect::<Result<Vec<_>>>()?;
        let h = split_point(dim);
        if dims[0] != h || dims[n_dims - 1] != dim - h || dims.iter().any(|&d| d == 0 || d > 1 << 20) {
            return Err(Error::Malformed(format!("subnet dims {dims:?} do not fit dim {dim}")));
        }
        let gamma = read_f64(&mut r, "gamma")?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Malformed(format!("gamma {gamma} must be positive")));
        }
        let mut perms = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let perm = (0..dim).map(|_| read_usize(&mut r, "permutation")).collect::<Result<Vec<_>>>()?;
            invert_permutation(&perm).map_err(|e| Error::Malformed(e.to_string()))?;
            perms.push(perm);
        }
        let per_subnet: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let expected = n_blocks * 2 * per_subnet * 8;
        if r.len() != expected {
            return Err(Error::Malformed(format!(
                "expected {expected} parameter bytes, found {}",
                r.len()
            )));
        }
        let read_subnet = |r: &mut &[u8]| -> Result<Subnet> {
            let layers = dims
                .windows(2)
                .map(|w| {
                    let weight = read_tensor(r, vec![w[1], w[0]])?;
                    let bias = read_tensor(r, vec![w[1]])?;
                    Ok(Dense { weight, bias })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Subnet { layers })
        };
        let mut blocks = Vec::with_capacity(n_blocks);
        for perm in perms {
            let s_net = read_subnet(&mut r)?;
            let t_net = read_subnet(&mut r)?;
            blocks.push(CouplingBlock::new(s_net, t_net, gamma, perm)?);
        }
        Self::new(blocks)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Malformed(format!("truncated checkpoint while reading {what}")))
}

fn read_usize(r: &mut &[u8], what: &str) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Malformed(format!("{what} overflows")))
}

fn read_f64(r: &mut &[u8], what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

fn read_tensor(r: &mut &[u8], shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| read_f64(r, "parameters")).collect::<Result<Vec<_>>>()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Malformed("non-finite parameter".into()));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_block(perm: Vec<usize>, gamma: f64) -> CouplingBlock {
        let d = perm.len();
        let h = split_point(d);
        let net = || Subnet { layers: vec![Dense::zeros(h, 4), Dense::zeros(4, d - h)] };
        CouplingBlock::new(net(), net(), gamma, perm).unwrap()
    }

    fn random_points(n: usize, d: usize, bound: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    fn randomize(model: &mut FlowModel, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.parameters_mut() {
            for v in p.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    #[test]
    fn zero_subnets_only_permute() {
        let block = zero_block(vec![2, 0, 1], 2.0);
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let z = block.forward(&x).unwrap();
        assert_eq!(z.data(), &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]);
        assert_eq!(block.inverse(&z).unwrap(), x);
        // Inverse alone applies the inverse permutation.
        let back = block.inverse(&x).unwrap();
        assert_eq!(back.data(), &[2.0, 3.0, 1.0, 5.0, 6.0, 4.0]);
    }

    #[test]
    fn additive_only_example() {
        let mut block = zero_block(vec![0, 1], 2.0);
        block.t_net.layers[1].bias = Tensor::vector(vec![3.0]);
        let x = Tensor::from_rows(&[[1.0, 2.0]]);
        let z = block.forward(&x).unwrap();
        assert_eq!(z.data(), &[1.0, 5.0]);
        assert_eq!(block.inverse(&z).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn rejects_one_dimensional_input() {
        assert!(matches!(FlowModel::init(1, 2, 8, 2.0, 0), Err(Error::UnsupportedDimension(1))));
        let block = zero_block(vec![1, 0], 2.0);
        let x = Tensor::matrix(3, 1, vec![0.0; 3]).unwrap();
        assert!(matches!(block.forward(&x), Err(Error::UnsupportedDimension(1))));
    }

    #[test]
    fn block_roundtrip_random() {
        let mut model = FlowModel::init(3, 1, 8, 2.0, 5).unwrap();
        randomize(&mut model, 1.0, 6);
        let x = random_points(50, 3, 4.0, 7);
        let block = &model.blocks()[0];
        let back = block.inverse(&block.forward(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn single_block_model_matches_block() {
        let mut model = FlowModel::init(2, 1, 8, 2.0, 1).unwrap();
        randomize(&mut model, 0.5, 2);
        let x = random_points(10, 2, 2.0, 3);
        assert_eq!(model.forward(&x).unwrap(), model.blocks()[0].forward(&x).unwrap());
    }

    #[test]
    fn init_is_deterministic_and_permutes() {
        let a = FlowModel::init(4, 3, 16, 2.0, 11).unwrap();
        let b = FlowModel::init(4, 3, 16, 2.0, 11).unwrap();
        assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
        for block in a.blocks() {
            assert_ne!(block.permutation(), &[0, 1, 2, 3]);
        }
        let x = random_points(5, 4, 3.0, 1);
        let y = a.forward(&x).unwrap();
        let perm = a.composite_permutation();
        for i in 0..5 {
            for (j, &p) in perm.iter().enumerate() {
                assert_eq!(y.get(i, j), x.get(i, p));
            }
        }
    }

    #[test]
    fn even_block_count_in_2d_starts_at_identity() {
        let m = FlowModel::init(2, 8, 16, 2.0, 3).unwrap();
        assert_eq!(m.composite_permutation(), vec![0, 1]);
        let x = random_points(20, 2, 4.0, 9);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let mut model = FlowModel::init(3, 2, 8, 1.5, 4).unwrap();
        randomize(&mut model, 1.0, 8);
        let bytes = model.to_checkpoint_bytes();
        let back = FlowModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, model);

        assert!(matches!(
            FlowModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Malformed(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FlowModel::from_checkpoint_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(FlowModel::from_checkpoint_bytes(&extra).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = FlowModel::init(2, 2, 8, 2.0, 0).unwrap();
        let x = random_points(4, 3, 1.0, 0);
        assert!(matches!(model.forward(&x), Err(Error::Dimension(_))));
    }
}
