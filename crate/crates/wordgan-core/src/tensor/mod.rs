//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a define-by-run recording of one forward pass: every
//! operation appends a node holding its output buffer and enough context to
//! run the chain rule backwards. Tapes are rebuilt per forward pass and
//! confined to one thread; plain [`Tensor`] values (parameters, images) live
//! outside any tape and can move freely between threads.

pub mod gradcheck;
pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use kernels::{col2im, im2col, matmul, matmul_abt, matmul_atb, ConvGeom};

pub use gradcheck::{finite_diff_check, finite_diff_check_params};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Plain tensor value outside any tape: row-major elements plus shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Validates the shape/element contract: extents positive, element count
    /// equal to the shape product, all elements finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::arg(format!(
                "tensor shape {shape:?} has a zero or missing extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor constructed with non-finite element {bad}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Per-channel running mean/variance owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch-norm mode. `Train` normalizes with the current batch statistics and,
/// when given the running stats, folds them in; `Train { running: None }`
/// normalizes the same way but leaves the persistent stats untouched (used
/// when a network is forwarded inside the *other* player's update step).
pub enum BnMode<'a> {
    Train {
        running: Option<&'a mut RunningStats>,
        momentum: f64,
    },
    Eval {
        running: &'a RunningStats,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Log,
    Negate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Subtract,
    Multiply,
}

enum Op {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: TensorId,
        kernel: TensorId,
        geom: ConvGeom,
    },
    Unary {
        kind: UnaryKind,
        x: TensorId,
    },
    Binary {
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
    },
    Reshape {
        x: TensorId,
    },
    BroadcastHw {
        x: TensorId,
        h: usize,
        w: usize,
    },
    SumAll {
        x: TensorId,
    },
    MeanAll {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients keyed by the leaf node they belong to.
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// Gradient of a leaf, densified to zeros when the leaf never received
    /// any flow.
    pub fn dense(&self, id: TensorId, shape: &[usize]) -> Tensor {
        self.map
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a new leaf tensor. Tracked leaves receive gradients from
    /// [`Tape::backward`].
    pub fn new_tensor(
        &mut self,
        shape: Vec<usize>,
        elements: Vec<f64>,
        track_gradient: bool,
    ) -> Result<TensorId> {
        let t = Tensor::new(shape, elements)?;
        Ok(self.leaf_tensor(&t, track_gradient))
    }

    /// Registers an already-validated [`Tensor`] as a leaf.
    pub fn leaf_tensor(&mut self, t: &Tensor, track_gradient: bool) -> TensorId {
        self.push_node(t.shape.clone(), t.data.clone(), track_gradient, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.leaf_tensor(t, false)
    }

    /// Constant tensor of `shape` filled with `v`.
    pub fn filled(&mut self, shape: &[usize], v: f64) -> TensorId {
        let numel = shape.iter().product();
        self.push_node(shape.to_vec(), vec![v; numel], false, Op::Leaf)
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, rg: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad: rg,
            op,
        });
        id
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, rg: bool, op: Op) -> Result<TensorId> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "operation produced non-finite element {bad}"
            )));
        }
        Ok(self.push_node(shape, data, rg, op))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!(
                "matmul needs 2-d operands, got {sa:?} and {sb:?}"
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {sa:?} vs {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        self.push_op(vec![m, n], data, rg, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs a 2-d tensor, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires(x);
        self.push_op(vec![n, m], data, rg, Op::Transpose { x })
    }

    // ── Convolutions ────────────────────────────────────────────────────

    /// Cross-correlation of `input` `[N,C,H,W]` with `kernel` `[O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d needs 4-d input and kernel, got {si:?} and {sk:?}"
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom::forward(h, w, kh, kw, stride, padding).ok_or_else(|| {
            Error::shape(format!(
                "conv2d output extent not exact: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            ))
        })?;
        let data = conv2d_forward(self.value(input), self.value(kernel), n, c, o, &geom);
        let rg = self.requires(input) || self.requires(kernel);
        self.push_op(
            vec![n, o, geom.out_h, geom.out_w],
            data,
            rg,
            Op::Conv2d { input, kernel, geom },
        )
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`] in its input) of
    /// `input` `[N,C,H,W]` with `kernel` `[C,O,kh,kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!(
                "conv_transpose2d needs 4-d input and kernel, got {si:?} and {sk:?}"
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (kc, o, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c {
            return Err(Error::shape(format!(
                "conv_transpose2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        let geom = ConvGeom::transposed(h, w, kh, kw, stride, padding).ok_or_else(|| {
            Error::shape(format!(
                "conv_transpose2d extents invalid: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            ))
        })?;
        let data = conv_transpose2d_forward(self.value(input), self.value(kernel), n, c, o, &geom);
        let rg = self.requires(input) || self.requires(kernel);
        self.push_op(
            vec![n, o, geom.in_h, geom.in_w],
            data,
            rg,
            Op::ConvTranspose2d { input, kernel, geom },
        )
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryKind, x: TensorId) -> Result<TensorId> {
        let src = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = src.iter().find(|&&v| v <= 0.0) {
                return Err(Error::arg(format!("log of non-positive element {bad}")));
            }
        }
        let data: Vec<f64> = match kind {
            UnaryKind::Sigmoid => src.iter().map(|&v| sigmoid_scalar(v)).collect(),
            UnaryKind::Tanh => src.iter().map(|&v| v.tanh()).collect(),
            UnaryKind::LeakyRelu(alpha) => src
                .iter()
                .map(|&v| if v > 0.0 { v } else { alpha * v })
                .collect(),
            UnaryKind::Log => src.iter().map(|&v| v.ln()).collect(),
            UnaryKind::Negate => src.iter().map(|&v| -v).collect(),
        };
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, rg, Op::Unary { kind, x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: TensorId, alpha: f64) -> Result<TensorId> {
        self.unary(UnaryKind::LeakyRelu(alpha), x)
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn negate(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Negate, x)
    }

    /// Elementwise op with a restricted broadcast rule: `b` must either match
    /// `a` exactly or, right-aligned against `a`, have every extent equal or
    /// one. `a` is never expanded.
    pub fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if !broadcast_ok(&sa, &sb) {
            return Err(Error::shape(format!(
                "operand shape {sb:?} does not broadcast onto {sa:?} (trailing-dimension rule)"
            )));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = if sa == sb {
            match kind {
                BinaryKind::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
                BinaryKind::Subtract => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
                BinaryKind::Multiply => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            }
        } else {
            let bmap = BroadcastMap::new(&sa, &sb);
            let mut out = Vec::with_capacity(av.len());
            for (i, &x) in av.iter().enumerate() {
                let y = bv[bmap.source_index(i)];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Subtract => x - y,
                    BinaryKind::Multiply => x * y,
                });
            }
            out
        };
        let rg = self.requires(a) || self.requires(b);
        self.push_op(sa, data, rg, Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Subtract, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Multiply, a, b)
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    pub fn concat(&mut self, tensors: &[TensorId], axis: usize) -> Result<TensorId> {
        if tensors.is_empty() {
            return Err(Error::arg("concat of zero tensors".to_string()));
        }
        let rank = self.shape(tensors[0]).len();
        if axis >= rank {
            return Err(Error::arg(format!("concat axis {axis} out of rank {rank}")));
        }
        let mut out_shape = self.shape(tensors[0]).to_vec();
        let mut axis_total = 0usize;
        for &t in tensors {
            let s = self.shape(t);
            if s.len() != rank {
                return Err(Error::shape(format!(
                    "concat rank mismatch: {:?} vs {:?}",
                    out_shape, s
                )));
            }
            for (d, (&have, &want)) in s.iter().zip(out_shape.iter()).enumerate() {
                if d != axis && have != want {
                    return Err(Error::shape(format!(
                        "concat non-axis extent mismatch at dim {d}: {have} vs {want}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for &t in tensors {
            let e = self.shape(t)[axis];
            let src = self.value(t);
            for o in 0..outer {
                let src_blk = &src[o * e * inner..(o + 1) * e * inner];
                let dst_blk = &mut data[(o * axis_total + offset) * inner..][..e * inner];
                dst_blk.copy_from_slice(src_blk);
            }
            offset += e;
        }
        let rg = tensors.iter().any(|&t| self.requires(t));
        self.push_op(
            out_shape,
            data,
            rg,
            Op::Concat {
                inputs: tensors.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} does not preserve element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.requires(x);
        self.push_op(shape.to_vec(), data, rg, Op::Reshape { x })
    }

    /// Replicates a `[N,C]` tensor spatially into `[N,C,h,w]`.
    pub fn broadcast_hw(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "broadcast_hw needs a 2-d tensor and positive extents, got {s:?} {h}x{w}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        let src = self.value(x);
        let mut data = vec![0.0; n * c * h * w];
        for (i, &v) in src.iter().enumerate() {
            data[i * h * w..(i + 1) * h * w].fill(v);
        }
        let rg = self.requires(x);
        self.push_op(vec![n, c, h, w], data, rg, Op::BroadcastHw { x, h, w })
    }

    // ── Reductions and scalars ──────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.requires(x);
        self.push_op(vec![1], vec![s], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().sum();
        let rg = self.requires(x);
        self.push_op(vec![1], vec![s / n], rg, Op::MeanAll { x })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, rg, Op::Scale { x, c })
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo < hi) {
            return Err(Error::arg(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let data: Vec<f64> = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        self.push_op(shape, data, rg, Op::Clamp { x, lo, hi })
    }

    // ── Batch normalization ─────────────────────────────────────────────

    /// Normalizes `x` `[N,C,...]` per channel. Train mode uses batch
    /// statistics (requires N >= 2) and updates running stats when provided;
    /// eval mode normalizes with the running stats.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BnMode<'_>,
        epsilon: f64,
    ) -> Result<TensorId> {
        if epsilon <= 0.0 {
            return Err(Error::arg(format!("batch_norm epsilon must be > 0, got {epsilon}")));
        }
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!(
                "batch_norm needs at least [N,C], got {s:?}"
            )));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch_norm gamma/beta must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }

        let (mean, var, train) = match &mode {
            BnMode::Train { .. } => {
                if n < 2 {
                    return Err(Error::arg(format!(
                        "batch_norm train mode needs batch size >= 2, got {n}"
                    )));
                }
                let (m, v) = batch_stats(self.value(x), n, c, spatial);
                (m, v, true)
            }
            BnMode::Eval { running } => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::shape(format!(
                        "running stats sized for {} channels, input has {c}",
                        running.mean.len()
                    )));
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };

        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut data = vec![0.0; xv.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * spatial;
                let (mu, is, g, b) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
                for sp in 0..spatial {
                    data[base + sp] = (xv[base + sp] - mu) * is * g + b;
                }
            }
        }

        if let BnMode::Train {
            running: Some(stats),
            momentum,
        } = mode
        {
            if stats.mean.len() != c || stats.var.len() != c {
                return Err(Error::shape(format!(
                    "running stats sized for {} channels, input has {c}",
                    stats.mean.len()
                )));
            }
            let m = (n * spatial) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
            }
        }

        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push_op(
            s,
            data,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            },
        )
    }

    // ── Reverse pass ────────────────────────────────────────────────────

    /// Runs the chain rule from a scalar loss back to every tracked leaf.
    /// Gradients accumulate across multiple uses of the same tensor.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let lnode = &self.nodes[loss.0];
        if lnode.data.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lnode.shape
            )));
        }
        if !lnode.requires_grad {
            return Err(Error::arg(
                "backward on a detached loss: no tracked tensor feeds it".to_string(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let gy = grads[idx].take().unwrap();
            self.accumulate_op(TensorId(idx), &gy, &mut grads);
            // Leaves keep their gradient; interior grads are dropped once
            // consumed to bound memory.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
            }
        }

        let mut map = HashMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[idx].op, Op::Leaf) && self.nodes[idx].requires_grad {
                    map.insert(
                        TensorId(idx),
                        Tensor {
                            shape: self.nodes[idx].shape.clone(),
                            data: g,
                        },
                    );
                }
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate_op(&self, out: TensorId, gy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let add_to = |id: TensorId, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
            if !self.requires(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[out.0].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    // dA = dC * B^T
                    let da = matmul_abt(gy, self.value(*b), m, n, k);
                    add_to(*a, da, grads);
                }
                if self.requires(*b) {
                    // dB = A^T * dC
                    let db = matmul_atb(self.value(*a), gy, m, k, n);
                    add_to(*b, db, grads);
                }
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = gy[j * m + i];
                    }
                }
                add_to(*x, dx, grads);
            }
            Op::Conv2d { input, kernel, geom } => {
                let si = self.shape(*input);
                let sk = self.shape(*kernel);
                let (n, c, o) = (si[0], si[1], sk[0]);
                if self.requires(*input) {
                    let dx = conv2d_backward_input(gy, self.value(*kernel), n, c, o, geom);
                    add_to(*input, dx, grads);
                }
                if self.requires(*kernel) {
                    let dk = conv2d_backward_kernel(gy, self.value(*input), n, c, o, geom);
                    add_to(*kernel, dk, grads);
                }
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                let si = self.shape(*input);
                let sk = self.shape(*kernel);
                let (n, c, o) = (si[0], si[1], sk[1]);
                if self.requires(*input) {
                    // d input = conv2d(gy, kernel) with the kernel's first two
                    // axes read as (out=C, in=O).
                    let dx = conv2d_forward(gy, self.value(*kernel), n, o, c, geom);
                    add_to(*input, dx, grads);
                }
                if self.requires(*kernel) {
                    let dk =
                        conv_transpose2d_backward_kernel(gy, self.value(*input), n, c, o, geom);
                    add_to(*kernel, dk, grads);
                }
            }
            Op::Unary { kind, x } => {
                let y = &self.nodes[out.0].data;
                let xv = self.value(*x);
                let dx: Vec<f64> = match kind {
                    UnaryKind::Sigmoid => gy
                        .iter()
                        .zip(y)
                        .map(|(&g, &s)| g * s * (1.0 - s))
                        .collect(),
                    UnaryKind::Tanh => gy.iter().zip(y).map(|(&g, &t)| g * (1.0 - t * t)).collect(),
                    UnaryKind::LeakyRelu(alpha) => gy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > 0.0 { g } else { g * alpha })
                        .collect(),
                    UnaryKind::Log => gy.iter().zip(xv).map(|(&g, &v)| g / v).collect(),
                    UnaryKind::Negate => gy.iter().map(|&g| -g).collect(),
                };
                add_to(*x, dx, grads);
            }
            Op::Binary { kind, a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let same = sa == sb;
                if self.requires(*a) {
                    let da: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Subtract => gy.to_vec(),
                        BinaryKind::Multiply => {
                            let bv = self.value(*b);
                            if same {
                                gy.iter().zip(bv).map(|(&g, &v)| g * v).collect()
                            } else {
                                let bmap = BroadcastMap::new(&sa, &sb);
                                gy.iter()
                                    .enumerate()
                                    .map(|(i, &g)| g * bv[bmap.source_index(i)])
                                    .collect()
                            }
                        }
                    };
                    add_to(*a, da, grads);
                }
                if self.requires(*b) {
                    let bn: usize = sb.iter().product();
                    let mut db = vec![0.0; bn];
                    let av = self.value(*a);
                    let sign = if *kind == BinaryKind::Subtract { -1.0 } else { 1.0 };
                    if same {
                        for (i, &g) in gy.iter().enumerate() {
                            db[i] += sign
                                * match kind {
                                    BinaryKind::Multiply => g * av[i],
                                    _ => g,
                                };
                        }
                    } else {
                        let bmap = BroadcastMap::new(&sa, &sb);
                        for (i, &g) in gy.iter().enumerate() {
                            let j = bmap.source_index(i);
                            db[j] += sign
                                * match kind {
                                    BinaryKind::Multiply => g * av[i],
                                    _ => g,
                                };
                        }
                    }
                    add_to(*b, db, grads);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &self.nodes[out.0].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for &t in inputs {
                    let e = self.shape(t)[*axis];
                    if self.requires(t) {
                        let mut dt = vec![0.0; outer * e * inner];
                        for o in 0..outer {
                            let src = &gy[(o * axis_total + offset) * inner..][..e * inner];
                            dt[o * e * inner..(o + 1) * e * inner].copy_from_slice(src);
                        }
                        add_to(t, dt, grads);
                    }
                    offset += e;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train,
            } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let m = (n * spatial) as f64;

                // Per-channel sums of dy and dy * xhat.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * spatial;
                        let (mu, is) = (mean[ch], invstd[ch]);
                        for sp in 0..spatial {
                            let g = gy[base + sp];
                            sum_dy[ch] += g;
                            sum_dy_xhat[ch] += g * (xv[base + sp] - mu) * is;
                        }
                    }
                }
                if self.requires(*beta) {
                    add_to(*beta, sum_dy.clone(), grads);
                }
                if self.requires(*gamma) {
                    add_to(*gamma, sum_dy_xhat.clone(), grads);
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * spatial;
                            let (mu, is, g) = (mean[ch], invstd[ch], gv[ch]);
                            for sp in 0..spatial {
                                let gyv = gy[base + sp];
                                dx[base + sp] = if *train {
                                    let xhat = (xv[base + sp] - mu) * is;
                                    g * is
                                        * (gyv - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m)
                                } else {
                                    g * is * gyv
                                };
                            }
                        }
                    }
                    add_to(*x, dx, grads);
                }
            }
            Op::Reshape { x } => {
                add_to(*x, gy.to_vec(), grads);
            }
            Op::BroadcastHw { x, h, w } => {
                let hw = h * w;
                let src_len = self.value(*x).len();
                let mut dx = vec![0.0; src_len];
                for (i, d) in dx.iter_mut().enumerate() {
                    let blk = &gy[i * hw..(i + 1) * hw];
                    *d = blk.iter().sum();
                }
                add_to(*x, dx, grads);
            }
            Op::SumAll { x } => {
                let g = gy[0];
                add_to(*x, vec![g; self.value(*x).len()], grads);
            }
            Op::MeanAll { x } => {
                let len = self.value(*x).len();
                let g = gy[0] / len as f64;
                add_to(*x, vec![g; len], grads);
            }
            Op::Scale { x, c } => {
                add_to(*x, gy.iter().map(|&g| g * c).collect(), grads);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let dx: Vec<f64> = gy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > *lo && v < *hi { g } else { 0.0 })
                    .collect();
                add_to(*x, dx, grads);
            }
        }
    }
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn batch_stats(x: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * spatial;
            for sp in 0..spatial {
                mean[ch] += x[base + sp];
            }
        }
    }
    for mch in mean.iter_mut() {
        *mch /= m;
    }
    for bi in 0..n {
        for ch in 0..c {
            let base = (bi * c + ch) * spatial;
            let mu = mean[ch];
            for sp in 0..spatial {
                let d = x[base + sp] - mu;
                var[ch] += d * d;
            }
        }
    }
    for vch in var.iter_mut() {
        *vch /= m;
    }
    (mean, var)
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let offset = a.len() - b.len();
    b.iter()
        .enumerate()
        .all(|(i, &e)| e == a[offset + i] || e == 1)
}

/// Maps flat indices in the expanded (a-shaped) tensor back into `b`.
struct BroadcastMap {
    a_shape: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(a: &[usize], b: &[usize]) -> BroadcastMap {
        let offset = a.len() - b.len();
        let mut b_strides = vec![0usize; a.len()];
        let mut stride = 1usize;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                b_strides[offset + i] = stride;
            }
            stride *= b[i];
        }
        BroadcastMap {
            a_shape: a.to_vec(),
            b_strides,
        }
    }

    #[inline]
    fn source_index(&self, mut flat: usize) -> usize {
        let mut idx = 0usize;
        for d in (0..self.a_shape.len()).rev() {
            let coord = flat % self.a_shape[d];
            flat /= self.a_shape[d];
            idx += coord * self.b_strides[d];
        }
        idx
    }
}

// ── Convolution forward/backward built on im2col ────────────────────────

fn conv2d_forward(x: &[f64], k: &[f64], n: usize, c: usize, o: usize, g: &ConvGeom) -> Vec<f64> {
    use rayon::prelude::*;
    let in_sz = c * g.in_h * g.in_w;
    let out_sz = o * g.out_h * g.out_w;
    let cols_rows = c * g.kh * g.kw;
    let cols_w = g.out_h * g.out_w;
    let mut out = vec![0.0; n * out_sz];
    let run = |ni: usize, dst: &mut [f64]| {
        let cols = im2col(&x[ni * in_sz..(ni + 1) * in_sz], c, g);
        let res = matmul(k, &cols, o, cols_rows, cols_w);
        dst.copy_from_slice(&res);
    };
    if n > 1 && in_sz * o * g.kh * g.kw > 1 << 12 {
        out.par_chunks_mut(out_sz)
            .enumerate()
            .for_each(|(ni, dst)| run(ni, dst));
    } else {
        for (ni, dst) in out.chunks_mut(out_sz).enumerate() {
            run(ni, dst);
        }
    }
    out
}

fn conv2d_backward_input(
    gy: &[f64],
    k: &[f64],
    n: usize,
    c: usize,
    o: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    use rayon::prelude::*;
    let in_sz = c * g.in_h * g.in_w;
    let out_sz = o * g.out_h * g.out_w;
    let cols_rows = c * g.kh * g.kw;
    let cols_w = g.out_h * g.out_w;
    let mut dx = vec![0.0; n * in_sz];
    let run = |ni: usize, dst: &mut [f64]| {
        // K^T [C*kh*kw, O] * gy_n [O, H'W'] then fold columns back.
        let cols = matmul_atb(k, &gy[ni * out_sz..(ni + 1) * out_sz], o, cols_rows, cols_w);
        let img = col2im(&cols, c, g);
        dst.copy_from_slice(&img);
    };
    if n > 1 && in_sz * o * g.kh * g.kw > 1 << 12 {
        dx.par_chunks_mut(in_sz)
            .enumerate()
            .for_each(|(ni, dst)| run(ni, dst));
    } else {
        for (ni, dst) in dx.chunks_mut(in_sz).enumerate() {
            run(ni, dst);
        }
    }
    dx
}

fn conv2d_backward_kernel(
    gy: &[f64],
    x: &[f64],
    n: usize,
    c: usize,
    o: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    use rayon::prelude::*;
    let in_sz = c * g.in_h * g.in_w;
    let out_sz = o * g.out_h * g.out_w;
    let cols_rows = c * g.kh * g.kw;
    let cols_w = g.out_h * g.out_w;
    let per_sample = |ni: usize| -> Vec<f64> {
        let cols = im2col(&x[ni * in_sz..(ni + 1) * in_sz], c, g);
        // dK_n = gy_n [O, H'W'] * cols^T [H'W', C*kh*kw]
        matmul_abt(&gy[ni * out_sz..(ni + 1) * out_sz], &cols, o, cols_w, cols_rows)
    };
    // parallel per-sample contributions, summed in fixed sample order
    let contribs: Vec<Vec<f64>> = if n > 1 && in_sz * o * g.kh * g.kw > 1 << 12 {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };
    let mut dk = vec![0.0; o * cols_rows];
    for contrib in contribs {
        for (d, v) in dk.iter_mut().zip(&contrib) {
            *d += v;
        }
    }
    dk
}

fn conv_transpose2d_forward(
    x: &[f64],
    k: &[f64],
    n: usize,
    c: usize,
    o: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    use rayon::prelude::*;
    // x plays the role of a conv output with geometry g (conv maps the
    // produced image of extent in_h x in_w down to out_h x out_w == x's).
    let in_sz = c * g.out_h * g.out_w;
    let out_sz = o * g.in_h * g.in_w;
    let cols_rows = o * g.kh * g.kw;
    let cols_w = g.out_h * g.out_w;
    let mut out = vec![0.0; n * out_sz];
    let run = |ni: usize, dst: &mut [f64]| {
        let cols = matmul_atb(k, &x[ni * in_sz..(ni + 1) * in_sz], c, cols_rows, cols_w);
        let img = col2im(&cols, o, g);
        dst.copy_from_slice(&img);
    };
    if n > 1 && out_sz * c * g.kh * g.kw > 1 << 12 {
        out.par_chunks_mut(out_sz)
            .enumerate()
            .for_each(|(ni, dst)| run(ni, dst));
    } else {
        for (ni, dst) in out.chunks_mut(out_sz).enumerate() {
            run(ni, dst);
        }
    }
    out
}

fn conv_transpose2d_backward_kernel(
    gy: &[f64],
    x: &[f64],
    n: usize,
    c: usize,
    o: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    use rayon::prelude::*;
    let x_sz = c * g.out_h * g.out_w;
    let gy_sz = o * g.in_h * g.in_w;
    let cols_rows = o * g.kh * g.kw;
    let cols_w = g.out_h * g.out_w;
    let per_sample = |ni: usize| -> Vec<f64> {
        let cols = im2col(&gy[ni * gy_sz..(ni + 1) * gy_sz], o, g);
        // dK_n [C, O*kh*kw] = x_n [C, HW] * cols^T [HW, O*kh*kw]
        matmul_abt(&x[ni * x_sz..(ni + 1) * x_sz], &cols, c, cols_w, cols_rows)
    };
    let contribs: Vec<Vec<f64>> = if n > 1 && x_sz * o * g.kh * g.kw > 1 << 12 {
        (0..n).into_par_iter().map(per_sample).collect()
    } else {
        (0..n).map(per_sample).collect()
    };
    let mut dk = vec![0.0; c * cols_rows];
    for contrib in contribs {
        for (d, v) in dk.iter_mut().zip(&contrib) {
            *d += v;
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn new_tensor_validates_count() {
        let mut tape = Tape::new();
        assert!(tape.new_tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false).is_ok());
        assert!(tape.new_tensor(vec![3], vec![1.0, 2.0], false).is_err());
        assert!(tape.new_tensor(vec![0], vec![], false).is_err());
    }

    #[test]
    fn grad_buffer_appears_after_backward() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1], vec![0.0], true).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i2 = tape.new_tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let b = tape.new_tensor(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0], false).unwrap();
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 7.0, 8.0]);
        let a = tape.new_tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let d = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(d), &[19.0, 22.0, 43.0, 50.0]);
        let bad = tape.new_tensor(vec![3, 2], vec![0.0; 6], false).unwrap();
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn conv2d_window_sum_and_shapes() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let k = tape.new_tensor(vec![1, 1, 2, 2], vec![1.0; 4], false).unwrap();
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[4.0; 4]);

        let x4 = tape.new_tensor(vec![1, 1, 4, 4], (0..16).map(|i| i as f64).collect(), false).unwrap();
        let y2 = tape.conv2d(x4, k, 2, 0).unwrap();
        assert_eq!(tape.shape(y2), &[1, 1, 2, 2]);

        // inexact output extent
        let x5 = tape.new_tensor(vec![1, 1, 5, 5], vec![0.0; 25], false).unwrap();
        assert!(tape.conv2d(x5, k, 2, 0).is_err());
    }

    #[test]
    fn conv_transpose_single_tap_and_shape() {
        let mut tape = Tape::new();
        let v = 3.5;
        let x = tape.new_tensor(vec![1, 1, 1, 1], vec![v], false).unwrap();
        let kvals = vec![0.5, -1.0, 2.0, 0.25];
        let k = tape.new_tensor(vec![1, 1, 2, 2], kvals.clone(), false).unwrap();
        let y = tape.conv_transpose2d(x, k, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        let want: Vec<f64> = kvals.iter().map(|&kv| kv * v).collect();
        assert_eq!(tape.value(y), &want[..]);

        let xin = tape.new_tensor(vec![1, 2, 4, 4], vec![0.1; 32], false).unwrap();
        let kk = tape.new_tensor(vec![2, 3, 4, 4], vec![0.01; 96], false).unwrap();
        let yy = tape.conv_transpose2d(xin, kk, 2, 1).unwrap();
        assert_eq!(tape.shape(yy), &[1, 3, 8, 8]);
    }

    #[test]
    fn unary_analytic_values() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![3], vec![0.0, -1.0, 2.0], false).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert!(close(tape.value(s)[0], 0.5, 1e-15));
        let t = tape.tanh(x).unwrap();
        assert!(close(tape.value(t)[0], 0.0, 1e-15));
        let l = tape.leaky_relu(x, 0.2).unwrap();
        assert!(close(tape.value(l)[1], -0.2, 1e-15));
        let neg = tape.new_tensor(vec![1], vec![-3.0], false).unwrap();
        assert!(tape.log(neg).is_err());
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1], vec![0.0], true).unwrap();
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(close(grads.get(x).unwrap().data()[0], 0.25, 1e-15));
    }

    #[test]
    fn binary_add_and_row_broadcast() {
        let mut tape = Tape::new();
        let a = tape.new_tensor(vec![2], vec![1.0, 2.0], false).unwrap();
        let b = tape.new_tensor(vec![2], vec![3.0, 4.0], false).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);

        let m = tape.new_tensor(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], false).unwrap();
        let bias = tape.new_tensor(vec![3], vec![10.0, 20.0, 30.0], false).unwrap();
        let r = tape.add(m, bias).unwrap();
        assert_eq!(tape.value(r), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);

        let bad = tape.new_tensor(vec![4], vec![0.0; 4], false).unwrap();
        assert!(tape.add(m, bad).is_err());
    }

    #[test]
    fn broadcast_gradient_sums_over_rows() {
        let mut tape = Tape::new();
        let m = tape.new_tensor(vec![2, 3], vec![1.0; 6], false).unwrap();
        let bias = tape.new_tensor(vec![3], vec![0.0; 3], true).unwrap();
        let r = tape.add(m, bias).unwrap();
        let s = tape.sum_all(r).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(bias).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_shapes_and_gradient() {
        let mut tape = Tape::new();
        let a = tape.new_tensor(vec![1, 2, 2, 2], vec![1.0; 8], true).unwrap();
        let b = tape.new_tensor(vec![1, 3, 2, 2], vec![2.0; 12], true).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 2, 2]);
        let s = tape.sum_all(c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 8]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0; 12]);

        let bad = tape.new_tensor(vec![1, 2, 3, 2], vec![0.0; 12], false).unwrap();
        assert!(tape.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn concat_then_slice_returns_originals() {
        let mut tape = Tape::new();
        let a_data = vec![1.0, 2.0, 3.0, 4.0];
        let b_data = vec![5.0, 6.0];
        let a = tape.new_tensor(vec![2, 2], a_data.clone(), false).unwrap();
        let b = tape.new_tensor(vec![2, 1], b_data.clone(), false).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        let cv = tape.value(c);
        // rows are [1 2 | 5] and [3 4 | 6]
        assert_eq!(cv, &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let mut tape = Tape::new();
        let x = tape
            .new_tensor(vec![4, 3], (0..12).map(|i| i as f64).collect(), false)
            .unwrap();
        let gamma = tape.new_tensor(vec![3], vec![0.0; 3], false).unwrap();
        let beta = tape.new_tensor(vec![3], vec![7.0; 3], false).unwrap();
        let y = tape
            .batch_norm(x, gamma, beta, BnMode::Train { running: None, momentum: 0.1 }, 1e-5)
            .unwrap();
        assert!(tape.value(y).iter().all(|&v| close(v, 7.0, 1e-12)));
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        // zero-mean unit-variance channel with gamma=1 beta=0 passes through
        // up to the epsilon in the denominator.
        let mut tape = Tape::new();
        let vals = vec![-1.0, 1.0, -1.0, 1.0]; // mean 0, var 1
        let x = tape.new_tensor(vec![4, 1], vals.clone(), false).unwrap();
        let gamma = tape.new_tensor(vec![1], vec![1.0], false).unwrap();
        let beta = tape.new_tensor(vec![1], vec![0.0], false).unwrap();
        let eps = 1e-8;
        let y = tape
            .batch_norm(x, gamma, beta, BnMode::Train { running: None, momentum: 0.1 }, eps)
            .unwrap();
        for (got, want) in tape.value(y).iter().zip(&vals) {
            assert!(close(*got, *want, 1e-7));
        }
    }

    #[test]
    fn batch_norm_rejects_small_batch_and_bad_epsilon() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1, 3], vec![0.0; 3], false).unwrap();
        let gamma = tape.new_tensor(vec![3], vec![1.0; 3], false).unwrap();
        let beta = tape.new_tensor(vec![3], vec![0.0; 3], false).unwrap();
        assert!(tape
            .batch_norm(x, gamma, beta, BnMode::Train { running: None, momentum: 0.1 }, 1e-5)
            .is_err());
        let x2 = tape.new_tensor(vec![2, 3], vec![0.5; 6], false).unwrap();
        assert!(tape
            .batch_norm(x2, gamma, beta, BnMode::Train { running: None, momentum: 0.1 }, 0.0)
            .is_err());
    }

    #[test]
    fn backward_square_and_accumulation() {
        // y = x * x at x = 3 -> dy/dx = 6
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1], vec![3.0], true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(close(grads.get(x).unwrap().data()[0], 6.0, 1e-12));

        // d(x + x)/dx = 2
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1], vec![1.5], true).unwrap();
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(close(grads.get(x).unwrap().data()[0], 2.0, 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(tape.backward(x).is_err());
        let c = tape.new_tensor(vec![1], vec![1.0], false).unwrap();
        let y = tape.sigmoid(c).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn broadcast_hw_replicates_and_sums_back() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1, 2], vec![3.0, -1.0], true).unwrap();
        let y = tape.broadcast_hw(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert_eq!(tape.value(y), &[3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn clamp_masks_gradient_outside_bounds() {
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![3], vec![-2.0, 0.5, 2.0], true).unwrap();
        let y = tape.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.5, 1.0]);
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
