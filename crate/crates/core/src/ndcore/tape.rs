//! Dynamically recorded operation tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. [`Tape::gradients`] walks the nodes in reverse and applies each
//! operation's vector-Jacobian product. Nodes only receive gradient buffers
//! when some ancestor is an input or a parameter.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ndcore::kernels::{self, ConvGeom};
use crate::ndcore::tensor::{numel, strides};
use crate::ndcore::Tensor;
use crate::network::params::{ParamId, ParameterStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Square,
    Tanh,
    Sigmoid,
    Silu,
    /// tanh approximation
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Square => x * x,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            UnaryOp::Gelu => {
                let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + th)
                    + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BiasAdd {
        x: Var,
        b: Var,
        split: (usize, usize, usize),
    },
    BiasMul {
        x: Var,
        b: Var,
        split: (usize, usize, usize),
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    },
    Conv3d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    /// `y[o] = x[map[o]]`
    Gather {
        x: Var,
        map: Arc<Vec<usize>>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        len: usize,
    },
    Softmax {
        x: Var,
        split: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        split: (usize, usize, usize),
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per execution context; not shared.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every recorded node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (its gradient is reported by [`Tape::gradients`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The current value of a stored parameter; recorded once per tape.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let y = self.value(x).map(|v| op.apply(v));
        let rg = self.rg(x);
        self.push(y, Op::Unary(op, x), rg)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let f = match op {
            BinaryOp::Add => |a: f64, b: f64| a + b,
            BinaryOp::Sub => |a: f64, b: f64| a - b,
            BinaryOp::Mul => |a: f64, b: f64| a * b,
            BinaryOp::Div => |a: f64, b: f64| a / b,
        };
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op_name(op), va.shape(), vb.shape()));
        }
        let y = va.zip_map(vb, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v + k);
        let rg = self.rg(x);
        self.push(y, Op::AddScalar(x), rg)
    }

    fn bias_split(&self, x: Var, b: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if axis + bs.len() > xs.len() || xs[axis..axis + bs.len()] != *bs {
            return Err(Error::shape(op, xs, bs));
        }
        Ok((
            numel(&xs[..axis]),
            numel(bs),
            numel(&xs[axis + bs.len()..]),
        ))
    }

    /// `x + b`, with `b`'s shape matching `x`'s axes starting at `axis`.
    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let split @ (outer, mid, inner) = self.bias_split(x, b, axis, "bias_add")?;
        let mut y = self.value(x).clone();
        let bv = self.value(b).data();
        for o in 0..outer {
            for m in 0..mid {
                let row = &mut y.data_mut()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                row.iter_mut().for_each(|v| *v += bv[m]);
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(y, Op::BiasAdd { x, b, split }, rg))
    }

    /// `x * b`, broadcast like [`Tape::bias_add`].
    pub fn bias_mul(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let split @ (outer, mid, inner) = self.bias_split(x, b, axis, "bias_mul")?;
        let mut y = self.value(x).clone();
        let bv = self.value(b).data();
        for o in 0..outer {
            for m in 0..mid {
                let row = &mut y.data_mut()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                row.iter_mut().for_each(|v| *v *= bv[m]);
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(y, Op::BiasMul { x, b, split }, rg))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared_b = sb.len() == 2;
        let batch_dims = &sa[..sa.len() - 2];
        if k != kb || (!shared_b && sb[..sb.len() - 2] != *batch_dims) {
            return Err(Error::shape(op, &sa, &sb));
        }
        let batch = numel(batch_dims);
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        let mut y = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let bstr = if trans_b { (1, k) } else { (n, 1) };
        if shared_b {
            kernels::gemm(batch * m, k, n, va, (k, 1), vb, bstr, 0.0, &mut y);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..],
                    (k, 1),
                    &vb[i * k * n..],
                    bstr,
                    0.0,
                    &mut y[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&out_shape, y)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
            rg,
        ))
    }

    /// Batched `a·b`. `b` is either `[k, n]` (shared) or has `a`'s batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x·w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let axis = self.shape(y).len() - 1;
        self.bias_add(y, b, axis)
    }

    /// 3D convolution. `x` is `[C, X, Y, Z]` or `[B, C, X, Y, Z]`, `w` is
    /// `[Cout, C, kx, ky, kz]`. Padding is symmetric zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let batched = match sx.len() {
            4 => false,
            5 => true,
            _ => return Err(Error::shape("conv3d", &sx, &sw)),
        };
        let (batch, rest) = if batched { (sx[0], &sx[1..]) } else { (1, &sx[..]) };
        if sw.len() != 5 || sw[1] != rest[0] {
            return Err(Error::shape("conv3d", &sx, &sw));
        }
        let input = [rest[1], rest[2], rest[3]];
        let kernel = [sw[2], sw[3], sw[4]];
        let geom = ConvGeom::new(rest[0], sw[0], input, kernel, stride, pad).ok_or_else(|| {
            Error::invalid(
                "conv3d",
                format!("kernel {kernel:?} (stride {stride:?}, pad {pad:?}) does not fit input {input:?}"),
            )
        })?;
        let y = kernels::conv3d_forward(&geom, batch, self.value(x).data(), self.value(w).data());
        let mut shape = if batched { vec![batch] } else { vec![] };
        shape.push(geom.cout);
        shape.extend(geom.output);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Conv3d { x, w, geom, batch }, rg))
    }

    /// 4D convolution `[L, C, X, Y, Z] * [Cout, C, l, kx, ky, kz]`, computed as
    /// one 3D convolution per temporal slice. Only `l = 1` with temporal
    /// stride 1 is supported.
    pub fn conv4d(&mut self, x: Var, w: Var, stride: [usize; 4]) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 6 || self.shape(x).len() != 5 {
            return Err(Error::shape("conv4d", self.shape(x), &sw));
        }
        if sw[2] != 1 || stride[0] != 1 {
            return Err(Error::invalid(
                "conv4d",
                "only a temporal window of 1 with temporal stride 1 is supported",
            ));
        }
        let w3 = self.reshape(w, &[sw[0], sw[1], sw[3], sw[4], sw[5]])?;
        self.conv3d(x, w3, [stride[1], stride[2], stride[3]], [0; 3])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let y = kernels::permute(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, y)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    fn gather(&mut self, x: Var, shape: &[usize], map: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let y: Vec<f64> = map.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::Gather { x, map: Arc::new(map) }, rg))
    }

    /// Broadcast extent-1 axes of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != shape.len() || sx.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::shape("expand", &sx, shape));
        }
        let st = strides(&sx);
        let eff: Vec<usize> = sx.iter().zip(&st).map(|(&e, &s)| if e == 1 { 0 } else { s }).collect();
        let total = numel(shape);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
            for a in (0..shape.len()).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        self.gather(x, shape, map)
    }

    /// Nearest-neighbour upsampling by an integer factor per axis.
    pub fn upsample(&mut self, x: Var, factors: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if factors.len() != sx.len() || factors.contains(&0) {
            return Err(Error::invalid("upsample", format!("factors {factors:?} for shape {sx:?}")));
        }
        let out: Vec<usize> = sx.iter().zip(factors).map(|(a, b)| a * b).collect();
        let map = kernels::upsample_index(&sx, factors);
        self.gather(x, &out, map)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut chunks = Vec::with_capacity(xs.len());
        let mut total_axis = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            chunks.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let row: usize = chunks.iter().sum();
        let mut y = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&x, &c) in xs.iter().zip(&chunks) {
                y.extend_from_slice(&self.value(x).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Concat { xs: xs.to_vec(), outer, chunks }, rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::invalid("narrow", format!("{start}+{len} on axis {axis} of {sx:?}")));
        }
        let outer = numel(&sx[..axis]);
        let inner = numel(&sx[axis + 1..]);
        let in_chunk = sx[axis] * inner;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&xv[o * in_chunk + start * inner..o * in_chunk + (start + len) * inner]);
        }
        let mut shape = sx.clone();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::Narrow { x, outer, in_chunk, offset: start * inner, len: len * inner },
            rg,
        ))
    }

    fn axis_check(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::invalid(op, format!("axis {axis} for shape {s:?}")));
        }
        Ok(kernels::axis_split(s, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis_check(x, axis, "softmax")?;
        let y = kernels::softmax(self.value(x).data(), split);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax { x, split }, rg))
    }

    /// Normalize to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = self.axis_check(x, axis, "layer_norm")?;
        let (y, inv_std) = kernels::layer_norm(self.value(x).data(), split, LN_EPS);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, y)?, Op::LayerNorm { x, split, inv_std }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Reverse pass that also adds every parameter gradient into `store`.
    /// Repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                match grads.wrt(Var(i)) {
                    Some(g) => store.accumulate_grad(id, g.data())?,
                    None => store.accumulate_grad(id, &vec![0.0; node.value.numel()])?,
                }
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        // Gradient buffer of `v`, created on first use; `None` if `v` needs none.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    Some(
                        grads[v.0]
                            .get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Unary(op, x) => {
                let (xv, yv) = (val(*x), node.value.data());
                if let Some(dx) = slot!(*x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * op.derivative(xv[i], yv[i]);
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(da) = slot!(*a) {
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => add_into(da, g),
                        BinaryOp::Mul => (0..g.len()).for_each(|i| da[i] += g[i] * bv[i]),
                        BinaryOp::Div => (0..g.len()).for_each(|i| da[i] += g[i] / bv[i]),
                    }
                }
                if let Some(db) = slot!(*b) {
                    match op {
                        BinaryOp::Add => add_into(db, g),
                        BinaryOp::Sub => (0..g.len()).for_each(|i| db[i] -= g[i]),
                        BinaryOp::Mul => (0..g.len()).for_each(|i| db[i] += g[i] * av[i]),
                        BinaryOp::Div => {
                            (0..g.len()).for_each(|i| db[i] -= g[i] * av[i] / (bv[i] * bv[i]))
                        }
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(dx) = slot!(*x) {
                    (0..g.len()).for_each(|i| dx[i] += k * g[i]);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = slot!(*x) {
                    add_into(dx, g);
                }
            }
            Op::BiasAdd { x, b, split: (outer, mid, inner) } => {
                if let Some(dx) = slot!(*x) {
                    add_into(dx, g);
                }
                if let Some(db) = slot!(*b) {
                    for o in 0..*outer {
                        for m in 0..*mid {
                            let base = (o * mid + m) * inner;
                            db[m] += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BiasMul { x, b, split: (outer, mid, inner) } => {
                let (xv, bv) = (val(*x), val(*b));
                if let Some(dx) = slot!(*x) {
                    for o in 0..*outer {
                        for m in 0..*mid {
                            let base = (o * mid + m) * inner;
                            for i in base..base + inner {
                                dx[i] += g[i] * bv[m];
                            }
                        }
                    }
                }
                if let Some(db) = slot!(*b) {
                    for o in 0..*outer {
                        for m in 0..*mid {
                            let base = (o * mid + m) * inner;
                            db[m] += (base..base + inner).map(|i| g[i] * xv[i]).sum::<f64>();
                        }
                    }
                }
            }
            &Op::MatMul { a, b, batch, m, k, n, trans_b, shared_b } => {
                let (av, bv) = (val(a), val(b));
                if let Some(da) = slot!(a) {
                    // dA = dY · Bᵀ
                    let bt = if trans_b { (k, 1) } else { (1, n) };
                    if shared_b {
                        kernels::gemm(batch * m, n, k, g, (n, 1), bv, bt, 1.0, da);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(m, n, k, &g[i * m * n..], (n, 1), &bv[i * k * n..], bt, 1.0, &mut da[i * m * k..(i + 1) * m * k]);
                        }
                    }
                }
                if let Some(db) = slot!(b) {
                    let rows = if shared_b { batch * m } else { m };
                    let reps = if shared_b { 1 } else { batch };
                    for i in 0..reps {
                        let (ga, aa) = (&g[i * m * n..], &av[i * m * k..]);
                        let dbi = if shared_b { &mut db[..] } else { &mut db[i * k * n..(i + 1) * k * n] };
                        if trans_b {
                            // dB[n,k] = dYᵀ · A
                            kernels::gemm(n, rows, k, ga, (1, n), aa, (k, 1), 1.0, dbi);
                        } else {
                            // dB[k,n] = Aᵀ · dY
                            kernels::gemm(k, rows, n, aa, (1, k), ga, (n, 1), 1.0, dbi);
                        }
                    }
                }
            }
            Op::Conv3d { x, w, geom, batch } => {
                let (xv, wv) = (val(*x), val(*w));
                let need_dx = self.nodes[x.0].requires_grad;
                let need_dw = self.nodes[w.0].requires_grad;
                // two disjoint slots; take dw out temporarily
                let mut dw_buf = need_dw.then(|| {
                    grads[w.0].take().unwrap_or_else(|| vec![0.0; wv.len()])
                });
                let dx = if need_dx { slot!(*x) } else { None };
                kernels::conv3d_backward(geom, *batch, xv, wv, g, dx, dw_buf.as_deref_mut());
                if let Some(buf) = dw_buf {
                    grads[w.0] = Some(buf);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(dx) = slot!(*x) {
                    let back = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                    add_into(dx, &back);
                }
            }
            Op::Gather { x, map } => {
                if let Some(dx) = slot!(*x) {
                    for (o, &src) in map.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::Concat { xs, outer, chunks } => {
                let row: usize = chunks.iter().sum();
                let mut off = 0;
                for (&x, &c) in xs.iter().zip(chunks) {
                    if let Some(dx) = slot!(x) {
                        for o in 0..*outer {
                            add_into(&mut dx[o * c..(o + 1) * c], &g[o * row + off..o * row + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::Narrow { x, outer, in_chunk, offset, len } => {
                if let Some(dx) = slot!(*x) {
                    for o in 0..*outer {
                        let at = o * in_chunk + offset;
                        add_into(&mut dx[at..at + len], &g[o * len..(o + 1) * len]);
                    }
                }
            }
            Op::Softmax { x, split } => {
                if let Some(dx) = slot!(*x) {
                    kernels::softmax_backward(node.value.data(), g, *split, dx);
                }
            }
            Op::LayerNorm { x, split, inv_std } => {
                if let Some(dx) = slot!(*x) {
                    kernels::layer_norm_backward(node.value.data(), inv_std, g, *split, dx);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = slot!(*x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}
