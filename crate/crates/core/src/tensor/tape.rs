use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use super::conv::ConvGeom;
use super::kernels::{self, split_axis, strides};
use super::sample;
use super::{ParameterStore, Tensor};
use crate::error::{shape_err, Error, Result};

thread_local! {
    static MATMUL_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-adds executed by [`Tape::matmul`] on this thread since the last reset.
pub fn matmul_macs() -> u64 {
    MATMUL_MACS.with(Cell::get)
}

pub fn reset_matmul_macs() {
    MATMUL_MACS.with(|c| c.set(0));
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in gather index maps: the output element is zero.
pub(crate) const ZERO_SLOT: usize = usize::MAX;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    BiasLast(Var, Var),
    BiasChannel(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        dims: [usize; 4],
    },
    Softmax {
        x: Var,
        dims: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Reshape(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Conv3d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    GridSample {
        x: Var,
        coords: Var,
        groups: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Sum(Var),
    SumLast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::BiasLast(..) => "bias_last",
            Op::BiasChannel(..) => "bias_channel",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Conv3d { .. } => "conv3d",
            Op::GridSample { .. } => "grid_sample",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::SumLast(..) => "sum_last",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Inputs always precede the ops that use them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    nan_guard: bool,
}

/// Gradients of leaf values after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameter name to tape handle, produced by [`Tape::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.map.get(name).copied()
    }

    /// Like [`Bindings::get`] but reports a missing parameter as an error.
    pub fn var(&self, name: &str) -> Result<Var> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn same_shape(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{op}: shapes {a:?} and {b:?} differ"));
    }
    Ok(())
}

fn acc(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables the per-op NaN/Inf check.
    pub fn with_nan_guard(mut self, on: bool) -> Self {
        self.nan_guard = on;
        self
    }

    pub fn set_nan_guard(&mut self, on: bool) {
        self.nan_guard = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        if self.nan_guard && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::AddScalar(a) | Op::Gelu(a) | Op::LeakyRelu(a, _) => vec![*a],
            Op::Reshape(a) | Op::Sum(a) | Op::SumLast(a) => vec![*a],
            Op::BiasLast(a, b) | Op::BiasChannel(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Softmax { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv3d { x, k, .. } => vec![*x, *k],
            Op::GridSample { x, coords, .. } => vec![*x, *coords],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    /// Records a tensor as a leaf. It receives a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Records every parameter of `store` as a trainable leaf.
    pub fn bind(&mut self, store: &ParameterStore) -> Bindings {
        let mut map = HashMap::with_capacity(store.len());
        for (name, t) in store.iter() {
            let mut t = t.clone();
            t.grad = None;
            t.requires_grad = true;
            map.insert(name.to_string(), self.leaf(t));
        }
        Bindings { map }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].data.clone()).expect("recorded nodes are well-formed")
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        same_shape(self.shape(a), self.shape(b), name)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(s, d, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(s, d, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(s, d, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(s, d, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let d = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), d, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let d = self.value(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), d, Op::AddScalar(a))
    }

    /// `x[..., C] + b[C]`.
    pub fn bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(b) != [c] {
            return Err(shape_err!("bias {:?} does not match last extent {c}", self.shape(b)));
        }
        let bv = self.value(b);
        let d = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        self.push(self.shape(x).to_vec(), d, Op::BiasLast(x, b))
    }

    /// `x[C, ...] + b[C]`.
    pub fn bias_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(b) != [c] {
            return Err(shape_err!("bias {:?} does not match leading extent {c}", self.shape(b)));
        }
        let inner = self.value(x).len() / c;
        let bv = self.value(b);
        let d = self
            .value(x)
            .chunks(inner)
            .zip(bv)
            .flat_map(|(row, bb)| row.iter().map(move |x| x + bb))
            .collect();
        self.push(self.shape(x).to_vec(), d, Op::BiasChannel(x, b))
    }

    /// Batched matrix product `[.., M, K] × [.., K, N]` with equal batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(shape_err!("matmul: incompatible ranks {sa:?} x {sb:?}"));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 || sa[..r - 2] != sb[..r - 2] {
            return Err(shape_err!("matmul: {sa:?} x {sb:?}"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, batch, m, k, n);
        MATMUL_MACS.with(|c| c.set(c.get() + (batch * m * k * n) as u64));
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                dims: [batch, m, k, n],
            },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push(
            shape,
            out,
            Op::Softmax {
                x,
                dims: (outer, len, inner),
            },
        )
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "layernorm: affine {:?}/{:?} vs channels {c}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(x).to_vec(), d, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let d = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(self.shape(x).to_vec(), d, Op::LeakyRelu(x, slope))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let d = self.value(x).to_vec();
        self.push(shape.to_vec(), d, Op::Reshape(x))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i]` is [`ZERO_SLOT`].
    pub(crate) fn gather(&mut self, x: Var, shape: Vec<usize>, index: Rc<[usize]>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err!("gather: {} indices for shape {shape:?}", index.len()));
        }
        let xv = self.value(x);
        if let Some(bad) = index.iter().find(|&&i| i != ZERO_SLOT && i >= xv.len()) {
            return Err(shape_err!("gather: index {bad} out of range {}", xv.len()));
        }
        let d = index
            .iter()
            .map(|&i| if i == ZERO_SLOT { 0.0 } else { xv[i] })
            .collect();
        self.push(shape, d, Op::Gather { x, index })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() || {
            let mut p = perm.to_vec();
            p.sort_unstable();
            p != (0..shape.len()).collect::<Vec<_>>()
        } {
            return Err(shape_err!("invalid permutation {perm:?} for rank {}", shape.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let n = self.value(x).len();
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(perm.iter().zip(&idx).map(|(&p, &i)| i * in_strides[p]).sum());
            for a in (0..idx.len()).rev() {
                idx[a] += 1;
                if idx[a] < out_shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        self.gather(x, out_shape, index.into())
    }

    /// Contiguous sub-range `[start, start+len)` of one axis.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err!("slice {start}+{len} exceeds extent {}", shape[axis]));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                index.extend((0..inner).map(|i| (o * ext + j) * inner + i));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, out_shape, index.into())
    }

    /// Direct 3D cross-correlation of `x[Cin,H,W,D]` with `k[Cout,Cin/g,k,k,k]`.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad, groups)?;
        let out = geom.forward(self.value(x), self.value(k));
        self.push(geom.out_shape().to_vec(), out, Op::Conv3d { x, k, geom })
    }

    /// Trilinear sampling of a channel-last field `x[H,W,D,C]` at continuous
    /// lattice coordinates `coords[.., 3·groups]`.
    ///
    /// Channel block `g` of size `C/groups` is sampled at coordinate triple
    /// `g`. Out-of-range coordinates clamp to the border.
    pub fn grid_sample(&mut self, x: Var, coords: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(coords).to_vec();
        if xs.len() != 4 {
            return Err(shape_err!("grid_sample field must be [H,W,D,C], got {xs:?}"));
        }
        if groups == 0 || !xs[3].is_multiple_of(groups) {
            return Err(shape_err!(
                "grid_sample: {} channels not divisible into {groups} groups",
                xs[3]
            ));
        }
        if cs.last() != Some(&(3 * groups)) {
            return Err(shape_err!(
                "grid_sample coords last extent must be {}, got {cs:?}",
                3 * groups
            ));
        }
        let out = sample::grid_sample_forward(self.value(x), [xs[0], xs[1], xs[2]], xs[3], self.value(coords), groups);
        let mut shape = cs[..cs.len() - 1].to_vec();
        shape.push(xs[3]);
        self.push(shape, out, Op::GridSample { x, coords, groups })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                axis,
                rank: first.len(),
            });
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        let mut chunks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis away.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let d = self.value(x).chunks(c).map(|r| r.iter().sum()).collect();
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        self.push(out_shape, d, Op::SumLast(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", ln.shape));
        }
        if !ln.requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        // Only leaf gradients survive the sweep.
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].data.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = acc(&mut grads[v.0], len(v));
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let d = acc(&mut grads[a.0], len(*a));
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*b) {
                    let d = acc(&mut grads[b.0], len(*b));
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = acc(&mut grads[a.0], av.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let d = acc(&mut grads[b.0], bv.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = acc(&mut grads[a.0], av.len());
                    for i in 0..g.len() {
                        d[i] += g[i] / bv[i];
                    }
                }
                if self.wants(*b) {
                    let d = acc(&mut grads[b.0], bv.len());
                    for i in 0..g.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(a, c) => {
                let d = acc(&mut grads[a.0], len(*a));
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let d = acc(&mut grads[a.0], len(*a));
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::BiasLast(x, b) => {
                if self.wants(*x) {
                    let d = acc(&mut grads[x.0], len(*x));
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if self.wants(*b) {
                    let c = len(*b);
                    let d = acc(&mut grads[b.0], c);
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::BiasChannel(x, b) => {
                if self.wants(*x) {
                    let d = acc(&mut grads[x.0], len(*x));
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if self.wants(*b) {
                    let c = len(*b);
                    let inner = g.len() / c;
                    let d = acc(&mut grads[b.0], c);
                    for (j, row) in g.chunks(inner).enumerate() {
                        d[j] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                dims: [batch, m, k, n],
            } => {
                if self.wants(*a) {
                    let d = acc(&mut grads[a.0], len(*a));
                    kernels::matmul_grad_a(g, self.value(*b), d, *batch, *m, *k, *n);
                }
                if self.wants(*b) {
                    let d = acc(&mut grads[b.0], len(*b));
                    kernels::matmul_grad_b(self.value(*a), g, d, *batch, *m, *k, *n);
                }
            }
            Op::Softmax {
                x,
                dims: (outer, l, inner),
            } => {
                let y = &node.data;
                let d = acc(&mut grads[x.0], y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * l + j) * inner + i;
                        let dot: f64 = (0..*l).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*l {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = len(*gamma);
                let gv = self.value(*gamma);
                if self.wants(*gamma) {
                    let d = acc(&mut grads[gamma.0], c);
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += row[j] * hrow[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let d = acc(&mut grads[beta.0], c);
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
                if self.wants(*x) {
                    let d = acc(&mut grads[x.0], xhat.len());
                    let cf = c as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            d[r * c + j] += is * (dh - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = acc(&mut grads[x.0], xv.len());
                for i in 0..g.len() {
                    d[i] += g[i] * kernels::gelu_grad(xv[i]);
                }
            }
            Op::LeakyRelu(x, s) => {
                let xv = self.value(*x);
                let d = acc(&mut grads[x.0], xv.len());
                for i in 0..g.len() {
                    d[i] += if xv[i] > 0.0 { g[i] } else { s * g[i] };
                }
            }
            Op::Gather { x, index } => {
                let d = acc(&mut grads[x.0], len(*x));
                for (gv, &i) in g.iter().zip(index.iter()) {
                    if i != ZERO_SLOT {
                        d[i] += gv;
                    }
                }
            }
            Op::Conv3d { x, k, geom } => {
                if self.wants(*x) {
                    let d = acc(&mut grads[x.0], len(*x));
                    geom.backward_input(g, self.value(*k), d);
                }
                if self.wants(*k) {
                    let d = acc(&mut grads[k.0], len(*k));
                    geom.backward_kernel(g, self.value(*x), d);
                }
            }
            Op::GridSample { x, coords, groups } => {
                let xs = &self.nodes[x.0].shape;
                let ext = [xs[0], xs[1], xs[2]];
                let ch = xs[3];
                let wx = self.wants(*x);
                let wc = self.wants(*coords);
                let mut gx = wx.then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len(*x)]));
                let mut gc = wc.then(|| grads[coords.0].take().unwrap_or_else(|| vec![0.0; len(*coords)]));
                sample::grid_sample_backward(
                    self.value(*x),
                    ext,
                    ch,
                    self.value(*coords),
                    *groups,
                    g,
                    gx.as_deref_mut(),
                    gc.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gc {
                    grads[coords.0] = Some(v);
                }
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut off = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if self.wants(v) {
                        let d = acc(&mut grads[v.0], outer * c);
                        for o in 0..*outer {
                            let src = &g[o * total + off..o * total + off + c];
                            d[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(p, q)| *p += q);
                        }
                    }
                    off += c;
                }
            }
            Op::Sum(x) => {
                let d = acc(&mut grads[x.0], len(*x));
                d.iter_mut().for_each(|p| *p += g[0]);
            }
            Op::SumLast(x) => {
                let n = len(*x);
                let c = n / g.len();
                let d = acc(&mut grads[x.0], n);
                for (row, gv) in d.chunks_mut(c).zip(g) {
                    row.iter_mut().for_each(|p| *p += gv);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_two_by_two() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tp.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tp = Tape::new();
        let i = tp.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tp.constant(t(&[2, 2], &[0.3, -1.5, 2.0, 7.0]));
        let c = tp.matmul(i, x).unwrap();
        assert_eq!(tp.value(c), tp.value(x));
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[4, 5]));
        assert!(matches!(tp.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tp.softmax(x, 0).unwrap();
        for v in tp.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tp.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tp.softmax(x, 0).unwrap();
        assert_eq!(tp.value(y), &[0.5, 0.5]);
        let x = tp.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tp.softmax(x, 0).unwrap();
        assert!((tp.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((tp.value(y)[1] - 0.75).abs() < 1e-15);
        assert!(matches!(tp.softmax(x, 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn layernorm_cases() {
        let mut tp = Tape::new();
        let g1 = tp.constant(t(&[2], &[1.0, 1.0]));
        let b0 = tp.constant(t(&[2], &[0.0, 0.0]));
        let x = tp.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = tp.layernorm(x, g1, b0, 1e-5).unwrap();
        assert_eq!(tp.value(y), &[0.0, 0.0]);
        let x = tp.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tp.layernorm(x, g1, b0, 1e-14).unwrap();
        assert!((tp.value(y)[0] + 1.0).abs() < 1e-12);
        assert!((tp.value(y)[1] - 1.0).abs() < 1e-12);
        let g0 = tp.constant(t(&[2], &[0.0, 0.0]));
        let b7 = tp.constant(t(&[2], &[7.0, 7.0]));
        let y = tp.layernorm(x, g0, b7, 1e-5).unwrap();
        assert_eq!(tp.value(y), &[7.0, 7.0]);
        let g3 = tp.constant(Tensor::zeros(&[3]));
        assert!(tp.layernorm(x, g3, b7, 1e-5).is_err());
    }

    #[test]
    fn conv_identity_and_volume_sum() {
        let mut tp = Tape::new();
        let data: Vec<f64> = (0..27).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tp.constant(t(&[1, 3, 3, 3], &data));
        let k = tp.constant(t(&[1, 1, 1, 1, 1], &[1.0]));
        let y = tp.conv3d(x, k, 1, 0, 1).unwrap();
        assert_eq!(tp.value(y), &data[..]);
        let ones = tp.constant(Tensor::full(&[1, 3, 3, 3], 1.0));
        let k = tp.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let y = tp.conv3d(ones, k, 1, 1, 1).unwrap();
        assert_eq!(tp.value(y)[13], 27.0);
        let x4 = tp.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let k = tp.constant(Tensor::zeros(&[3, 1, 1, 1, 1]));
        assert!(matches!(tp.conv3d(x4, k, 1, 0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn grid_sample_cases() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2, 1, 1, 1], &[0.0, 2.0]));
        let c = tp.constant(t(&[1, 3], &[0.5, 0.0, 0.0]));
        let y = tp.grid_sample(x, c, 1).unwrap();
        assert_eq!(tp.value(y), &[1.0]);
        let c = tp.constant(t(&[1, 3], &[-5.0, -5.0, -5.0]));
        let y = tp.grid_sample(x, c, 1).unwrap();
        assert_eq!(tp.value(y), &[0.0]);
        let c = tp.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(tp.grid_sample(x, c, 1).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2, 3], &[1.0; 6]).trainable());
        let s = tp.sum(x).unwrap();
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

        let mut tp = Tape::new();
        let x = tp.leaf(t(&[1], &[3.0]).trainable());
        let sq = tp.mul(x, x).unwrap();
        let s = tp.sum(sq).unwrap();
        assert_eq!(tp.backward(s).unwrap().get(x).unwrap(), &[6.0]);

        let mut tp = Tape::new();
        let y = tp.leaf(t(&[2], &[0.1, 0.2]).trainable());
        let s1 = tp.sum(y).unwrap();
        let s2 = tp.sum(y).unwrap();
        let l = tp.add(s1, s2).unwrap();
        assert_eq!(tp.backward(l).unwrap().get(y).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tp = Tape::new();
        let x = tp.leaf(t(&[2], &[1.0, 2.0]).trainable());
        assert!(matches!(tp.backward(x), Err(Error::Shape(_))));
        let c = tp.constant(t(&[2], &[1.0, 2.0]));
        let s = tp.sum(c).unwrap();
        assert!(matches!(tp.backward(s), Err(Error::Graph(_))));
    }

    #[test]
    fn nan_guard_names_op() {
        let mut tp = Tape::new().with_nan_guard(true);
        let a = tp.constant(t(&[1], &[0.0]));
        let b = tp.constant(t(&[1], &[0.0]));
        match tp.div(a, b) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "div"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn permute_and_slice() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = tp.permute(x, &[1, 0]).unwrap();
        assert_eq!(tp.shape(y), &[3, 2]);
        assert_eq!(tp.value(y), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = tp.slice_axis(x, 1, 1, 2).unwrap();
        assert_eq!(tp.value(z), &[1.0, 2.0, 4.0, 5.0]);
        let c = tp.concat(&[x, z], 1).unwrap();
        assert_eq!(tp.value(c), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0]);
    }
}
