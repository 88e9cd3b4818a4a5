use std::rc::Rc;

use super::attention_op::AttentionState;
use super::kernels::{count_matmul, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Adds into the gradient buffer of a node.
pub(crate) type GradSink<'a> = dyn FnMut(Var, &mut dyn FnMut(&mut [f64])) + 'a;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Gelu,
    Tanh,
    Sigmoid,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        a: Var,
        mul: f64,
    },
    Unary {
        a: Var,
        kind: Unary,
    },
    LogClamped {
        a: Var,
        min: f64,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Rc<[usize]>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Expand {
        a: Var,
    },
    TransposeLast {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Slice {
        a: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Grl {
        a: Var,
        lambda: f64,
    },
    StraightThrough {
        soft: Var,
    },
    Attention(Box<AttentionState>),
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `true` when `b` equals `a` or is a trailing suffix of it.
fn suffix_broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn gelu(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf copied from `t`; it receives gradients iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Snapshot of a recorded value as a [`Tensor`] linked to its node.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone()).expect("node shape invariant");
        t.requires_grad = node.requires_grad;
        t.grad = self.leaf_grads[v.0].clone();
        t.tape_node = Some(v);
        t
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- forward ops -------------------------------------------------

    /// Batched matrix product `[..., p, q] × [..., q, r]`. Either operand may
    /// be rank 2, in which case it is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if q != q2 || (!lead_a.is_empty() && !lead_b.is_empty() && lead_a != lead_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let lead = if lead_a.is_empty() { lead_b } else { lead_a };
        let batch = numel(lead);
        let (a_batched, b_batched) = (!lead_a.is_empty(), !lead_b.is_empty());
        let mut out = vec![0.0; batch * p * r];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for t in 0..batch {
                let ao = if a_batched { t * p * q } else { 0 };
                let bo = if b_batched { t * q * r } else { 0 };
                gemm_nn(
                    &av[ao..ao + p * q],
                    &bv[bo..bo + q * r],
                    &mut out[t * p * r..(t + 1) * p * r],
                    p,
                    q,
                    r,
                );
                count_matmul(p, q, r);
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([p, r]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                p,
                q,
                r,
                a_batched,
                b_batched,
            },
            rg,
        ))
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcastable(&sa, &sb) {
            return Err(Error::shape("add", &sa, &sb));
        }
        let bv = self.value(b);
        let bl = bv.len().max(1);
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % bl]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, Op::Add { a, b }, rg))
    }

    /// Elementwise product; `b` may be a trailing-suffix broadcast of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcastable(&sa, &sb) {
            return Err(Error::shape("mul", &sa, &sb));
        }
        let bv = self.value(b);
        let bl = bv.len().max(1);
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, x)| x * bv[i % bl]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, Op::Mul { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// `mul · a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let out = self.value(a).iter().map(|x| mul * x + add).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Affine { a, mul }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => gelu,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Unary { a, kind }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// `ln(max(a, min))`; the gradient is zero wherever the clamp is active.
    pub fn log_clamped(&mut self, a: Var, min: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(min).ln()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::LogClamped { a, min }, rg)
    }

    /// Numerically stable softmax along `axis`. `-inf` inputs map to exactly
    /// zero; a slice that is entirely `-inf` is a degenerate-mask error.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateMask { row: o * inner + i });
                }
                if !max.is_finite() {
                    return Err(Error::Numeric(format!("non-finite softmax input {max}")));
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / d.max(1);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        if b == 0 {
            return Err(Error::Contract("cross_entropy on an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index { index: bad, bound: c });
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numeric(format!("non-finite logits in row {i}")));
            }
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![s], Op::Mean { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, rg))
    }

    /// Repeats `a` along a new leading axis of length `batch`.
    pub fn expand(&mut self, a: Var, batch: usize) -> Var {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(a));
        let data = self.value(a).repeat(batch);
        let rg = self.rg(a);
        self.push(shape, data, Op::Expand { a }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel(&shape) / (rows * cols).max(1);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for t in 0..batch {
            let o = t * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[o + j * rows + i] = x[o + i * cols + j];
                }
            }
        }
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        let rg = self.rg(a);
        Ok(self.push(new_shape, out, Op::TransposeLast { a, rows, cols }, rg))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer = numel(&shape[..axis]);
        let axis_len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            new_shape,
            out,
            Op::Slice {
                a,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let l = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let parts: Vec<(Var, usize)> = inputs.iter().map(|&v| (v, self.shape(v)[axis])).collect();
        let rg = inputs.iter().any(|&v| self.rg(v));
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: parts,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Gradient reversal: identity forward, `-lambda · upstream` backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let data = self.value(a).to_vec();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, data, Op::Grl { a, lambda }, rg)
    }

    /// Straight-through composite `hard + soft − sg(soft)`: the forward value
    /// is exactly `hard`, the backward is the identity onto `soft`.
    pub fn straight_through(&mut self, hard: Vec<f64>, soft: Var) -> Result<Var> {
        if hard.len() != self.value(soft).len() {
            return Err(Error::shape("straight_through", &[hard.len()], self.shape(soft)));
        }
        let (shape, rg) = (self.shape(soft).to_vec(), self.rg(soft));
        Ok(self.push(shape, hard, Op::StraightThrough { soft }, rg))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.data.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            &Op::MatMul {
                a,
                b,
                batch,
                p,
                q,
                r,
                a_batched,
                b_batched,
            } => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(a, &mut |da| {
                    for t in 0..batch {
                        let ao = if a_batched { t * p * q } else { 0 };
                        let bo = if b_batched { t * q * r } else { 0 };
                        gemm_nt(
                            &g[t * p * r..(t + 1) * p * r],
                            &bv[bo..bo + q * r],
                            &mut da[ao..ao + p * q],
                            p,
                            r,
                            q,
                        );
                    }
                });
                acc(b, &mut |db| {
                    for t in 0..batch {
                        let ao = if a_batched { t * p * q } else { 0 };
                        let bo = if b_batched { t * q * r } else { 0 };
                        gemm_tn(
                            &av[ao..ao + p * q],
                            &g[t * p * r..(t + 1) * p * r],
                            &mut db[bo..bo + q * r],
                            p,
                            q,
                            r,
                        );
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(b, &mut |db| {
                    let bl = db.len().max(1);
                    g.iter().enumerate().for_each(|(k, x)| db[k % bl] += x);
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                let bl = bv.len().max(1);
                acc(a, &mut |da| {
                    for (k, d) in da.iter_mut().enumerate() {
                        *d += g[k] * bv[k % bl];
                    }
                });
                acc(b, &mut |db| {
                    for k in 0..g.len() {
                        db[k % bl] += g[k] * av[k];
                    }
                });
            }
            &Op::Affine { a, mul } => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += mul * x));
            }
            &Op::Unary { a, kind } => {
                let (xv, yv) = (&nodes[a.0].data, &nodes[i].data);
                acc(a, &mut |da| {
                    for k in 0..da.len() {
                        let local = match kind {
                            Unary::Gelu => gelu_grad(xv[k]),
                            Unary::Tanh => 1.0 - yv[k] * yv[k],
                            Unary::Sigmoid => yv[k] * (1.0 - yv[k]),
                        };
                        da[k] += g[k] * local;
                    }
                });
            }
            &Op::LogClamped { a, min } => {
                let xv = &nodes[a.0].data;
                acc(a, &mut |da| {
                    for k in 0..da.len() {
                        if xv[k] > min {
                            da[k] += g[k] / xv[k];
                        }
                    }
                });
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = &nodes[i].data;
                acc(a, &mut |da| {
                    for o in 0..outer {
                        for n in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + n;
                            let dot: f64 = (0..len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                            for j in 0..len {
                                da[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = &nodes[gamma.0].data;
                let d = gv.len();
                let rows = rstd.len();
                acc(*x, &mut |dx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let o = r * d;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = g[o + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[o + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = g[o + j] * gv[j];
                            dx[o + j] += rs * (dh - m1 - xhat[o + j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                acc(*logits, &mut |dl| {
                    for r in 0..b {
                        for j in 0..c {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean { a } => acc(a, &mut |da| {
                let s = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += s);
            }),
            &Op::Reshape { a } | &Op::StraightThrough { soft: a } => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            }
            &Op::Expand { a } => acc(a, &mut |da| {
                let n = da.len().max(1);
                g.iter().enumerate().for_each(|(k, x)| da[k % n] += x);
            }),
            &Op::Grl { a, lambda } => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += -lambda * x));
            }
            &Op::TransposeLast { a, rows, cols } => {
                acc(a, &mut |da| {
                    let batch = da.len() / (rows * cols).max(1);
                    for t in 0..batch {
                        let o = t * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                da[o + r * cols + c] += g[o + c * rows + r];
                            }
                        }
                    }
                });
            }
            &Op::Slice {
                a,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                acc(a, &mut |da| {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        da[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = inputs.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(v, l) in inputs {
                    acc(v, &mut |dv| {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            dv[o * l * inner..(o + 1) * l * inner]
                                .iter_mut()
                                .zip(&g[src..src + l * inner])
                                .for_each(|(d, x)| *d += x);
                        }
                    });
                    offset += l;
                }
            }
            Op::Attention(state) => state.backward(nodes, g, &mut acc),
        }
    }
}
