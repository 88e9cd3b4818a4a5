//! Fused multi-head attention with an additive mask shared across heads and
//! optional multiplicative gates on rectangular blocks of the probability
//! matrix.

use super::kernels::{count_matmul, gemm_nn, gemm_nt, gemm_tn};
use super::tape::{GradSink, Node, Op, Tape, Var};
use crate::error::{Error, Result};

/// Additive `{0, -inf}` mask of shape `[T, T]` (shared by the batch) or
/// `[B, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveMask {
    pub data: Vec<f64>,
    pub per_batch: bool,
}

impl AdditiveMask {
    pub fn shared(data: Vec<f64>) -> Self {
        AdditiveMask { data, per_batch: false }
    }

    pub fn per_batch(data: Vec<f64>) -> Self {
        AdditiveMask { data, per_batch: true }
    }

    fn slice(&self, b: usize, t: usize) -> &[f64] {
        if self.per_batch {
            &self.data[b * t * t..(b + 1) * t * t]
        } else {
            &self.data[..t * t]
        }
    }
}

/// Multiplies the attention probabilities in the block starting at
/// `(row_offset, col_offset)` by `gate[b]`. With `transposed`, the gate has
/// shape `[B, cols, rows]` and is read transposed. Blocks must not overlap.
#[derive(Clone, Copy, Debug)]
pub struct GateBlock {
    pub gate: Var,
    pub row_offset: usize,
    pub col_offset: usize,
    pub transposed: bool,
}

pub(crate) struct AttentionState {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    head_dim: usize,
    scale: f64,
    gates: Vec<(GateBlock, usize, usize)>,
    /// Softmax output before gating, `[B, heads, T, T]`.
    probs: Vec<f64>,
}

fn gather_head(x: &[f64], b: usize, h: usize, t: usize, d: usize, dk: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dk);
    for i in 0..t {
        let base = (b * t + i) * d + h * dk;
        out.extend_from_slice(&x[base..base + dk]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], b: usize, h: usize, t: usize, d: usize, dk: usize) {
    for i in 0..t {
        let base = (b * t + i) * d + h * dk;
        dst[base..base + dk]
            .iter_mut()
            .zip(&src[i * dk..(i + 1) * dk])
            .for_each(|(o, s)| *o += s);
    }
}

impl AttentionState {
    /// Dense `[T, T]` gate multiplier for batch element `b` (ones outside
    /// every gated block).
    fn gate_matrix(&self, nodes: &[Node], b: usize) -> Option<Vec<f64>> {
        if self.gates.is_empty() {
            return None;
        }
        let t = self.tokens;
        let mut m = vec![1.0; t * t];
        for &(blk, rows, cols) in &self.gates {
            let gv = &nodes[blk.gate.0].data;
            for i in 0..rows {
                for j in 0..cols {
                    let val = if blk.transposed {
                        gv[(b * cols + j) * rows + i]
                    } else {
                        gv[(b * rows + i) * cols + j]
                    };
                    m[(blk.row_offset + i) * t + blk.col_offset + j] = val;
                }
            }
        }
        Some(m)
    }

    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], acc: &mut GradSink<'_>) {
        let (t, h, dk) = (self.tokens, self.heads, self.head_dim);
        let d = h * dk;
        let (qv, kv, vv) = (&nodes[self.q.0].data, &nodes[self.k.0].data, &nodes[self.v.0].data);
        let mut dq = vec![0.0; qv.len()];
        let mut dk_all = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dgates: Vec<Vec<f64>> = self
            .gates
            .iter()
            .map(|(blk, _, _)| vec![0.0; nodes[blk.gate.0].data.len()])
            .collect();

        for b in 0..self.batch {
            let gm = self.gate_matrix(nodes, b);
            for hh in 0..h {
                let qh = gather_head(qv, b, hh, t, d, dk);
                let kh = gather_head(kv, b, hh, t, d, dk);
                let vh = gather_head(vv, b, hh, t, d, dk);
                let doh = gather_head(g, b, hh, t, d, dk);
                let p = &self.probs[(b * h + hh) * t * t..(b * h + hh + 1) * t * t];
                let pg: Vec<f64> = match &gm {
                    Some(m) => p.iter().zip(m).map(|(x, y)| x * y).collect(),
                    None => p.to_vec(),
                };

                let mut dpg = vec![0.0; t * t];
                gemm_nt(&doh, &vh, &mut dpg, t, dk, t);
                let mut dvh = vec![0.0; t * dk];
                gemm_tn(&pg, &doh, &mut dvh, t, t, dk);
                scatter_head(&mut dv, &dvh, b, hh, t, d, dk);

                for (gi, &(blk, rows, cols)) in self.gates.iter().enumerate() {
                    let dgate = &mut dgates[gi];
                    for i in 0..rows {
                        for j in 0..cols {
                            let at = (blk.row_offset + i) * t + blk.col_offset + j;
                            let idx = if blk.transposed {
                                (b * cols + j) * rows + i
                            } else {
                                (b * rows + i) * cols + j
                            };
                            dgate[idx] += dpg[at] * p[at];
                        }
                    }
                }

                let dp: Vec<f64> = match &gm {
                    Some(m) => dpg.iter().zip(m).map(|(x, y)| x * y).collect(),
                    None => dpg,
                };
                let mut ds = vec![0.0; t * t];
                for i in 0..t {
                    let row = i * t..(i + 1) * t;
                    let dot: f64 = p[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        ds[j] = self.scale * p[j] * (dp[j] - dot);
                    }
                }
                let mut dqh = vec![0.0; t * dk];
                gemm_nn(&ds, &kh, &mut dqh, t, t, dk);
                let mut dkh = vec![0.0; t * dk];
                gemm_tn(&ds, &qh, &mut dkh, t, t, dk);
                scatter_head(&mut dq, &dqh, b, hh, t, d, dk);
                scatter_head(&mut dk_all, &dkh, b, hh, t, d, dk);
            }
        }
        acc(self.q, &mut |buf| buf.iter_mut().zip(&dq).for_each(|(o, x)| *o += x));
        acc(self.k, &mut |buf| {
            buf.iter_mut().zip(&dk_all).for_each(|(o, x)| *o += x)
        });
        acc(self.v, &mut |buf| buf.iter_mut().zip(&dv).for_each(|(o, x)| *o += x));
        for ((blk, _, _), dg) in self.gates.iter().zip(&dgates) {
            acc(blk.gate, &mut |buf| buf.iter_mut().zip(dg).for_each(|(o, x)| *o += x));
        }
    }
}

impl Tape {
    /// `softmax((Q Kᵀ + mask) / sqrt(d_k)) V` per head, with the heads laid
    /// out as contiguous column groups of `q`, `k`, `v` (`[B, T, d]`).
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AdditiveMask>,
        gates: &[GateBlock],
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape("masked_attention", &shape, self.shape(k)));
        }
        let (batch, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            let want = if m.per_batch { batch * t * t } else { t * t };
            if m.data.len() != want {
                return Err(Error::shape("attention mask", &[m.data.len()], &[want]));
            }
        }
        let mut gate_dims = Vec::with_capacity(gates.len());
        for blk in gates {
            let gs = self.shape(blk.gate);
            if gs.len() != 3 || gs[0] != batch {
                return Err(Error::shape("attention gate", gs, &shape));
            }
            let (rows, cols) = if blk.transposed { (gs[2], gs[1]) } else { (gs[1], gs[2]) };
            if blk.row_offset + rows > t || blk.col_offset + cols > t {
                return Err(Error::shape("attention gate", gs, &shape));
            }
            let overlaps = gate_dims.iter().any(|&(o, r, c): &(GateBlock, usize, usize)| {
                blk.row_offset < o.row_offset + r
                    && o.row_offset < blk.row_offset + rows
                    && blk.col_offset < o.col_offset + c
                    && o.col_offset < blk.col_offset + cols
            });
            if overlaps {
                return Err(Error::Contract("attention gate blocks overlap".into()));
            }
            gate_dims.push((*blk, rows, cols));
        }

        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut state = AttentionState {
            q,
            k,
            v,
            batch,
            tokens: t,
            heads,
            head_dim: dk,
            scale,
            gates: gate_dims,
            probs: vec![0.0; batch * heads * t * t],
        };
        let mut out = vec![0.0; batch * t * d];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for b in 0..batch {
                let gm = state.gate_matrix(&self.nodes, b);
                let mslice = mask.map(|m| m.slice(b, t));
                for h in 0..heads {
                    let qh = gather_head(qv, b, h, t, d, dk);
                    let kh = gather_head(kv, b, h, t, d, dk);
                    let vh = gather_head(vv, b, h, t, d, dk);
                    let mut s = vec![0.0; t * t];
                    gemm_nt(&qh, &kh, &mut s, t, dk, t);
                    count_matmul(t, dk, t);
                    if let Some(m) = mslice {
                        s.iter_mut().zip(m).for_each(|(x, mm)| *x += mm);
                    }
                    let p = &mut state.probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                    for i in 0..t {
                        let row = &s[i * t..(i + 1) * t];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        if max == f64::NEG_INFINITY {
                            return Err(Error::DegenerateMask { row: i });
                        }
                        if !max.is_finite() {
                            return Err(Error::Numeric(format!("non-finite attention score in row {i}")));
                        }
                        let mut total = 0.0;
                        for j in 0..t {
                            let e = ((row[j] - max) * scale).exp();
                            p[i * t + j] = e;
                            total += e;
                        }
                        p[i * t..(i + 1) * t].iter_mut().for_each(|x| *x /= total);
                    }
                    let pg: Vec<f64> = match &gm {
                        Some(m) => p.iter().zip(m).map(|(x, y)| x * y).collect(),
                        None => p.to_vec(),
                    };
                    let mut oh = vec![0.0; t * dk];
                    gemm_nn(&pg, &vh, &mut oh, t, t, dk);
                    count_matmul(t, t, dk);
                    scatter_head(&mut out, &oh, b, h, t, d, dk);
                }
            }
        }
        let rg = self.nodes[q.0].requires_grad
            || self.nodes[k.0].requires_grad
            || self.nodes[v.0].requires_grad
            || gates.iter().any(|g| self.nodes[g.gate.0].requires_grad);
        Ok(self.push(shape, out, Op::Attention(Box::new(state)), rg))
    }

    /// Softmax probabilities `[B, heads, T, T]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(state) => Some(&state.probs),
            _ => None,
        }
    }
}
