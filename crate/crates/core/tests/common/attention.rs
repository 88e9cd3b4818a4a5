//! Random attention setups and a scalar full-score-matrix oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samb::attention::{
    argmax, masked_attention, mode_masks, AttentionWeights, GumbelConfig, MaskSource, MessagePassingMode, TokenLayout,
};
use samb::tensor::{Tape, Tensor, Var};

use super::random_tensor;

pub struct Setup {
    pub x: Tensor,
    pub weights: Vec<Tensor>,
    pub heads: usize,
    pub layout: TokenLayout,
}

pub fn random_setup(r: &mut ChaCha8Rng, mode: MessagePassingMode) -> Setup {
    let heads = r.random_range(1..=3);
    let d = heads * r.random_range(1..=4);
    let m = r.random_range(1..=9);
    let n = r.random_range(1..=m.min(4));
    let layout = TokenLayout::for_mode(mode, n, m);
    let batch = r.random_range(1..=2);
    let x = random_tensor(r, &[batch, layout.len(), d], 1.0);
    let weights = (0..4)
        .flat_map(|_| [random_tensor(r, &[d, d], 0.6), random_tensor(r, &[d], 0.3)])
        .collect();
    Setup {
        x,
        weights,
        heads,
        layout,
    }
}

pub fn bind(tape: &mut Tape, s: &Setup) -> (Var, AttentionWeights) {
    let x = tape.leaf(&s.x);
    let w: Vec<Var> = s.weights.iter().map(|t| tape.leaf(t)).collect();
    (
        x,
        AttentionWeights {
            wq: w[0],
            bq: w[1],
            wk: w[2],
            bk: w[3],
            wv: w[4],
            bv: w[5],
            wo: w[6],
            bo: w[7],
        },
    )
}

/// Row-major `[p, q]·[q, r]`.
pub fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            c[i * r + j] = (0..q).map(|k| a[i * q + k] * b[k * r + j]).sum();
        }
    }
    c
}

pub fn project(x: &[f64], w: &Tensor, b: &Tensor, t: usize, d: usize) -> Vec<f64> {
    let mut y = naive_matmul(x, w.data(), t, d, d);
    for i in 0..t {
        for j in 0..d {
            y[i * d + j] += b.data()[j];
        }
    }
    y
}

/// Materializes the full score matrix with explicit `-inf` entries, one
/// image and one head at a time, in plain scalar arithmetic.
pub fn dense_oracle(s: &Setup, mode: MessagePassingMode) -> Vec<f64> {
    let shape = s.x.shape();
    let (batch, t, d) = (shape[0], shape[1], shape[2]);
    let dk = d / s.heads;
    let (n, m) = (s.layout.groups, s.layout.images);
    let (go, io) = (s.layout.group_offset(), s.layout.image_offset());
    let w = &s.weights;
    let mut out = Vec::with_capacity(batch * t * d);
    for b in 0..batch {
        let x = &s.x.data()[b * t * d..(b + 1) * t * d];
        let q = project(x, &w[0], &w[1], t, d);
        let k = project(x, &w[2], &w[3], t, d);
        let v = project(x, &w[4], &w[5], t, d);
        let assignment: Option<Vec<usize>> = mode.is_dynamic().then(|| {
            (0..m)
                .map(|i| {
                    let row: Vec<f64> = (0..n)
                        .map(|g| (0..d).map(|c| q[(io + i) * d + c] * k[(go + g) * d + c]).sum())
                        .collect();
                    argmax(&row)
                })
                .collect()
        });
        let mask = mode_masks(mode, s.layout, assignment.as_deref()).unwrap().dense();
        let mut att = vec![0.0; t * d];
        for h in 0..s.heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = (0..dk).map(|c| q[i * d + h * dk + c] * k[j * d + h * dk + c]).sum();
                        let add = mask.as_ref().map_or(0.0, |mk| mk[i * t + j]);
                        (dot + add) / (dk as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|&z| (z - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dk {
                    att[i * d + h * dk + c] = (0..t).map(|j| e[j] / z * v[j * d + h * dk + c]).sum();
                }
            }
        }
        out.extend(project(&att, &w[6], &w[7], t, d));
    }
    out
}

pub fn run(s: &Setup, mode: MessagePassingMode) -> (Tape, Var, Vec<f64>) {
    let mut tape = Tape::new();
    let (x, w) = bind(&mut tape, s);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let cfg = GumbelConfig {
        noise_enabled: false,
        ..GumbelConfig::default()
    };
    let source = if mode.is_dynamic() {
        MaskSource::Gumbel {
            cfg: &cfg,
            rng: &mut r,
            st_gate: false,
        }
    } else {
        MaskSource::Static
    };
    let out = masked_attention(&mut tape, x, &w, s.heads, mode, s.layout, source).unwrap();
    let y = tape.value(out.out).to_vec();
    (tape, out.attention, y)
}
