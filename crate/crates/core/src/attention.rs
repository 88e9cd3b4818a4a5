//! Group-token attention masks, straight-through Gumbel assignment, and the
//! masked multi-head attention used by every message-passing mode.
//!
//! Token order inside a sequence is `[class?][group tokens][image tokens]`.
//! Masks are additive `{0, -inf}` matrices shared by all heads of a layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AdditiveMask, GateBlock, Tape, Tensor, Var};

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessagePassingMode {
    /// Group tokens aggregate from every image token and broadcast to a
    /// contiguous region.
    Samb,
    /// As `Samb`, with the broadcast region chosen by Gumbel assignment.
    SambD,
    /// Group tokens aggregate from their region and broadcast everywhere.
    Samg,
    SamgD,
    /// Group tokens behave as several class tokens; only group cross-talk is
    /// cut.
    GG,
    /// A global class token plus region-local group tokens in both
    /// directions.
    GL,
    GLD,
    /// A single class token and no masks.
    VanillaCls,
}

impl MessagePassingMode {
    pub const ALL: [MessagePassingMode; 8] = [
        MessagePassingMode::Samb,
        MessagePassingMode::SambD,
        MessagePassingMode::Samg,
        MessagePassingMode::SamgD,
        MessagePassingMode::GG,
        MessagePassingMode::GL,
        MessagePassingMode::GLD,
        MessagePassingMode::VanillaCls,
    ];

    pub fn is_dynamic(self) -> bool {
        matches!(self, Self::SambD | Self::SamgD | Self::GLD)
    }

    pub fn has_class_token(self) -> bool {
        matches!(self, Self::GL | Self::GLD | Self::VanillaCls)
    }

    pub fn has_group_tokens(self) -> bool {
        self != Self::VanillaCls
    }

    /// Whether the classifier reads the fused group tokens (otherwise the
    /// class token).
    pub fn uses_fusion_head(self) -> bool {
        !self.has_class_token()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Samb => "samb",
            Self::SambD => "samb-d",
            Self::Samg => "samg",
            Self::SamgD => "samg-d",
            Self::GG => "g-g",
            Self::GL => "g-l",
            Self::GLD => "g-l-d",
            Self::VanillaCls => "vanilla",
        }
    }
}

impl fmt::Display for MessagePassingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MessagePassingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .or(match norm.as_str() {
                "vanilla-cls" => Some(Self::VanillaCls),
                "gg" => Some(Self::GG),
                "gl" => Some(Self::GL),
                "gld" | "gl-d" => Some(Self::GLD),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown message-passing mode {s:?}")))
    }
}

/// Positions of the class, group and image tokens inside one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub class_token: bool,
    pub groups: usize,
    pub images: usize,
}

impl TokenLayout {
    pub fn for_mode(mode: MessagePassingMode, groups: usize, images: usize) -> Self {
        TokenLayout {
            class_token: mode.has_class_token(),
            groups: if mode.has_group_tokens() { groups } else { 0 },
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.class_token as usize + self.groups + self.images
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_offset(&self) -> usize {
        self.class_token as usize
    }

    pub fn image_offset(&self) -> usize {
        self.group_offset() + self.groups
    }
}

/// The image-to-group broadcast mask `[M, N]` and the group mutual-exclusion
/// mask `[N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaskPair {
    pub broadcast_mask: Tensor,
    pub group_mask: Tensor,
}

/// Contiguous even split of `m` image tokens into `n` regions; the last
/// region absorbs the remainder.
pub fn handcrafted_regions(n: usize, m: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("need at least one group token".into()));
    }
    if n > m {
        return Err(Error::Config(format!("{n} group tokens exceed {m} image tokens")));
    }
    let size = m / n;
    Ok((0..m).map(|i| (i / size).min(n - 1)).collect())
}

/// `0` on the diagonal, `-inf` elsewhere.
pub fn group_exclusion_mask(n: usize) -> Tensor {
    let data = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { NEG_INF }).collect();
    Tensor::new(vec![n, n], data).expect("square mask")
}

impl AttentionMaskPair {
    /// Mask pair for an explicit per-image-token assignment.
    pub fn from_assignment(assignment: &[usize], n: usize) -> Result<Self> {
        let m = assignment.len();
        let mut data = vec![NEG_INF; m * n];
        for (i, &g) in assignment.iter().enumerate() {
            if g >= n {
                return Err(Error::Index { index: g, bound: n });
            }
            data[i * n + g] = 0.0;
        }
        Ok(AttentionMaskPair {
            broadcast_mask: Tensor::new(vec![m, n], data)?,
            group_mask: group_exclusion_mask(n),
        })
    }

    pub fn handcrafted(n: usize, m: usize) -> Result<Self> {
        Self::from_assignment(&handcrafted_regions(n, m)?, n)
    }

    /// Checks the row-one-hot and group-exclusion invariants.
    pub fn validate(&self) -> Result<()> {
        let &[m, n] = self.broadcast_mask.shape() else {
            return Err(Error::Contract("broadcast mask must be rank 2".into()));
        };
        for i in 0..m {
            let row = self.broadcast_mask.row(i);
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            let infs = row.iter().filter(|&&v| v == NEG_INF).count();
            if zeros != 1 || zeros + infs != n {
                return Err(Error::Contract(format!("broadcast mask row {i} is not one-hot")));
            }
        }
        if self.group_mask != group_exclusion_mask(n) {
            return Err(Error::Contract("group mask is not the exclusion mask".into()));
        }
        Ok(())
    }
}

/// Which attention blocks a mode masks, for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeMasks {
    pub layout: TokenLayout,
    /// `None` for modes without group tokens.
    pub pair: Option<AttentionMaskPair>,
    /// Apply `pair.broadcast_mask` to the image→group block (`Q_p K_gᵀ`).
    pub mask_broadcast: bool,
    /// Apply `pair.broadcast_maskᵀ` to the group→image block (`Q_g K_pᵀ`).
    pub mask_aggregation: bool,
    /// Apply `pair.group_mask` to the group→group block.
    pub mask_groups: bool,
}

/// Mask set for `mode`. Dynamic modes need `assignment`; static modes use
/// the contiguous split and ignore it.
pub fn mode_masks(mode: MessagePassingMode, layout: TokenLayout, assignment: Option<&[usize]>) -> Result<ModeMasks> {
    use MessagePassingMode::*;
    let (n, m) = (layout.groups, layout.images);
    if mode == VanillaCls {
        return Ok(ModeMasks {
            layout,
            pair: None,
            mask_broadcast: false,
            mask_aggregation: false,
            mask_groups: false,
        });
    }
    let pair = if mode.is_dynamic() {
        let a = assignment.ok_or_else(|| Error::Contract(format!("mode {mode} needs a dynamic assignment")))?;
        if a.len() != m {
            return Err(Error::shape("assignment", &[a.len()], &[m]));
        }
        AttentionMaskPair::from_assignment(a, n)?
    } else {
        AttentionMaskPair::handcrafted(n, m)?
    };
    let (mask_broadcast, mask_aggregation) = match mode {
        Samb | SambD => (true, false),
        Samg | SamgD => (false, true),
        GG => (false, false),
        GL | GLD => (true, true),
        VanillaCls => unreachable!(),
    };
    Ok(ModeMasks {
        layout,
        pair: Some(pair),
        mask_broadcast,
        mask_aggregation,
        mask_groups: true,
    })
}

impl ModeMasks {
    /// The full `[T, T]` additive mask, or `None` when nothing is masked.
    pub fn dense(&self) -> Option<Vec<f64>> {
        let pair = self.pair.as_ref()?;
        let t = self.layout.len();
        let (go, io) = (self.layout.group_offset(), self.layout.image_offset());
        let (n, m) = (self.layout.groups, self.layout.images);
        let mut out = vec![0.0; t * t];
        if self.mask_groups {
            for a in 0..n {
                for b in 0..n {
                    out[(go + a) * t + go + b] = pair.group_mask.at2(a, b);
                }
            }
        }
        for i in 0..m {
            for g in 0..n {
                let v = pair.broadcast_mask.at2(i, g);
                if self.mask_broadcast {
                    out[(io + i) * t + go + g] = v;
                }
                if self.mask_aggregation {
                    out[(go + g) * t + io + i] = v;
                }
            }
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub noise_enabled: bool,
    pub rng_seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: 1.0,
            noise_enabled: true,
            rng_seed: 0,
        }
    }
}

/// Hard group choice per image token, with the soft scores and the
/// straight-through one-hot kept on the tape.
#[derive(Clone, Debug)]
pub struct GroupAssignment {
    /// `[batch * M]`, row-major over `(image, token)`.
    pub hard: Vec<usize>,
    /// Scores `Q_p K_gᵀ`, `[B, M, N]`.
    pub soft_logits: Var,
    /// Relaxed distribution `softmax((logits + u) / τ)`, `[B, M, N]`.
    pub soft: Var,
    /// Exactly one-hot forward; gradient of `soft` backward.
    pub one_hot_st: Var,
    pub batch: usize,
    pub tokens: usize,
    pub groups: usize,
}

impl GroupAssignment {
    pub fn for_image(&self, b: usize) -> &[usize] {
        &self.hard[b * self.tokens..(b + 1) * self.tokens]
    }
}

/// Standard Gumbel(0, 1) draw.
pub fn sample_gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Straight-through Gumbel-Softmax over the last axis of `logits`
/// (`[M, N]` or `[B, M, N]`). Noise is drawn from `rng` only when
/// `cfg.noise_enabled`.
pub fn gumbel_assign(
    tape: &mut Tape,
    logits: Var,
    cfg: &GumbelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GroupAssignment> {
    if cfg.temperature <= 0.0 || !cfg.temperature.is_finite() {
        return Err(Error::Config(format!(
            "Gumbel temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let shape = tape.shape(logits).to_vec();
    let (batch, m, n) = match *shape.as_slice() {
        [m, n] => (1, m, n),
        [b, m, n] => (b, m, n),
        _ => return Err(Error::shape("gumbel_assign", &shape, &[])),
    };
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite assignment logits".into()));
    }
    let perturbed = if cfg.noise_enabled {
        let noise: Vec<f64> = (0..batch * m * n).map(|_| sample_gumbel(rng)).collect();
        let u = tape.constant(&shape, noise)?;
        tape.add(logits, u)?
    } else {
        logits
    };
    let scaled = tape.scale(perturbed, 1.0 / cfg.temperature);
    let soft = tape.softmax(scaled, shape.len() - 1)?;
    let hard: Vec<usize> = tape.value(soft).chunks(n).map(argmax).collect();
    let mut one_hot = vec![0.0; batch * m * n];
    for (row, &g) in hard.iter().enumerate() {
        one_hot[row * n + g] = 1.0;
    }
    let one_hot_st = tape.straight_through(one_hot, soft)?;
    Ok(GroupAssignment {
        hard,
        soft_logits: logits,
        soft,
        one_hot_st,
        batch,
        tokens: m,
        groups: n,
    })
}

/// Projection weights of one attention layer (`[d, d]` matrices, `[d]`
/// biases), already recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// How the masks of one attention call are obtained.
pub enum MaskSource<'a> {
    /// Plain unmasked attention regardless of mode.
    None,
    /// Contiguous split (or no mask), identical for every image.
    Static,
    /// Per-image assignment supplied by the caller (`[B * M]`).
    Fixed(&'a [usize]),
    /// Gumbel assignment from this layer's own `Q_p K_gᵀ`.
    Gumbel {
        cfg: &'a GumbelConfig,
        rng: &'a mut ChaCha8Rng,
        /// Route the straight-through one-hot into the attention
        /// probabilities as a multiplicative gate so the assignment scores
        /// receive gradient.
        st_gate: bool,
    },
}

pub struct AttentionOutput {
    pub out: Var,
    /// Node holding the attention probabilities (see
    /// [`Tape::attention_probs`]).
    pub attention: Var,
    pub assignment: Option<GroupAssignment>,
}

fn project(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Masked multi-head self-attention over `tokens` (`[B, T, d]` or `[T, d]`)
/// under `mode`.
pub fn masked_attention(
    tape: &mut Tape,
    tokens: Var,
    weights: &AttentionWeights,
    heads: usize,
    mode: MessagePassingMode,
    layout: TokenLayout,
    source: MaskSource<'_>,
) -> Result<AttentionOutput> {
    let in_shape = tape.shape(tokens).to_vec();
    let x = match *in_shape.as_slice() {
        [t, d] => tape.reshape(tokens, &[1, t, d])?,
        [_, _, _] => tokens,
        _ => return Err(Error::shape("masked_attention", &in_shape, &[])),
    };
    let shape = tape.shape(x).to_vec();
    let (batch, t, d) = (shape[0], shape[1], shape[2]);
    if t != layout.len() {
        return Err(Error::shape("masked_attention layout", &shape, &[layout.len()]));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
    }
    let q = project(tape, x, weights.wq, weights.bq)?;
    let k = project(tape, x, weights.wk, weights.bk)?;
    let v = project(tape, x, weights.wv, weights.bv)?;

    let (n, m) = (layout.groups, layout.images);
    let (go, io) = (layout.group_offset(), layout.image_offset());
    let mut assignment = None;
    let mut gates = Vec::new();
    let mask = match source {
        MaskSource::None => None,
        MaskSource::Static => {
            if mode.is_dynamic() {
                return Err(Error::Contract(format!("mode {mode} needs a dynamic assignment")));
            }
            mode_masks(mode, layout, None)?.dense().map(AdditiveMask::shared)
        }
        MaskSource::Fixed(hard) => {
            if hard.len() != batch * m {
                return Err(Error::shape("assignment", &[hard.len()], &[batch * m]));
            }
            per_batch_mask(mode, layout, hard, batch)?
        }
        MaskSource::Gumbel { cfg, rng, st_gate } => {
            if !mode.is_dynamic() {
                return Err(Error::Contract(format!("mode {mode} has no dynamic assignment")));
            }
            let qp = tape.slice(q, 1, io, m)?;
            let kg = tape.slice(k, 1, go, n)?;
            let kg_t = tape.transpose_last(kg)?;
            let logits = tape.matmul(qp, kg_t)?;
            let a = gumbel_assign(tape, logits, cfg, rng)?;
            let mask = per_batch_mask(mode, layout, &a.hard, batch)?;
            if st_gate {
                let masks = mode_masks(mode, layout, Some(a.for_image(0)))?;
                if masks.mask_broadcast {
                    gates.push(GateBlock {
                        gate: a.one_hot_st,
                        row_offset: io,
                        col_offset: go,
                        transposed: false,
                    });
                }
                if masks.mask_aggregation {
                    gates.push(GateBlock {
                        gate: a.one_hot_st,
                        row_offset: go,
                        col_offset: io,
                        transposed: true,
                    });
                }
            }
            assignment = Some(a);
            mask
        }
    };
    let attention = tape.masked_attention(q, k, v, heads, mask.as_ref(), &gates)?;
    let mut out = project(tape, attention, weights.wo, weights.bo)?;
    if in_shape.len() == 2 {
        out = tape.reshape(out, &in_shape)?;
    }
    Ok(AttentionOutput {
        out,
        attention,
        assignment,
    })
}

fn per_batch_mask(
    mode: MessagePassingMode,
    layout: TokenLayout,
    hard: &[usize],
    batch: usize,
) -> Result<Option<AdditiveMask>> {
    let m = layout.images;
    let mut data = Vec::with_capacity(batch * layout.len() * layout.len());
    for b in 0..batch {
        match mode_masks(mode, layout, Some(&hard[b * m..(b + 1) * m]))?.dense() {
            Some(dense) => data.extend(dense),
            None => return Ok(None),
        }
    }
    Ok(Some(AdditiveMask::per_batch(data)))
}

/// Number of strictly positive attention weights in every row of an
/// attention node, ordered `(batch, head, row)`.
pub fn message_scales(tape: &Tape, attention: Var, tokens: usize) -> Option<Vec<usize>> {
    let probs = tape.attention_probs(attention)?;
    Some(
        probs
            .chunks(tokens)
            .map(|row| row.iter().filter(|&&p| p > 0.0).count())
            .collect(),
    )
}
