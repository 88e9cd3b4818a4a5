//! Tiny vision transformer with group tokens, masked attention blocks, a
//! learnable-query fusion head and a linear classifier.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    masked_attention, AttentionWeights, GroupAssignment, GumbelConfig, MaskSource, MessagePassingMode, TokenLayout,
};
use crate::error::{Error, Result};
use crate::params::{constant, trunc_normal, xavier_uniform, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub num_group_tokens: usize,
    pub mode: MessagePassingMode,
    /// Number of trailing blocks that apply the mode's masks; earlier blocks
    /// attend without masks.
    pub masked_depth: usize,
    /// Multiply broadcast-block attention by the straight-through one-hot so
    /// dynamic assignment logits receive gradient.
    pub st_gate: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 4,
            num_group_tokens: 4,
            mode: MessagePassingMode::SambD,
            masked_depth: 2,
            st_gate: false,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return err("num_classes, in_channels and mlp_ratio must be positive".into());
        }
        if self.mode.has_group_tokens() {
            if self.num_group_tokens == 0 {
                return err("num_group_tokens must be at least 1".into());
            }
            if self.num_group_tokens > self.num_patches() {
                return err(format!(
                    "{} group tokens exceed {} image tokens",
                    self.num_group_tokens,
                    self.num_patches()
                ));
            }
        }
        if self.masked_depth > self.depth {
            return err(format!(
                "masked_depth {} exceeds depth {}",
                self.masked_depth, self.depth
            ));
        }
        if self.layer_norm_eps <= 0.0 {
            return err("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::for_mode(self.mode, self.num_group_tokens, self.num_patches())
    }

    pub fn image_numel(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }

    fn block_is_masked(&self, layer: usize) -> bool {
        layer >= self.depth - self.masked_depth
    }
}

/// Rearranges `[B, C, H, W]` pixels into `[B, M, C·p·p]` flattened patches,
/// patches in row-major grid order.
pub fn patchify(images: &[f64], batch: usize, channels: usize, size: usize, patch: usize) -> Result<Vec<f64>> {
    if !size.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image size {size} is not divisible by patch {patch}"
        )));
    }
    let numel = channels * size * size;
    if images.len() != batch * numel {
        return Err(Error::shape(
            "patchify",
            &[images.len()],
            &[batch, channels, size, size],
        ));
    }
    let g = size / patch;
    let pd = channels * patch * patch;
    let mut out = vec![0.0; images.len()];
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                let base = (b * g * g + gy * g + gx) * pd;
                for c in 0..channels {
                    for py in 0..patch {
                        for px in 0..patch {
                            let src = b * numel + c * size * size + (gy * patch + py) * size + gx * patch + px;
                            out[base + c * patch * patch + py * patch + px] = images[src];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    attn: [usize; 8],
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    class_token: Option<usize>,
    group_tokens: Option<usize>,
    blocks: Vec<BlockIdx>,
    norm_g: usize,
    norm_b: usize,
    fusion_query: Option<usize>,
    head_w: usize,
    head_b: usize,
}

/// Per-component parameter counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub patch_embed: usize,
    pub pos_embed: usize,
    pub class_token: usize,
    pub group_tokens: usize,
    pub fusion_query: usize,
    pub blocks: usize,
    pub final_norm: usize,
    pub classifier: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.patch_embed
            + self.pos_embed
            + self.class_token
            + self.group_tokens
            + self.fusion_query
            + self.blocks
            + self.final_norm
            + self.classifier
    }
}

/// Options for one forward pass.
pub struct ForwardOptions<'a> {
    /// Gumbel settings for dynamic modes; `noise_enabled = false` gives the
    /// deterministic argmax used at evaluation.
    pub gumbel: GumbelConfig,
    pub rng: &'a mut ChaCha8Rng,
}

pub struct ModelOutput {
    /// `[B, C]`
    pub logits: Var,
    /// `[B, d]`, the fused group token (or the class token).
    pub feature: Var,
    /// `[B, N]` fusion weights, for modes that use the fusion head.
    pub fusion_weights: Option<Var>,
    /// One entry per block; `Some` only for dynamically masked blocks.
    pub assignments: Vec<Option<GroupAssignment>>,
    /// Attention nodes, one per block.
    pub attentions: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    pub config: ModelConfig,
    pub params: ParamSet,
    idx: Layout,
}

impl VisionTransformer {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut p = ParamSet::new();
        let patch_w = p.add("patch_embed.weight", xavier_uniform(rng, config.patch_dim(), d));
        let patch_b = p.add("patch_embed.bias", constant(&[d], 0.0));
        let pos = p.add("pos_embed", trunc_normal(rng, &[config.num_patches(), d], 0.02));
        let class_token = config
            .mode
            .has_class_token()
            .then(|| p.add("class_token", trunc_normal(rng, &[1, d], 0.02)));
        let group_tokens = config
            .mode
            .has_group_tokens()
            .then(|| p.add("group_tokens", trunc_normal(rng, &[config.num_group_tokens, d], 0.02)));
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let name = |s: &str| format!("blocks.{l}.{s}");
            let ln1_g = p.add(name("norm1.weight"), constant(&[d], 1.0));
            let ln1_b = p.add(name("norm1.bias"), constant(&[d], 0.0));
            let mut attn = [0; 8];
            for (k, proj) in ["q", "k", "v", "out"].iter().enumerate() {
                attn[2 * k] = p.add(name(&format!("attn.{proj}.weight")), xavier_uniform(rng, d, d));
                attn[2 * k + 1] = p.add(name(&format!("attn.{proj}.bias")), constant(&[d], 0.0));
            }
            let ln2_g = p.add(name("norm2.weight"), constant(&[d], 1.0));
            let ln2_b = p.add(name("norm2.bias"), constant(&[d], 0.0));
            let fc1_w = p.add(name("mlp.fc1.weight"), xavier_uniform(rng, d, hidden));
            let fc1_b = p.add(name("mlp.fc1.bias"), constant(&[hidden], 0.0));
            let fc2_w = p.add(name("mlp.fc2.weight"), xavier_uniform(rng, hidden, d));
            let fc2_b = p.add(name("mlp.fc2.bias"), constant(&[d], 0.0));
            blocks.push(BlockIdx {
                ln1_g,
                ln1_b,
                attn,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let norm_g = p.add("norm.weight", constant(&[d], 1.0));
        let norm_b = p.add("norm.bias", constant(&[d], 0.0));
        let fusion_query = config
            .mode
            .uses_fusion_head()
            .then(|| p.add("fusion.query", trunc_normal(rng, &[d, 1], 0.02)));
        let head_w = p.add("head.weight", xavier_uniform(rng, d, config.num_classes));
        let head_b = p.add("head.bias", constant(&[config.num_classes], 0.0));
        Ok(VisionTransformer {
            config,
            params: p,
            idx: Layout {
                patch_w,
                patch_b,
                pos,
                class_token,
                group_tokens,
                blocks,
                norm_g,
                norm_b,
                fusion_query,
                head_w,
                head_b,
            },
        })
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let n = |i: usize| self.params.tensors()[i].numel();
        let i = &self.idx;
        let blocks: usize = i
            .blocks
            .iter()
            .map(|b| {
                [b.ln1_g, b.ln1_b, b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b]
                    .iter()
                    .chain(&b.attn)
                    .map(|&k| n(k))
                    .sum::<usize>()
            })
            .sum();
        ParamBreakdown {
            patch_embed: n(i.patch_w) + n(i.patch_b),
            pos_embed: n(i.pos),
            class_token: i.class_token.map_or(0, n),
            group_tokens: i.group_tokens.map_or(0, n),
            fusion_query: i.fusion_query.map_or(0, n),
            blocks,
            final_norm: n(i.norm_g) + n(i.norm_b),
            classifier: n(i.head_w) + n(i.head_b),
        }
    }

    /// Exact parameter count and the analytic forward multiply-add FLOPs
    /// (2 per multiply-add) for a batch of `batch` images.
    pub fn param_count(&self, batch: usize) -> (usize, u64) {
        (self.params.numel(), self.flops_estimate(batch))
    }

    /// Forward FLOPs of every matrix product, counted as `2·p·q·r` per
    /// `[p,q]·[q,r]` product.
    pub fn flops_estimate(&self, batch: usize) -> u64 {
        let c = &self.config;
        let (b, d) = (batch as u64, c.embed_dim as u64);
        let layout = c.layout();
        let (t, m, n) = (layout.len() as u64, layout.images as u64, layout.groups as u64);
        let hidden = d * c.mlp_ratio as u64;
        let mut f = 2 * b * m * c.patch_dim() as u64 * d;
        for l in 0..c.depth {
            f += 4 * 2 * b * t * d * d;
            f += 2 * 2 * b * t * t * d;
            if c.mode.is_dynamic() && c.block_is_masked(l) {
                f += 2 * b * m * d * n;
            }
            f += 2 * 2 * b * t * d * hidden;
        }
        if c.mode.uses_fusion_head() {
            f += 2 * b * n * d + 2 * b * n * d;
        }
        f + 2 * b * d * c.num_classes as u64
    }

    /// Forward pass over `images`, a flat `[B, C, H, W]` buffer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &[f64],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ModelOutput> {
        let c = &self.config;
        let numel = c.image_numel();
        if numel == 0 || !images.len().is_multiple_of(numel) || images.is_empty() {
            return Err(Error::shape("forward images", &[images.len()], &[numel]));
        }
        let batch = images.len() / numel;
        let (d, m) = (c.embed_dim, c.num_patches());
        let idx = &self.idx;
        let v = |i: usize| vars[i];

        let mut patches = patchify(images, batch, c.in_channels, c.image_size, c.patch_size)?;
        // Pixels in [0, 1] are centered to [-1, 1].
        patches.iter_mut().for_each(|x| *x = 2.0 * *x - 1.0);
        let patches = tape.constant(&[batch, m, c.patch_dim()], patches)?;
        let x = tape.matmul(patches, v(idx.patch_w))?;
        let x = tape.add(x, v(idx.patch_b))?;
        let x_img = tape.add(x, v(idx.pos))?;

        let mut parts = Vec::with_capacity(3);
        if let Some(ci) = idx.class_token {
            parts.push(tape.expand(v(ci), batch));
        }
        if let Some(gi) = idx.group_tokens {
            parts.push(tape.expand(v(gi), batch));
        }
        parts.push(x_img);
        let mut x = tape.concat(&parts, 1)?;

        let layout = c.layout();
        let mut assignments = Vec::with_capacity(c.depth);
        let mut attentions = Vec::with_capacity(c.depth);
        for (l, blk) in idx.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, v(blk.ln1_g), v(blk.ln1_b), c.layer_norm_eps)?;
            let a = &blk.attn;
            let weights = AttentionWeights {
                wq: v(a[0]),
                bq: v(a[1]),
                wk: v(a[2]),
                bk: v(a[3]),
                wv: v(a[4]),
                bv: v(a[5]),
                wo: v(a[6]),
                bo: v(a[7]),
            };
            let masked = c.block_is_masked(l);
            let source = if !masked {
                MaskSource::None
            } else if c.mode.is_dynamic() {
                MaskSource::Gumbel {
                    cfg: &opts.gumbel,
                    rng: &mut *opts.rng,
                    st_gate: c.st_gate,
                }
            } else {
                MaskSource::Static
            };
            let out = masked_attention(tape, h, &weights, c.heads, c.mode, layout, source)?;
            x = tape.add(x, out.out)?;
            assignments.push(out.assignment);
            attentions.push(out.attention);

            let h = tape.layer_norm(x, v(blk.ln2_g), v(blk.ln2_b), c.layer_norm_eps)?;
            let h = tape.matmul(h, v(blk.fc1_w))?;
            let h = tape.add(h, v(blk.fc1_b))?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, v(blk.fc2_w))?;
            let h = tape.add(h, v(blk.fc2_b))?;
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, v(idx.norm_g), v(idx.norm_b), c.layer_norm_eps)?;

        let (feature, fusion_weights) = if let Some(qi) = idx.fusion_query {
            let n = layout.groups;
            let xg = tape.slice(x, 1, layout.group_offset(), n)?;
            let scores = tape.matmul(xg, v(qi))?;
            let scores = tape.reshape(scores, &[batch, n])?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let weights = tape.softmax(scores, 1)?;
            let w = tape.reshape(weights, &[batch, 1, n])?;
            let fused = tape.matmul(w, xg)?;
            (tape.reshape(fused, &[batch, d])?, Some(weights))
        } else {
            let cls = tape.slice(x, 1, 0, 1)?;
            (tape.reshape(cls, &[batch, d])?, None)
        };
        let logits = tape.matmul(feature, v(idx.head_w))?;
        let logits = tape.add(logits, v(idx.head_b))?;
        Ok(ModelOutput {
            logits,
            feature,
            fusion_weights,
            assignments,
            attentions,
        })
    }

    /// Noise-free forward on a fresh tape; returns `(logits, features)` as
    /// flat `[B, C]` and `[B, d]` buffers.
    pub fn infer(&self, images: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut opts = ForwardOptions {
            gumbel: GumbelConfig {
                noise_enabled: false,
                ..GumbelConfig::default()
            },
            rng: &mut rng,
        };
        let out = self.forward(&mut tape, &vars, images, &mut opts)?;
        Ok((tape.value(out.logits).to_vec(), tape.value(out.feature).to_vec()))
    }

    /// Noise-free hard group assignments per block, `None` for blocks
    /// without a dynamic mask. Each entry is `[B * M]`.
    pub fn eval_assignments(&self, images: &[f64]) -> Result<Vec<Option<Vec<usize>>>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut opts = ForwardOptions {
            gumbel: GumbelConfig {
                noise_enabled: false,
                ..GumbelConfig::default()
            },
            rng: &mut rng,
        };
        let out = self.forward(&mut tape, &vars, images, &mut opts)?;
        Ok(out.assignments.into_iter().map(|a| a.map(|a| a.hard)).collect())
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        self.params.entries("model.")
    }

    pub fn load_checkpoint_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.params.load_entries("model.", entries)
    }

    /// A model of shape `config` with every parameter read from `entries`.
    pub fn from_checkpoint(config: ModelConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, &mut rand::SeedableRng::seed_from_u64(0))?;
        model.load_checkpoint_entries(entries)?;
        Ok(model)
    }
}
