//! Adversarial feature alignment: domain discriminator, gradient-reversal
//! schedule and the domain classification loss.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{constant, xavier_uniform, ParamSet};
use crate::tensor::{Tape, Var};

/// Clamp applied to the arguments of both logarithms in the domain loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Warm-up schedule `λ(p) = λ_max·(2/(1+exp(−γ·p)) − 1)` over training
/// progress `p ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlConfig {
    pub lambda_max: f64,
    pub gamma: f64,
    /// Use `λ_max` from the first step.
    pub constant: bool,
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig {
            lambda_max: 1.0,
            gamma: 10.0,
            constant: false,
        }
    }
}

impl GrlConfig {
    pub fn lambda(&self, progress: f64) -> f64 {
        if self.constant {
            return self.lambda_max;
        }
        let p = progress.clamp(0.0, 1.0);
        self.lambda_max * (2.0 / (1.0 + (-self.gamma * p).exp()) - 1.0)
    }
}

/// Two-layer MLP `d → hidden → 1` with GELU and a sigmoid head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        params.add("fc1.weight", xavier_uniform(rng, dim, hidden));
        params.add("fc1.bias", constant(&[hidden], 0.0));
        params.add("fc2.weight", xavier_uniform(rng, hidden, 1));
        params.add("fc2.bias", constant(&[1], 0.0));
        Discriminator { params }
    }

    /// Source-domain probability `[B]` for features `[B, d]`; `vars` come
    /// from binding `self.params`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], feat: Var) -> Result<Var> {
        let b = tape.shape(feat)[0];
        let h = tape.matmul(feat, vars[0])?;
        let h = tape.add(h, vars[1])?;
        let h = tape.gelu(h);
        let z = tape.matmul(h, vars[2])?;
        let z = tape.add(z, vars[3])?;
        let p = tape.sigmoid(z);
        tape.reshape(p, &[b])
    }
}

/// `−mean_s log D_s − mean_t log(1 − D_t)` from discriminator outputs.
pub fn domain_loss_from_probs(tape: &mut Tape, d_source: Var, d_target: Var) -> Result<Var> {
    if tape.value(d_source).is_empty() || tape.value(d_target).is_empty() {
        return Err(Error::Contract(
            "domain loss needs nonempty source and target batches".into(),
        ));
    }
    let ls = tape.log_clamped(d_source, LOG_CLAMP);
    let ls = tape.mean(ls)?;
    let one_minus = tape.affine(d_target, -1.0, 1.0);
    let lt = tape.log_clamped(one_minus, LOG_CLAMP);
    let lt = tape.mean(lt)?;
    let s = tape.add(ls, lt)?;
    Ok(tape.scale(s, -1.0))
}

/// Domain loss on features: both batches pass through `disc`.
pub fn domain_loss(tape: &mut Tape, feat_s: Var, feat_t: Var, disc: &Discriminator, disc_vars: &[Var]) -> Result<Var> {
    if tape.shape(feat_s)[0] == 0 || tape.shape(feat_t)[0] == 0 {
        return Err(Error::Contract(
            "domain loss needs nonempty source and target batches".into(),
        ));
    }
    let ds = disc.forward(tape, disc_vars, feat_s)?;
    let dt = disc.forward(tape, disc_vars, feat_t)?;
    domain_loss_from_probs(tape, ds, dt)
}

/// Pieces of the adversarial objective recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct AdaLoss {
    pub total: Var,
    pub classification: Var,
    pub domain: Var,
}

/// `L_cls(source) + L_D(grl(f_s), grl(f_t))`: a single backward pass
/// trains the discriminator to minimize `L_D` while the reversal makes the
/// feature extractor maximize it.
#[allow(clippy::too_many_arguments)]
pub fn ada_objective(
    tape: &mut Tape,
    source_logits: Var,
    source_labels: &[usize],
    feat_s: Var,
    feat_t: Var,
    disc: &Discriminator,
    disc_vars: &[Var],
    lambda: f64,
) -> Result<AdaLoss> {
    let classification = tape.cross_entropy(source_logits, source_labels)?;
    let rs = tape.grl(feat_s, lambda);
    let rt = tape.grl(feat_t, lambda);
    let domain = domain_loss(tape, rs, rt, disc, disc_vars)?;
    let total = tape.add(classification, domain)?;
    Ok(AdaLoss {
        total,
        classification,
        domain,
    })
}
