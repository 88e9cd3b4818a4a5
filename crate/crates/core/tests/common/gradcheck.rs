//! Finite-difference checks of a small transformer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samb::attention::{GumbelConfig, MessagePassingMode};
use samb::model::{ForwardOptions, ModelConfig, VisionTransformer};
use samb::tensor::{Tape, Tensor};

use super::{max_rel_err, numerical_grad};

pub fn small_model(mode: MessagePassingMode) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 2,
        in_channels: 3,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 4,
        num_classes: 3,
        num_group_tokens: 4,
        mode,
        masked_depth: 2,
        st_gate: false,
        layer_norm_eps: 1e-6,
    }
}

pub fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..batch * cfg.image_numel()).map(|_| r.random::<f64>()).collect()
}

pub fn loss_and_grads(
    model: &VisionTransformer,
    params: &[Tensor],
    x: &[f64],
    labels: &[usize],
    gumbel: GumbelConfig,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|t| tape.leaf(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(gumbel.rng_seed);
    let mut opts = ForwardOptions { gumbel, rng: &mut rng };
    let out = model.forward(&mut tape, &vars, x, &mut opts).unwrap();
    let loss = tape.cross_entropy(out.logits, labels).unwrap();
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(params)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (tape.value(loss)[0], grads)
}

/// Checks every parameter of a 2-block, d=16 model against central
/// differences with step 1e-4; returns the worst parameter and its maximum
/// relative error.
pub fn gradient_check(mode: MessagePassingMode, gumbel: GumbelConfig) -> (String, f64) {
    let cfg = small_model(mode);
    let model = VisionTransformer::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    // Scale up the tiny init so every path carries a visible gradient.
    let mut params: Vec<Tensor> = model.params.tensors().to_vec();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for (name, p) in model.params.names().iter().zip(&mut params) {
        if !name.contains("norm") {
            p.data_mut().iter_mut().for_each(|x| *x = r.random_range(-0.5..0.5));
        }
    }
    let x = images(&cfg, 2, 7);
    let labels = [0, 2];
    let (_, analytic) = loss_and_grads(&model, &params, &x, &labels, gumbel);
    let numeric = numerical_grad(&mut params, 1e-4, |ps| {
        loss_and_grads(&model, ps, &x, &labels, gumbel).0
    });
    let mut worst = (String::new(), 0.0f64);
    for ((name, a), n) in model.params.names().iter().zip(&analytic).zip(&numeric) {
        let e = max_rel_err(a, n, 1e-6);
        if e >= worst.1 {
            worst = (name.clone(), e);
        }
    }
    worst
}
