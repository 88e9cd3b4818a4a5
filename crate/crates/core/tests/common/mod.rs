//! Test-only numerical oracles shared by the integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samb::tensor::Tensor;

pub mod attention;
pub mod gradcheck;

/// Central finite-difference gradient of `f` with respect to every element
/// of every tensor in `params`.
pub fn numerical_grad(params: &mut [Tensor], step: f64, mut f: impl FnMut(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].numel()];
        for i in 0..g.len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + step;
            let plus = f(params);
            params[p].data_mut()[i] = orig - step;
            let minus = f(params);
            params[p].data_mut()[i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exactly-zero gradients
/// from dividing by zero.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n, floor))
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().into_param()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod tiny {
    use samb::attention::MessagePassingMode;
    use samb::data::{DomainData, SyntheticSpec};
    use samb::model::ModelConfig;
    use samb::trainer::{Scheme, TrainConfig};

    /// 8×8 images in 4 classes, 24 training samples per domain.
    pub fn spec() -> SyntheticSpec {
        SyntheticSpec {
            image_size: 8,
            train_per_class: 6,
            eval_per_class: 4,
            ..SyntheticSpec::default()
        }
    }

    pub fn data() -> DomainData {
        DomainData::generate(&spec()).unwrap()
    }

    /// One-block model over four patch tokens; a few steps run in
    /// milliseconds.
    pub fn config(mode: MessagePassingMode, scheme: Scheme, it1: usize, it2: usize) -> TrainConfig {
        TrainConfig {
            scheme,
            iterations_1: it1,
            iterations_2: it2,
            batch_size: 8,
            lr: 0.05,
            model: ModelConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                num_group_tokens: 2,
                masked_depth: 1,
                mode,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }
}
