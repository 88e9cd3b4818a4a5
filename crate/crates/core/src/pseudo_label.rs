//! Target pseudo-labels from probability-weighted k-means centers followed
//! by one hard-assignment refinement round.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::argmax;
use crate::error::{Error, Result};

/// Below this total weight a class counts as empty.
pub const EMPTY_CLASS_WEIGHT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(Error::Config(format!("unknown distance metric {s:?}"))),
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    /// Cosine: `1 − a·b/(|a||b|)`; Euclidean: `|a − b|`.
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Cosine => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::Numeric("cosine distance of a zero-norm vector".into()));
                }
                Ok(1.0 - dot(a, b) / (na * nb))
            }
            Metric::Euclidean => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Weighted centers `c_k = Σ_i δ_k^i f_i / Σ_i δ_k^i` over `feats [T, d]`
/// and `probs [T, K]`. Returns the centers `[K, d]` and the indices of
/// classes whose total weight fell below [`EMPTY_CLASS_WEIGHT`]; such a
/// class takes the feature of the sample with the largest probability for
/// it.
pub fn weighted_centers(feats: &[f64], probs: &[f64], dim: usize, classes: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if dim == 0 || classes == 0 || !feats.len().is_multiple_of(dim) {
        return Err(Error::shape("weighted_centers", &[feats.len()], &[dim]));
    }
    let t = feats.len() / dim;
    if probs.len() != t * classes {
        return Err(Error::shape("weighted_centers", &[probs.len()], &[t, classes]));
    }
    let mut centers = vec![0.0; classes * dim];
    let mut weight = vec![0.0; classes];
    for i in 0..t {
        let f = &feats[i * dim..(i + 1) * dim];
        for k in 0..classes {
            let w = probs[i * classes + k];
            weight[k] += w;
            for (c, x) in centers[k * dim..(k + 1) * dim].iter_mut().zip(f) {
                *c += w * x;
            }
        }
    }
    let mut empty = Vec::new();
    for k in 0..classes {
        let c = &mut centers[k * dim..(k + 1) * dim];
        if weight[k] < EMPTY_CLASS_WEIGHT {
            empty.push(k);
            if t > 0 {
                let best = (0..t)
                    .max_by(|&a, &b| {
                        probs[a * classes + k]
                            .total_cmp(&probs[b * classes + k])
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                c.copy_from_slice(&feats[best * dim..(best + 1) * dim]);
            }
        } else {
            c.iter_mut().for_each(|x| *x /= weight[k]);
        }
    }
    Ok((centers, empty))
}

/// Nearest center per sample (ties to the lower index) and its distance.
pub fn assign_labels(feats: &[f64], centers: &[f64], dim: usize, metric: Metric) -> Result<(Vec<usize>, Vec<f64>)> {
    if centers.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite cluster center".into()));
    }
    let k = centers.len() / dim;
    let mut labels = Vec::with_capacity(feats.len() / dim);
    let mut dists = Vec::with_capacity(feats.len() / dim);
    for f in feats.chunks(dim) {
        let d = (0..k)
            .map(|j| metric.distance(f, &centers[j * dim..(j + 1) * dim]).map(|x| -x))
            .collect::<Result<Vec<f64>>>()?;
        let best = argmax(&d);
        labels.push(best);
        dists.push(-d[best]);
    }
    Ok((labels, dists))
}

/// Hard-label class means; a class with no members keeps `previous`.
pub fn hard_centers(feats: &[f64], labels: &[usize], dim: usize, previous: &[f64]) -> Vec<f64> {
    let k = previous.len() / dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (f, &y) in feats.chunks(dim).zip(labels) {
        counts[y] += 1;
        for (s, x) in sums[y * dim..(y + 1) * dim].iter_mut().zip(f) {
            *s += x;
        }
    }
    for j in 0..k {
        let c = &mut sums[j * dim..(j + 1) * dim];
        if counts[j] == 0 {
            c.copy_from_slice(&previous[j * dim..(j + 1) * dim]);
        } else {
            c.iter_mut().for_each(|x| *x /= counts[j] as f64);
        }
    }
    sums
}

/// One refinement round: hard-label means, then re-assignment.
pub fn refine(
    feats: &[f64],
    labels: &[usize],
    centers: &[f64],
    dim: usize,
    metric: Metric,
) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let refined = hard_centers(feats, labels, dim, centers);
    let (labels, dists) = assign_labels(feats, &refined, dim, metric)?;
    Ok((refined, labels, dists))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelTable {
    pub sample_ids: Vec<u32>,
    pub initial: Vec<usize>,
    pub refined: Vec<usize>,
    /// Distance to the refined center of the refined label.
    pub distance: Vec<f64>,
    pub max_prob: Vec<f64>,
    pub centers: Vec<f64>,
    pub refined_centers: Vec<f64>,
    pub empty_classes: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl PseudoLabelTable {
    /// Builds the table from target features `[T, d]` and classifier
    /// probabilities `[T, K]`.
    pub fn build(
        sample_ids: &[u32],
        feats: &[f64],
        probs: &[f64],
        dim: usize,
        classes: usize,
        metric: Metric,
    ) -> Result<Self> {
        let (centers, empty_classes) = weighted_centers(feats, probs, dim, classes)?;
        let (initial, _) = assign_labels(feats, &centers, dim, metric)?;
        let (refined_centers, refined, distance) = refine(feats, &initial, &centers, dim, metric)?;
        let max_prob = probs
            .chunks(classes)
            .map(|r| r.iter().cloned().fold(0.0, f64::max))
            .collect();
        Ok(PseudoLabelTable {
            sample_ids: sample_ids.to_vec(),
            initial,
            refined,
            distance,
            max_prob,
            centers,
            refined_centers,
            empty_classes,
            dim,
            classes,
        })
    }

    /// True when every sample carries the same refined label.
    pub fn is_degenerate(&self) -> bool {
        self.refined.windows(2).all(|w| w[0] == w[1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,y_t,y_t_star,distance,max_prob\n");
        for i in 0..self.refined.len() {
            writeln!(
                s,
                "{},{},{},{},{}",
                self.sample_ids[i], self.initial[i], self.refined[i], self.distance[i], self.max_prob[i]
            )
            .unwrap();
        }
        s
    }
}
