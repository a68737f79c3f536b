//! SMOTE in autoencoder feature space.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutoencoderModel, ClassIndex, ResampleError, Resampled};
use crate::domain::BinaryLabel;
use crate::{seed, Image};
use remission_nn::Tensor;

/// How the interpolation coefficient `u` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// `u ~ U(0, 1)`.
    #[default]
    Uniform,
    /// A constant `u`, for probing the endpoints.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoteConfig {
    pub k: usize,
    pub interpolation: Interpolation,
    pub seed: u64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self { k: 5, interpolation: Interpolation::Uniform, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub label: BinaryLabel,
    pub base: String,
    pub neighbour: String,
    pub u: f64,
    pub base_feature: Vec<f64>,
    pub neighbour_feature: Vec<f64>,
    /// `base + u * (neighbour - base)`.
    pub feature: Vec<f64>,
    pub image: Image,
}

#[derive(Debug, Clone)]
pub struct SmoteOutput {
    /// Every original training id, once.
    pub originals: Resampled,
    pub synthetic: Vec<SyntheticSample>,
}

impl SmoteOutput {
    /// Final per-class counts `(remission, activity)`.
    pub fn counts(&self) -> (usize, usize) {
        let (mut n, mut p) = self.originals.counts();
        for s in &self.synthetic {
            match s.label {
                BinaryLabel::Remission => n += 1,
                BinaryLabel::Activity => p += 1,
            }
        }
        (n, p)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest other points of `i`; ties broken by index.
pub fn nearest_neighbours(features: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = features.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, f)| (dist2(&features[i], f), j)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Oversample the minority class up to the majority count with decoded
/// interpolations of minority features.
pub fn smote(index: &ClassIndex, images: &BTreeMap<String, Image>, ae: &AutoencoderModel, cfg: &SmoteConfig) -> Result<SmoteOutput, ResampleError> {
    if !ae.is_trained() {
        return Err(ResampleError::UntrainedAutoencoder);
    }
    let majority = index.majority();
    let minority = BinaryLabel::from_index(1 - majority.index());
    let min_ids = index.ids(minority);
    let n_min = min_ids.len();
    if n_min < 2 || cfg.k == 0 || cfg.k > n_min - 1 {
        return Err(ResampleError::MinorityTooSmall { n: n_min, k: cfg.k });
    }
    let originals = Resampled { negatives: index.negatives.clone(), positives: index.positives.clone() };
    let needed = index.ids(majority).len() - n_min;
    if needed == 0 {
        return Ok(SmoteOutput { originals, synthetic: Vec::new() });
    }
    let imgs: Vec<&Image> = min_ids.iter().map(|id| images.get(id).ok_or_else(|| ResampleError::MissingImage(id.clone()))).collect::<Result<_, _>>()?;
    let feats = ae.encode(&imgs);
    let d = ae.latent_dim();
    let features: Vec<Vec<f64>> = feats.data().chunks(d).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    let neighbours: Vec<Vec<usize>> = (0..n_min).map(|i| nearest_neighbours(&features, i, cfg.k)).collect();

    let mut rng = seed::rng_for(cfg.seed, "smote");
    let mut picks = Vec::with_capacity(needed);
    for _ in 0..needed {
        let i = rng.random_range(0..n_min);
        let j = neighbours[i][rng.random_range(0..cfg.k)];
        let u = match cfg.interpolation {
            Interpolation::Uniform => rng.random::<f64>(),
            Interpolation::Fixed(u) => u,
        };
        let f: Vec<f64> = features[i].iter().zip(&features[j]).map(|(a, b)| a + u * (b - a)).collect();
        picks.push((i, j, u, f));
    }
    let flat: Vec<f32> = picks.iter().flat_map(|p| p.3.iter().map(|&v| v as f32)).collect();
    let decoded = ae.decode(&Tensor::from_vec([needed, d], flat).expect("feature batch"));
    let synthetic = picks
        .into_iter()
        .zip(decoded)
        .enumerate()
        .map(|(s, ((i, j, u, feature), image))| SyntheticSample {
            id: format!("{}-syn{:04}", min_ids[i], s),
            label: minority,
            base: min_ids[i].clone(),
            neighbour: min_ids[j].clone(),
            u,
            base_feature: features[i].clone(),
            neighbour_feature: features[j].clone(),
            feature,
            image,
        })
        .collect();
    Ok(SmoteOutput { originals, synthetic })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbours_exclude_self_and_sort() {
        let f = vec![vec![0.0], vec![1.0], vec![3.0], vec![-0.5]];
        assert_eq!(nearest_neighbours(&f, 0, 2), vec![3, 1]);
        assert_eq!(nearest_neighbours(&f, 2, 3), vec![1, 0, 3]);
    }
}
