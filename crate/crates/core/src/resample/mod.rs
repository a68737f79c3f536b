//! Class-imbalance correction on the training split.
//!
//! Two strategies balance the image-level class counts: RUAO (undersample
//! the majority and oversample the minority to their midpoint) and SMOTE in
//! the latent space of a convolutional autoencoder, whose decoder turns
//! interpolated features back into images.

pub mod autoencoder;
pub mod smote;

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{BinaryLabel, Dataset};
use crate::seed;

pub use autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderModel};
pub use smote::{smote, Interpolation, SmoteConfig, SmoteOutput, SyntheticSample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResampleError {
    #[error("class {0:?} has no samples")]
    EmptyClass(BinaryLabel),
    #[error("minority class has {n} samples; SMOTE with k={k} needs at least max(2, k+1)")]
    MinorityTooSmall { n: usize, k: usize },
    #[error("autoencoder has not been trained")]
    UntrainedAutoencoder,
    #[error("autoencoder did not converge: initial MSE {initial:.5}, best {best:.5}, required <= {required:.5}")]
    NonConvergence { initial: f64, best: f64, required: f64 },
    #[error("autoencoder needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("no image for id {0:?}")]
    MissingImage(String),
    #[error("autoencoder: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    None,
    Ruao,
    Smote,
}

impl Strategy {
    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::None => "NO",
            Strategy::Ruao => "RUAO",
            Strategy::Smote => "SMOTE",
        }
    }
}

/// Image ids grouped by label. Ids are kept sorted so the index (and every
/// draw from it) does not depend on how the caller collected them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassIndex {
    pub negatives: Vec<String>,
    pub positives: Vec<String>,
}

impl ClassIndex {
    pub fn new(mut negatives: Vec<String>, mut positives: Vec<String>) -> Self {
        negatives.sort();
        negatives.dedup();
        positives.sort();
        positives.dedup();
        Self { negatives, positives }
    }

    pub fn from_labeled<'a>(items: impl IntoIterator<Item = (&'a str, BinaryLabel)>) -> Self {
        let (mut neg, mut pos) = (Vec::new(), Vec::new());
        for (id, l) in items {
            match l {
                BinaryLabel::Remission => neg.push(id.to_string()),
                BinaryLabel::Activity => pos.push(id.to_string()),
            }
        }
        Self::new(neg, pos)
    }

    /// All images of the given segments, labelled by their segment.
    pub fn from_segments<'a>(ds: &Dataset, segment_ids: impl IntoIterator<Item = &'a String>) -> Self {
        let items: Vec<(&str, BinaryLabel)> = segment_ids
            .into_iter()
            .filter_map(|s| ds.segments.get(s))
            .flat_map(|s| s.image_ids.iter().map(move |i| (i.as_str(), s.label)))
            .collect();
        Self::from_labeled(items)
    }

    pub fn n_neg(&self) -> usize {
        self.negatives.len()
    }

    pub fn n_pos(&self) -> usize {
        self.positives.len()
    }

    pub fn ids(&self, label: BinaryLabel) -> &[String] {
        match label {
            BinaryLabel::Remission => &self.negatives,
            BinaryLabel::Activity => &self.positives,
        }
    }

    /// Larger class; ties go to REMISSION.
    pub fn majority(&self) -> BinaryLabel {
        if self.n_pos() > self.n_neg() {
            BinaryLabel::Activity
        } else {
            BinaryLabel::Remission
        }
    }

    pub fn counts(&self) -> BTreeMap<BinaryLabel, usize> {
        BTreeMap::from([(BinaryLabel::Remission, self.n_neg()), (BinaryLabel::Activity, self.n_pos())])
    }

    fn require_both(&self) -> Result<(), ResampleError> {
        if self.negatives.is_empty() {
            return Err(ResampleError::EmptyClass(BinaryLabel::Remission));
        }
        if self.positives.is_empty() {
            return Err(ResampleError::EmptyClass(BinaryLabel::Activity));
        }
        Ok(())
    }
}

/// A resampled id multiset: each entry may repeat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resampled {
    pub negatives: Vec<String>,
    pub positives: Vec<String>,
}

impl Resampled {
    pub fn counts(&self) -> (usize, usize) {
        (self.negatives.len(), self.positives.len())
    }

    pub fn labeled(&self) -> impl Iterator<Item = (&str, BinaryLabel)> {
        self.negatives
            .iter()
            .map(|i| (i.as_str(), BinaryLabel::Remission))
            .chain(self.positives.iter().map(|i| (i.as_str(), BinaryLabel::Activity)))
    }
}

/// Target count for RUAO: the floor of the mean class size.
pub fn ruao_target(n_neg: usize, n_pos: usize) -> usize {
    (n_neg + n_pos) / 2
}

/// Random under- and over-sampling to `T = floor((n_neg + n_pos) / 2)`
/// per class. The larger class is subsampled without replacement. The
/// smaller class keeps every original once and fills the remainder with
/// draws with replacement.
pub fn ruao(index: &ClassIndex, seed: u64) -> Result<Resampled, ResampleError> {
    index.require_both()?;
    let t = ruao_target(index.n_neg(), index.n_pos());
    let mut rng = seed::rng_for(seed, "ruao");
    let mut take = |ids: &[String]| -> Vec<String> {
        if ids.len() >= t {
            let mut v: Vec<String> = ids.choose_multiple(&mut rng, t).cloned().collect();
            v.sort();
            v
        } else {
            let mut v = ids.to_vec();
            for _ in ids.len()..t {
                v.push(ids.choose(&mut rng).expect("nonempty").clone());
            }
            v.sort();
            v
        }
    };
    let negatives = take(&index.negatives);
    let positives = take(&index.positives);
    Ok(Resampled { negatives, positives })
}
