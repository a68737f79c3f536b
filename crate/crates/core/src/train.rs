//! Supervised training with cross-entropy, per-epoch validation and
//! best-epoch checkpoint selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SavedMetrics};
use crate::domain::BinaryLabel;
use crate::evaluate::{self, EvalError, EvalSegment};
use crate::models::Network;
use crate::preprocess::augment;
use crate::{seed, Image};
use remission_nn::optim::{clip_grad_norm, Adam, Optimizer, SgdMomentum};
use remission_nn::{Graph, Tensor};

pub const GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Auc,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 32, epochs: 50, optimizer: OptimizerKind::Adam, seed: 0, selection_metric: SelectionMetric::Auc }
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn full_scale() -> Self {
        Self { batch_size: 128, epochs: 400, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training set lacks class {0:?}")]
    MissingClass(BinaryLabel),
    #[error("image {id} has shape {shape:?}, expected [{size}, {size}, 3]")]
    BadImage { id: String, shape: Vec<usize>, size: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: BinaryLabel,
}

/// Training samples (possibly with repeats after resampling) and whether to
/// draw a fresh D4 augmentation per sample and epoch.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub samples: Vec<Sample>,
    pub augment_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_sensitivity: Option<f64>,
    pub val_specificity: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records, best_epoch: None })
    }
}

/// Mean of `-log softmax(logits)[label]` over the batch, in `f64`.
pub fn cross_entropy(logits: &Tensor<f32>, labels: &[BinaryLabel]) -> f64 {
    let c = logits.shape()[1];
    assert_eq!(logits.shape()[0], labels.len());
    let total: f64 = logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, l)| {
            let m = row.iter().map(|&v| f64::from(v)).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (f64::from(v) - m).exp()).sum::<f64>().ln();
            lse - f64::from(row[l.index()])
        })
        .sum();
    total / labels.len() as f64
}

fn selection_key(r: &EpochRecord, metric: SelectionMetric) -> (f64, f64) {
    let primary = match metric {
        SelectionMetric::Auc => r.val_auc,
        SelectionMetric::Accuracy => r.val_accuracy,
    };
    (primary.unwrap_or(f64::NEG_INFINITY), r.val_accuracy.unwrap_or(f64::NEG_INFINITY))
}

/// Index of the selected record: maximal selection metric, then maximal
/// accuracy, then the earliest epoch.
pub fn select_best(records: &[EpochRecord], metric: SelectionMetric) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => selection_key(r, metric) > selection_key(&records[b], metric),
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Batch order for an epoch: a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(seed, &format!("epoch-{epoch}")));
    order
}

fn check_images(net: &Network<f32>, train: &TrainSet, val: &[EvalSegment]) -> Result<(), TrainError> {
    let s = net.config.input_size;
    let want = [s, s, 3];
    let bad = |id: &str, img: &Image| TrainError::BadImage { id: id.to_string(), shape: img.shape().to_vec(), size: s };
    if let Some(x) = train.samples.iter().find(|x| x.image.shape() != want) {
        return Err(bad(&x.id, &x.image));
    }
    for seg in val {
        if let Some(img) = seg.images.iter().find(|i| i.shape() != want) {
            return Err(bad(&seg.segment_id, img));
        }
    }
    Ok(())
}

/// Train `net` in place and return the best checkpoint with the full log.
/// On return `net` holds the weights of the selected epoch.
pub fn train(net: &mut Network<f32>, train: &TrainSet, val: &[EvalSegment], cfg: &TrainConfig, config_digest: &str) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    if train.samples.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    for label in [BinaryLabel::Remission, BinaryLabel::Activity] {
        if !train.samples.iter().any(|s| s.label == label) {
            return Err(TrainError::MissingClass(label));
        }
    }
    check_images(net, train, val)?;

    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(cfg.lr)),
        OptimizerKind::SgdMomentum => Box::new(SgdMomentum::new(cfg.lr, 0.9)),
    };
    let s = net.config.input_size;
    let per = s * s * 3;
    let mut log = TrainLog::default();
    let mut best: Option<(usize, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.samples.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut buf = Vec::with_capacity(chunk.len() * per);
            let mut labels = Vec::with_capacity(chunk.len());
            for (pos, &i) in chunk.iter().enumerate() {
                let sample = &train.samples[i];
                match train.augment_seed {
                    Some(a) => {
                        let key = seed::derive(a, &format!("{epoch}:{}:{pos}:{i}", sample.id));
                        buf.extend_from_slice(augment(&sample.image, key).0.data());
                    }
                    None => buf.extend_from_slice(sample.image.data()),
                }
                labels.push(sample.label.index());
            }
            let batch = Tensor::from_vec([chunk.len(), s, s, 3], buf).expect("batch shape");
            let (loss, mut grads) = {
                let mut g = Graph::new(&net.params);
                let x = g.input(batch);
                let y = net.logits(&mut g, x);
                let l = g.cross_entropy(y, &labels);
                (f64::from(g.value(l).item()), g.backward(l).param_grads(&net.params))
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            clip_grad_norm(&mut grads, GRAD_CLIP);
            opt.step(&mut net.params, &grads);
        }
        let report = evaluate::evaluate_split(net, val, config_digest, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.samples.len() as f64,
            val_accuracy: report.accuracy,
            val_sensitivity: report.sensitivity,
            val_specificity: report.specificity,
            val_auc: report.auc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val acc {:?} auc {:?}",
            record.train_loss,
            record.val_accuracy,
            record.val_auc
        );
        log.records.push(record);
        if select_best(&log.records, cfg.selection_metric) == Some(epoch) {
            let metrics = SavedMetrics { accuracy: report.accuracy, sensitivity: report.sensitivity, specificity: report.specificity, auc: report.auc };
            best = Some((epoch, Checkpoint::from_network(net, epoch, metrics, config_digest)));
        }
    }
    let (best_epoch, ckpt) = best.expect("at least one epoch");
    log.best_epoch = Some(best_epoch);
    *net = ckpt.network().expect("checkpoint built from this network");
    Ok((ckpt, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use BinaryLabel::{Activity as A, Remission as R};

    #[test]
    fn cross_entropy_examples() {
        let l = |v: [f32; 2], y| cross_entropy(&Tensor::from_vec([1, 2], v.to_vec()).unwrap(), &[y]);
        assert!((l([0.0, 0.0], R) - std::f64::consts::LN_2).abs() < 1e-12);
        let confident = l([20.0, -20.0], R);
        assert!((0.0..1e-8).contains(&confident));
        let both = cross_entropy(&Tensor::from_vec([2, 2], vec![0.0, 0.0, 20.0, -20.0]).unwrap(), &[R, R]);
        assert!((both - (std::f64::consts::LN_2 + confident) / 2.0).abs() < 1e-9);
        assert!(l([3.0, -1.0], A) > 0.0);
    }

    fn rec(epoch: usize, acc: f64, auc: Option<f64>) -> EpochRecord {
        EpochRecord { epoch, train_loss: 0.0, val_accuracy: Some(acc), val_sensitivity: None, val_specificity: None, val_auc: auc }
    }

    #[test]
    fn selection_tie_breaks() {
        let r = vec![rec(0, 0.5, Some(0.8)), rec(1, 0.7, Some(0.9)), rec(2, 0.8, Some(0.9)), rec(3, 0.8, Some(0.9)), rec(4, 0.9, Some(0.85))];
        assert_eq!(select_best(&r, SelectionMetric::Auc), Some(2));
        assert_eq!(select_best(&r, SelectionMetric::Accuracy), Some(4));
        let undefined = vec![rec(0, 0.6, None), rec(1, 0.5, Some(0.1))];
        assert_eq!(select_best(&undefined, SelectionMetric::Auc), Some(1));
    }

    #[test]
    fn epoch_order_is_a_pure_permutation() {
        let a = epoch_order(50, 3, 7);
        assert_eq!(a, epoch_order(50, 3, 7));
        assert_ne!(a, epoch_order(50, 3, 8));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::full_scale().validate().is_ok());
    }
}
