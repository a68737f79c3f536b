//! Experiment configuration, single runs, the ablation grid and merged
//! reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::domain::{self, make_split, BinaryLabel, Dataset, DatasetSplit, SplitUnit};
use crate::evaluate::{self, render_table, EvalReport, EvalSegment, TableRow};
use crate::models::{self, ModelConfig};
use crate::preprocess::{Pipeline, PreprocessConfig};
use crate::resample::{self, AutoencoderConfig, ClassIndex, SmoteConfig, Strategy};
use crate::synth::{self, SynthConfig};
use crate::train::{self, Sample, TrainConfig, TrainLog, TrainSet};
use crate::{seed, Image};

/// Pipeline stage an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Split,
    Preprocess,
    Resample,
    Train,
    Evaluate,
    Output,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::Split => "split",
            Stage::Preprocess => "preprocess",
            Stage::Resample => "resample",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Output => "output",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Stage { .. } => 3,
        }
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Stage { stage, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Load this manifest instead of generating synthetic data.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Shuffle segment labels before splitting (null-model control).
    pub permute_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// `(train, validation, test)` unit counts; omitted means the reference
    /// proportions 103 : 16 : 35.
    pub sizes: Option<[usize; 3]>,
    pub seed: u64,
    pub unit: SplitUnit,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { sizes: None, seed: 7, unit: SplitUnit::Segment }
    }
}

/// Split sizes proportional to 103 : 16 : 35, each at least one when `n >= 3`.
pub fn proportional_sizes(n: usize) -> [usize; 3] {
    let part = |w: usize| ((n * w) as f64 / 154.0).round() as usize;
    let (mut val, mut test) = (part(16), part(35));
    if n >= 3 {
        val = val.max(1);
        test = test.max(1);
    }
    let train = n.saturating_sub(val + test);
    [train, val, test]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub strategy: Strategy,
    pub smote: SmoteConfig,
    pub autoencoder: AutoencoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate on the test split only instead of validation + test.
    pub test_only: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { test_only: false, batch_size: 64 }
    }
}

/// Display labels for the results table. Not part of the digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RowLabels {
    pub id: String,
    pub backbone: String,
    pub image_size: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub row: RowLabels,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub resample: ResampleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk scale: study-shaped synthetic cohort, 64 px, batch 32, 20 epochs.
    pub fn desk() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            row: RowLabels::default(),
            data: DataConfig { manifest: None, synth: SynthConfig::study_shaped(1), permute_labels: false },
            split: SplitConfig::default(),
            preprocess: PreprocessConfig { target_size: 64, custom_size: true, ..PreprocessConfig::default() },
            resample: ResampleConfig { strategy: Strategy::Ruao, ..ResampleConfig::default() },
            model: ModelConfig::ours_desk(),
            train: TrainConfig { epochs: 20, batch_size: 32, ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }

    /// Seconds-scale smoke run: 24 segments at 32 px, 2 epochs.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from("runs/smoke");
        c.data.synth = SynthConfig { n_patients: 12, segments_per_patient: [2, 2], image_size: 32, ..SynthConfig::default() };
        c.preprocess.target_size = 32;
        c.model = ModelConfig::ours_desk().with_input_size(32);
        c.train.epochs = 2;
        c.train.batch_size = 16;
        c.resample.autoencoder = AutoencoderConfig { work_size: 16, channels: [8, 16, 16], epochs: 5, ..AutoencoderConfig::default() };
        c
    }

    pub fn preset(name: &str) -> Result<Self, ExperimentError> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" | "quick" => Ok(Self::smoke()),
            _ => Err(ExperimentError::Config(format!("unknown preset {name:?} (expected desk or smoke)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Read a config file, layering it over `base` when given.
    pub fn load(path: &Path, base: Option<Self>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        match base {
            None => Self::from_toml(&text),
            Some(base) => {
                let over: toml::Table = toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?;
                let mut v = base.to_toml_value();
                merge(&mut v, over);
                Self::from_toml_value(v)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    fn to_toml_value(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to TOML")
    }

    fn from_toml_value(t: toml::Table) -> Result<Self, ExperimentError> {
        toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))
    }

    /// Apply `dotted.key=value` overrides. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self, ExperimentError> {
        let mut t = self.to_toml_value();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ExperimentError::Config(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut cur = &mut t;
            for p in &parts[..parts.len() - 1] {
                let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                cur = entry.as_table_mut().ok_or_else(|| ExperimentError::Config(format!("{key}: {p} is not a table")))?;
            }
            cur.insert(parts[parts.len() - 1].to_string(), value);
        }
        Self::from_toml_value(t)
    }

    /// SHA-256 over the canonical (sorted-key JSON) form of every field that
    /// influences results; `output_dir` and `row` are excluded.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            o.remove("row");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = |e: String| ExperimentError::Config(e);
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.preprocess.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        if self.data.manifest.is_none() {
            self.data.synth.validate().map_err(|e| cfg(e.to_string()))?;
        }
        if self.model.input_size != self.preprocess.target_size {
            return Err(cfg(format!("model.input_size {} differs from preprocess.target_size {}", self.model.input_size, self.preprocess.target_size)));
        }
        if self.eval.batch_size == 0 {
            return Err(cfg("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> RowLabels {
        let s = self.preprocess.target_size;
        RowLabels {
            id: if self.row.id.is_empty() { "run".into() } else { self.row.id.clone() },
            backbone: if self.row.backbone.is_empty() { self.model.family.name().into() } else { self.row.backbone.clone() },
            image_size: if self.row.image_size.is_empty() { format!("[{s}, {s}]") } else { self.row.image_size.clone() },
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Loaded dataset plus the effective segment labels.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// Effective label per segment (differs from the grade-derived label
    /// only when labels are permuted).
    pub labels: BTreeMap<String, BinaryLabel>,
    pub digest: String,
}

/// Generate or load the dataset. Synthetic data is written to `<out>/data`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData, ExperimentError> {
    let dataset = match &cfg.data.manifest {
        Some(path) => domain::load_manifest(path).map_err(at(Stage::Data))?,
        None => synth::generate(&cfg.data.synth, &cfg.output_dir.join("data")).map_err(at(Stage::Data))?,
    };
    let mut labels: BTreeMap<String, BinaryLabel> = dataset.segments.values().map(|s| (s.segment_id.clone(), s.label)).collect();
    if cfg.data.permute_labels {
        use rand::seq::SliceRandom;
        let mut values: Vec<BinaryLabel> = labels.values().copied().collect();
        values.shuffle(&mut seed::rng_for(cfg.split.seed, "permute-labels"));
        for (v, l) in labels.values_mut().zip(values) {
            *v = l;
        }
    }
    let mut h = Sha256::new();
    h.update(dataset.to_manifest().as_bytes());
    for (s, l) in &labels {
        h.update(format!("{s}={}\n", l.index()).as_bytes());
    }
    Ok(LoadedData { dataset, labels, digest: hex::encode(h.finalize()) })
}

pub fn split_data(cfg: &ExperimentConfig, data: &LoadedData) -> Result<DatasetSplit, ExperimentError> {
    let segs = data.dataset.segment_list();
    let units = match cfg.split.unit {
        SplitUnit::Segment => segs.len(),
        SplitUnit::Patient => data.dataset.patients.len(),
    };
    let sizes = cfg.split.sizes.unwrap_or_else(|| proportional_sizes(units));
    make_split(&segs, sizes, cfg.split.seed, cfg.split.unit).map_err(at(Stage::Split))
}

/// Load and run the deterministic preprocessing chain on every image.
pub fn prepare_images(cfg: &ExperimentConfig, data: &LoadedData) -> Result<BTreeMap<String, Image>, ExperimentError> {
    let pipe = Pipeline::new(cfg.preprocess.clone()).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    for rec in data.dataset.images.values() {
        let raw = data.dataset.load_pixels(rec).map_err(at(Stage::Preprocess))?;
        out.insert(rec.image_id.clone(), pipe.prepare(&raw).map_err(at(Stage::Preprocess))?);
    }
    Ok(out)
}

fn eval_segments<'a>(data: &LoadedData, images: &BTreeMap<String, Image>, ids: impl IntoIterator<Item = &'a String>) -> Vec<EvalSegment> {
    ids.into_iter()
        .map(|sid| {
            let seg = &data.dataset.segments[sid];
            EvalSegment { segment_id: sid.clone(), truth: data.labels[sid], images: seg.image_ids.iter().map(|i| images[i].clone()).collect() }
        })
        .collect()
}

/// Segments evaluated for the headline numbers: validation + test, or the
/// test split alone.
pub fn eval_ids(split: &DatasetSplit, test_only: bool) -> Vec<String> {
    let mut ids: Vec<String> = split.test.iter().cloned().collect();
    if !test_only {
        ids.extend(split.validation.iter().cloned());
    }
    ids.sort();
    ids
}

/// Per-class training samples after the configured resampling.
pub fn build_train_set(cfg: &ExperimentConfig, data: &LoadedData, split: &DatasetSplit, images: &BTreeMap<String, Image>) -> Result<TrainSet, ExperimentError> {
    let items: Vec<(&str, BinaryLabel)> =
        split.train.iter().flat_map(|sid| data.dataset.segments[sid].image_ids.iter().map(move |i| (i.as_str(), data.labels[sid]))).collect();
    let index = ClassIndex::from_labeled(items);
    let sample = |id: &str, label| Sample { id: id.to_string(), image: images[id].clone(), label };
    let samples = match cfg.resample.strategy {
        Strategy::None => index.negatives.iter().map(|i| sample(i, BinaryLabel::Remission)).chain(index.positives.iter().map(|i| sample(i, BinaryLabel::Activity))).collect(),
        Strategy::Ruao => {
            let r = resample::ruao(&index, cfg.train.seed).map_err(at(Stage::Resample))?;
            log::info!("ruao: {:?} -> {:?}", (index.n_neg(), index.n_pos()), r.counts());
            r.labeled().map(|(i, l)| sample(i, l)).collect()
        }
        Strategy::Smote => {
            let train_imgs: Vec<&Image> = index.negatives.iter().chain(&index.positives).map(|i| &images[i]).collect();
            let ae_cfg = AutoencoderConfig { seed: cfg.train.seed, ..cfg.resample.autoencoder.clone() };
            let ae = resample::train_autoencoder(&train_imgs, ae_cfg, cfg.preprocess.target_size).map_err(at(Stage::Resample))?;
            let n_min = index.n_neg().min(index.n_pos());
            let k = cfg.resample.smote.k.min(n_min.saturating_sub(1)).max(1);
            if k != cfg.resample.smote.k {
                log::warn!("smote: k reduced from {} to {k} for a minority of {n_min}", cfg.resample.smote.k);
            }
            let sc = SmoteConfig { k, seed: cfg.train.seed, ..cfg.resample.smote.clone() };
            let out = resample::smote(&index, images, &ae, &sc).map_err(at(Stage::Resample))?;
            log::info!("smote: {:?} -> {:?}", (index.n_neg(), index.n_pos()), out.counts());
            write_synthetic(cfg, data, &out).map_err(at(Stage::Output))?;
            let mut v: Vec<Sample> = out.originals.labeled().map(|(i, l)| sample(i, l)).collect();
            v.extend(out.synthetic.into_iter().map(|s| Sample { id: s.id, image: s.image, label: s.label }));
            v
        }
    };
    Ok(TrainSet { samples, augment_seed: cfg.preprocess.augment.then_some(cfg.preprocess.seed) })
}

/// Synthetic SMOTE images (for inspection) and their manifest records.
fn write_synthetic(cfg: &ExperimentConfig, data: &LoadedData, out: &resample::SmoteOutput) -> std::io::Result<()> {
    let dir = cfg.output_dir.join("synthetic");
    std::fs::create_dir_all(&dir)?;
    let mut lines = String::new();
    for s in &out.synthetic {
        let segment = &data.dataset.images[&s.base].segment_id;
        let rel = format!("synthetic/{}.png", s.id);
        let line = serde_json::json!({ "kind": "image", "image_id": s.id, "segment_id": segment, "path": rel, "synthetic": true });
        lines.push_str(&line.to_string());
        lines.push('\n');
        // standardized values mapped back to a viewable range
        let px: Vec<u8> = s.image.data().iter().map(|&v| ((v / 8.0 + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let n = s.image.shape()[0] as u32;
        image::save_buffer(cfg.output_dir.join(&rel), &px, n, n, image::ColorType::Rgb8).map_err(std::io::Error::other)?;
    }
    std::fs::write(cfg.output_dir.join("synthetic.jsonl"), lines)
}

/// Identification of a completed run, written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub backbone: String,
    pub image_size: String,
    pub resampling: String,
    pub config_digest: String,
    pub dataset_digest: String,
    pub best_epoch: Option<usize>,
    pub param_count: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub report: EvalReport,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn row(&self) -> TableRow {
        table_row(&self.summary, &self.report)
    }
}

fn table_row(s: &RunSummary, r: &EvalReport) -> TableRow {
    TableRow {
        id: s.id.clone(),
        backbone: s.backbone.clone(),
        image_size: s.image_size.clone(),
        resampling: s.resampling.clone(),
        accuracy: r.accuracy,
        sensitivity: r.sensitivity,
        specificity: r.specificity,
        auc: r.auc,
        config_digest: s.config_digest.clone(),
    }
}

pub fn train_log_jsonl(log: &TrainLog, digest: &str) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        config_digest: &'a str,
        #[serde(flatten)]
        record: &'a train::EpochRecord,
    }
    log.records.iter().map(|r| serde_json::to_string(&Line { config_digest: digest, record: r }).expect("serializable") + "\n").collect()
}

pub fn roc_csv(rows: &[(String, String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::from("id,config_digest,fpr,tpr\n");
    for (id, digest, pts) in rows {
        for (f, t) in pts {
            out.push_str(&format!("{id},{digest},{f},{t}\n"));
        }
    }
    out
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    std::fs::write(&path, contents).map_err(|e| ExperimentError::Stage { stage: Stage::Output, message: format!("{}: {e}", path.display()) })
}

/// Full pipeline: data → split → preprocess → resample (train only) →
/// train → evaluate, with every artifact written under `output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, ExperimentError> {
    cfg.validate()?;
    let digest = cfg.digest();
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| ExperimentError::Stage { stage: Stage::Output, message: format!("{}: {e}", out.display()) })?;
    write(out.join("config.toml"), cfg.to_toml())?;

    let data = load_data(cfg)?;
    let split = split_data(cfg, &data)?;
    write(out.join("split.txt"), split.to_manifest())?;
    let images = prepare_images(cfg, &data)?;
    let train_set = build_train_set(cfg, &data, &split, &images)?;
    let val = eval_segments(&data, &images, &split.validation);

    let mut net = models::build::<f32>(&cfg.model, cfg.train.seed).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let (ckpt, log) = train::train(&mut net, &train_set, &val, &cfg.train, &digest).map_err(at(Stage::Train))?;
    checkpoint::save_checkpoint(&ckpt, &out.join("checkpoint.bin")).map_err(at(Stage::Output))?;
    write(out.join("train_log.jsonl"), train_log_jsonl(&log, &digest))?;

    let eval = eval_segments(&data, &images, &eval_ids(&split, cfg.eval.test_only));
    let report = evaluate::evaluate_split(&net, &eval, &digest, cfg.eval.batch_size).map_err(at(Stage::Evaluate))?;
    let labels = cfg.labels();
    let summary = RunSummary {
        id: labels.id,
        backbone: labels.backbone,
        image_size: labels.image_size,
        resampling: cfg.resample.strategy.label().to_string(),
        config_digest: digest.clone(),
        dataset_digest: data.digest.clone(),
        best_epoch: log.best_epoch,
        param_count: models::param_count(&net),
    };
    write_report_files(out, &summary, &report)?;
    Ok(RunOutput { checkpoint: ckpt, log, report, summary })
}

fn write_report_files(out: &Path, summary: &RunSummary, report: &EvalReport) -> Result<(), ExperimentError> {
    write(out.join("report.jsonl"), report.to_jsonl())?;
    write(out.join("table.md"), render_table(&[table_row(summary, report)]))?;
    let roc = report.roc().unwrap_or_default();
    write(out.join("roc.csv"), roc_csv(&[(summary.id.clone(), summary.config_digest.clone(), roc)]))?;
    write(out.join("run.json"), serde_json::to_string_pretty(summary).expect("serializable") + "\n")
}

/// Re-evaluate a saved checkpoint against the configured data.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint, test_only: bool) -> Result<EvalReport, ExperimentError> {
    cfg.validate()?;
    let digest = cfg.digest();
    if let Err(e) = ckpt.check_digest(&digest) {
        log::warn!("{e}");
    }
    let net = ckpt.network().map_err(at(Stage::Evaluate))?;
    let data = load_data(cfg)?;
    let split = split_data(cfg, &data)?;
    let images = prepare_images(cfg, &data)?;
    let eval = eval_segments(&data, &images, &eval_ids(&split, test_only));
    evaluate::evaluate_split(&net, &eval, &ckpt.config_digest, cfg.eval.batch_size).map_err(at(Stage::Evaluate))
}

/// Backbones of the reference ablation and their desk-scale stand-ins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "ResNet-101")]
    ResNet101,
    #[serde(rename = "EfficientNet-B0")]
    EfficientNetB0,
    #[serde(rename = "ViT-Base")]
    VitBase,
    #[serde(rename = "ViT-Large")]
    VitLarge,
    #[serde(rename = "ResNet-A")]
    ResNetA,
    #[serde(rename = "Our")]
    Ours,
}

impl Backbone {
    pub const ALL: [Backbone; 6] = [Self::ResNet101, Self::EfficientNetB0, Self::VitBase, Self::VitLarge, Self::ResNetA, Self::Ours];

    pub fn label(self) -> &'static str {
        match self {
            Self::ResNet101 => "ResNet-101",
            Self::EfficientNetB0 => "EfficientNet-B0",
            Self::VitBase => "ViT-Base",
            Self::VitLarge => "ViT-Large",
            Self::ResNetA => "ResNet-A",
            Self::Ours => "Our",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        Self::ALL.into_iter().find(|b| b.label().to_ascii_lowercase().replace('-', "") == norm).or(match norm.as_str() {
            "resnet" | "resnetdesk" => Some(Self::ResNet101),
            "efficientnet" | "resnetefficient" => Some(Self::EfficientNetB0),
            "vit" | "vitdesk" => Some(Self::VitBase),
            "vitlargedesk" => Some(Self::VitLarge),
            "resneta" | "resnetadesk" => Some(Self::ResNetA),
            "ours" | "oursdesk" => Some(Self::Ours),
            _ => None,
        })
    }

    pub fn desk_model(self) -> ModelConfig {
        match self {
            Self::ResNet101 => ModelConfig::resnet_desk(),
            Self::EfficientNetB0 => ModelConfig::resnet_efficient_desk(),
            Self::VitBase => ModelConfig::vit_desk(),
            Self::VitLarge => ModelConfig::vit_large_desk(),
            Self::ResNetA => ModelConfig::resnet_a_desk(),
            Self::Ours => ModelConfig::ours_desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub id: String,
    pub backbone: Backbone,
    /// Nominal (reference-scale) edge length; mapped to a run size by the
    /// grid's size map.
    pub image_size: usize,
    pub resampling: Strategy,
}

/// The 13-row reproduction grid, IDs 1.1 to 3.2.
pub fn reproduction_grid() -> Vec<GridCell> {
    use Backbone::*;
    use Strategy::*;
    let rows = [
        ("1.1", ResNet101, 224, Ruao),
        ("1.2", ResNet101, 299, Ruao),
        ("1.3", ResNet101, 512, Ruao),
        ("1.4", ResNet101, 224, None),
        ("1.5", EfficientNetB0, 224, None),
        ("1.6", ResNet101, 224, Ruao),
        ("1.7", EfficientNetB0, 224, Ruao),
        ("1.8", ResNet101, 224, Smote),
        ("1.9", EfficientNetB0, 224, Smote),
        ("2.1", VitBase, 224, Ruao),
        ("2.2", VitLarge, 224, Ruao),
        ("3.1", ResNetA, 224, Ruao),
        ("3.2", Ours, 224, Ruao),
    ];
    rows.into_iter().map(|(id, backbone, image_size, resampling)| GridCell { id: id.into(), backbone, image_size, resampling }).collect()
}

/// Cartesian product of the three axes, IDs `<backbone>.<n>`.
pub fn axes_grid(backbones: &[Backbone], sizes: &[usize], strategies: &[Strategy]) -> Result<Vec<GridCell>, ExperimentError> {
    if backbones.is_empty() || sizes.is_empty() || strategies.is_empty() {
        return Err(ExperimentError::Config("every grid axis needs at least one value".into()));
    }
    let mut cells = Vec::new();
    for (bi, &backbone) in backbones.iter().enumerate() {
        let mut n = 0;
        for &image_size in sizes {
            for &resampling in strategies {
                n += 1;
                cells.push(GridCell { id: format!("{}.{n}", bi + 1), backbone, image_size, resampling });
            }
        }
    }
    Ok(cells)
}

/// Nominal sizes mapped to desk-scale run sizes.
pub fn desk_size_map() -> BTreeMap<usize, usize> {
    BTreeMap::from([(224, 64), (299, 80), (512, 144)])
}

/// Sizes for smoke-scale grids.
pub fn smoke_size_map() -> BTreeMap<usize, usize> {
    BTreeMap::from([(224, 32), (299, 48), (512, 64)])
}

pub fn cell_config(base: &ExperimentConfig, cell: &GridCell, sizes: &BTreeMap<usize, usize>) -> ExperimentConfig {
    let size = sizes.get(&cell.image_size).copied().unwrap_or(cell.image_size);
    let mut c = base.clone();
    c.output_dir = base.output_dir.join("cells").join(&cell.id);
    c.row = RowLabels { id: cell.id.clone(), backbone: cell.backbone.label().into(), image_size: format!("[{0}, {0}]", cell.image_size) };
    c.model = cell.backbone.desk_model().with_input_size(size);
    c.preprocess.target_size = size;
    c.preprocess.custom_size = c.preprocess.custom_size || !crate::preprocess::STUDY_SIZES.contains(&size);
    c.resample.strategy = cell.resampling;
    c
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub rows: Vec<TableRow>,
    pub failures: Vec<(String, String)>,
    /// IDs whose results were reused from an existing run directory.
    pub reused: Vec<String>,
}

impl GridReport {
    pub fn render(&self) -> String {
        let mut s = render_table(&self.rows);
        for (id, e) in &self.failures {
            s.push_str(&format!("\nrow {id} failed: {e}\n"));
        }
        s
    }
}

fn completed_run(dir: &Path, digest: &str) -> Option<(RunSummary, EvalReport)> {
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).ok()?).ok()?;
    if summary.config_digest != digest {
        return None;
    }
    let report = EvalReport::from_jsonl(&std::fs::read_to_string(dir.join("report.jsonl")).ok()?).ok()?;
    (report.config_digest == digest).then_some((summary, report))
}

/// Run every cell (skipping cells whose directory already holds a completed
/// run with the same digest). Failures are recorded and the grid continues.
pub fn grid(base: &ExperimentConfig, cells: &[GridCell], sizes: &BTreeMap<usize, usize>) -> Result<GridReport, ExperimentError> {
    if cells.is_empty() {
        return Err(ExperimentError::Config("grid has no cells".into()));
    }
    let mut report = GridReport { rows: Vec::new(), failures: Vec::new(), reused: Vec::new() };
    for cell in cells {
        let cfg = cell_config(base, cell, sizes);
        if let Some((summary, r)) = completed_run(&cfg.output_dir, &cfg.digest()) {
            log::info!("grid row {}: reusing {}", cell.id, cfg.output_dir.display());
            report.rows.push(table_row(&summary, &r));
            report.reused.push(cell.id.clone());
            continue;
        }
        log::info!("grid row {}: {} {} {}", cell.id, cell.backbone.label(), cell.image_size, cell.resampling.label());
        match run(&cfg) {
            Ok(out) => report.rows.push(out.row()),
            Err(e) => {
                log::error!("grid row {} failed: {e}", cell.id);
                report.failures.push((cell.id.clone(), e.to_string()));
            }
        }
    }
    report.rows.sort_by(|a, b| id_key(&a.id).cmp(&id_key(&b.id)));
    std::fs::create_dir_all(&base.output_dir).map_err(at(Stage::Output))?;
    write(base.output_dir.join("grid.md"), report.render())?;
    let jsonl: String = report.rows.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
    write(base.output_dir.join("grid.jsonl"), jsonl)?;
    Ok(report)
}

/// Sort key treating dot-separated numeric parts numerically.
pub fn id_key(id: &str) -> Vec<(u64, String)> {
    id.split('.').map(|p| (p.parse().unwrap_or(u64::MAX), p.to_string())).collect()
}

#[derive(Debug, Clone)]
pub struct MergedReport {
    pub rows: Vec<TableRow>,
    pub roc: Vec<(String, String, Vec<(f64, f64)>)>,
    pub warnings: Vec<String>,
}

impl MergedReport {
    pub fn render(&self) -> String {
        let mut s = render_table(&self.rows);
        for w in &self.warnings {
            s.push_str(&format!("\nwarning: {w}\n"));
        }
        s
    }
}

/// Merge completed run directories into one table sorted by ID. Runs on
/// different datasets are still rendered, with an `IncompatibleReports`
/// warning. A report whose digest disagrees with its own checkpoint or
/// summary is an error.
pub fn report(run_dirs: &[PathBuf]) -> Result<MergedReport, ExperimentError> {
    if run_dirs.is_empty() {
        return Err(ExperimentError::Config("report needs at least one run directory".into()));
    }
    let fail = |m: String| ExperimentError::Stage { stage: Stage::Report, message: m };
    let mut entries = Vec::new();
    for dir in run_dirs {
        let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(|e| fail(format!("{}: {e}", dir.join(name).display())));
        let summary: RunSummary = serde_json::from_str(&read("run.json")?).map_err(|e| fail(format!("{}: {e}", dir.display())))?;
        let rep = EvalReport::from_jsonl(&read("report.jsonl")?).map_err(|e| fail(format!("{}: {e}", dir.display())))?;
        if rep.config_digest != summary.config_digest {
            return Err(fail(format!("{}: report digest {} does not match run digest {}", dir.display(), rep.config_digest, summary.config_digest)));
        }
        let ck = dir.join("checkpoint.bin");
        if ck.exists() {
            let c = checkpoint::load_checkpoint(&ck).map_err(|e| fail(format!("{}: {e}", ck.display())))?;
            c.check_digest(&rep.config_digest).map_err(|e| fail(format!("{}: {e}", ck.display())))?;
        }
        entries.push((summary, rep));
    }
    entries.sort_by(|a, b| id_key(&a.0.id).cmp(&id_key(&b.0.id)));
    let mut warnings = Vec::new();
    let first = entries[0].0.dataset_digest.clone();
    let odd: Vec<&str> = entries.iter().filter(|e| e.0.dataset_digest != first).map(|e| e.0.id.as_str()).collect();
    if !odd.is_empty() {
        warnings.push(format!("IncompatibleReports: runs {odd:?} use a different dataset than run {}", entries[0].0.id));
    }
    Ok(MergedReport {
        rows: entries.iter().map(|(s, r)| table_row(s, r)).collect(),
        roc: entries.iter().map(|(s, r)| (s.id.clone(), s.config_digest.clone(), r.roc().unwrap_or_default())).collect(),
        warnings,
    })
}
