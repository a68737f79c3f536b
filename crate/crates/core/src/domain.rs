//! Dataset hierarchy (patient → segment → image), Geboes grade semantics,
//! manifest ingestion and the train/validation/test split.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("malformed Geboes grade {0:?}")]
    MalformedGrade(String),
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: {kind} `{id}` references unknown {target} `{target_id}`")]
    DanglingReference { line: usize, kind: &'static str, id: String, target: &'static str, target_id: String },
    #[error("line {line}: duplicate {kind} id `{id}`")]
    DuplicateId { line: usize, kind: &'static str, id: String },
    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("{kind} `{id}` has no {child} records")]
    EmptyGroup { kind: &'static str, id: String, child: &'static str },
    #[error("split sizes {sizes:?} sum to {sum} but there are {units} {unit} units")]
    SizeMismatch { sizes: [usize; 3], sum: usize, units: usize, unit: SplitUnit },
    #[error("malformed split manifest: {0}")]
    MalformedSplit(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

/// The headline grade of the Geboes score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GeboesMajor {
    G0,
    G1,
    G2A,
    G2B,
    G3,
    G4,
    G5,
}

impl GeboesMajor {
    pub const ALL: [GeboesMajor; 7] = [Self::G0, Self::G1, Self::G2A, Self::G2B, Self::G3, Self::G4, Self::G5];

    pub fn token(self) -> &'static str {
        match self {
            Self::G0 => "0",
            Self::G1 => "1",
            Self::G2A => "2A",
            Self::G2B => "2B",
            Self::G3 => "3",
            Self::G4 => "4",
            Self::G5 => "5",
        }
    }

    fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.token() == s)
    }
}

/// Largest numeric subcategory (each grade has four: `.0` to `.3`).
pub const MAX_SUBSCORE: u8 = 3;

/// A Geboes grade such as `2B.1` or `3`. A missing subscore orders as `.0`
/// but is remembered so the grade prints back the way it was written.
#[derive(Debug, Clone, Copy, Eq, Hash)]
pub struct GeboesGrade {
    pub major: GeboesMajor,
    subscore: Option<u8>,
}

impl GeboesGrade {
    pub fn new(major: GeboesMajor, subscore: u8) -> Self {
        assert!(subscore <= MAX_SUBSCORE);
        Self { major, subscore: Some(subscore) }
    }

    pub fn major_only(major: GeboesMajor) -> Self {
        Self { major, subscore: None }
    }

    pub fn subscore(&self) -> u8 {
        self.subscore.unwrap_or(0)
    }

    fn key(&self) -> (GeboesMajor, u8) {
        (self.major, self.subscore())
    }

    /// All 28 explicit grade tokens in ascending order.
    pub fn all() -> Vec<GeboesGrade> {
        GeboesMajor::ALL
            .into_iter()
            .flat_map(|m| (0..=MAX_SUBSCORE).map(move |s| GeboesGrade::new(m, s)))
            .collect()
    }
}

impl PartialEq for GeboesGrade {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl PartialOrd for GeboesGrade {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GeboesGrade {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for GeboesGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.subscore {
            Some(s) => write!(f, "{}.{s}", self.major.token()),
            None => f.write_str(self.major.token()),
        }
    }
}

impl FromStr for GeboesGrade {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_grade(s)
    }
}

pub fn parse_grade(s: &str) -> Result<GeboesGrade, DomainError> {
    let bad = || DomainError::MalformedGrade(s.to_string());
    let (major, sub) = match s.split_once('.') {
        Some((m, d)) => (m, Some(d)),
        None => (s, None),
    };
    let major = GeboesMajor::from_token(major).ok_or_else(bad)?;
    let subscore = match sub {
        None => None,
        Some(d) if d.len() == 1 => {
            let v = d.chars().next().and_then(|c| c.to_digit(10)).ok_or_else(bad)? as u8;
            if v > MAX_SUBSCORE {
                return Err(bad());
            }
            Some(v)
        }
        Some(_) => return Err(bad()),
    };
    Ok(GeboesGrade { major, subscore })
}

/// Histologic remission is the negative class, activity the positive one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Remission = 0,
    Activity = 1,
}

impl BinaryLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Self::Remission
        } else {
            Self::Activity
        }
    }

    pub fn is_positive(self) -> bool {
        self == Self::Activity
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Remission => "remission",
            Self::Activity => "activity",
        })
    }
}

/// Lowest grade counted as histologic activity.
pub const REMISSION_THRESHOLD: GeboesGrade = GeboesGrade { major: GeboesMajor::G3, subscore: Some(2) };

pub fn binarize(grade: GeboesGrade) -> BinaryLabel {
    if grade < REMISSION_THRESHOLD {
        BinaryLabel::Remission
    } else {
        BinaryLabel::Activity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub segment_id: String,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub synthetic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub patient_id: String,
    pub grade: GeboesGrade,
    pub label: BinaryLabel,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub segment_ids: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

/// A fully linked, validated dataset. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub patients: BTreeMap<String, PatientRecord>,
    pub segments: BTreeMap<String, SegmentRecord>,
    pub images: BTreeMap<String, ImageRecord>,
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, line: usize) -> Result<&'a str, DomainError> {
    obj.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| DomainError::MissingField { line, field: name.to_string() })
}

impl Dataset {
    /// Link raw records, enforcing every hierarchy invariant. `lines` maps
    /// each record to the manifest line it came from (for error messages).
    fn link(
        root: PathBuf,
        patients: Vec<(usize, String, BTreeMap<String, String>)>,
        segments: Vec<(usize, String, String, GeboesGrade)>,
        images: Vec<(usize, ImageRecord)>,
    ) -> Result<Self, DomainError> {
        let mut pmap = BTreeMap::new();
        for (line, id, metadata) in patients {
            if pmap.contains_key(&id) {
                return Err(DomainError::DuplicateId { line, kind: "patient", id });
            }
            pmap.insert(id.clone(), PatientRecord { patient_id: id, segment_ids: Vec::new(), metadata });
        }
        let mut smap = BTreeMap::new();
        for (line, id, patient_id, grade) in segments {
            if smap.contains_key(&id) {
                return Err(DomainError::DuplicateId { line, kind: "segment", id });
            }
            let Some(p) = pmap.get_mut(&patient_id) else {
                return Err(DomainError::DanglingReference {
                    line,
                    kind: "segment",
                    id,
                    target: "patient",
                    target_id: patient_id,
                });
            };
            p.segment_ids.push(id.clone());
            smap.insert(
                id.clone(),
                SegmentRecord { segment_id: id, patient_id, grade, label: binarize(grade), image_ids: Vec::new() },
            );
        }
        let mut imap = BTreeMap::new();
        for (line, rec) in images {
            if imap.contains_key(&rec.image_id) {
                return Err(DomainError::DuplicateId { line, kind: "image", id: rec.image_id });
            }
            let Some(s) = smap.get_mut(&rec.segment_id) else {
                return Err(DomainError::DanglingReference {
                    line,
                    kind: "image",
                    id: rec.image_id,
                    target: "segment",
                    target_id: rec.segment_id,
                });
            };
            s.image_ids.push(rec.image_id.clone());
            imap.insert(rec.image_id.clone(), rec);
        }
        for s in smap.values_mut() {
            if s.image_ids.is_empty() {
                return Err(DomainError::EmptyGroup { kind: "segment", id: s.segment_id.clone(), child: "image" });
            }
            s.image_ids.sort();
        }
        for p in pmap.values_mut() {
            if p.segment_ids.is_empty() {
                return Err(DomainError::EmptyGroup { kind: "patient", id: p.patient_id.clone(), child: "segment" });
            }
            p.segment_ids.sort();
        }
        Ok(Self { root, patients: pmap, segments: smap, images: imap })
    }

    pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<Self, DomainError> {
        let mut patients = Vec::new();
        let mut segments = Vec::new();
        let mut images = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(raw)
                .map_err(|e| DomainError::MalformedRecord { line, message: e.to_string() })?;
            let Value::Object(obj) = value else {
                return Err(DomainError::MalformedRecord { line, message: "record is not an object".into() });
            };
            match field(&obj, "kind", line)? {
                "patient" => {
                    let id = field(&obj, "patient_id", line)?.to_string();
                    let mut metadata = BTreeMap::new();
                    if let Some(Value::Object(m)) = obj.get("metadata") {
                        for (k, v) in m {
                            let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
                            metadata.insert(k.clone(), v);
                        }
                    }
                    patients.push((line, id, metadata));
                }
                "segment" => {
                    let id = field(&obj, "segment_id", line)?.to_string();
                    let patient = field(&obj, "patient_id", line)?.to_string();
                    let grade = parse_grade(field(&obj, "geboes", line)?)?;
                    segments.push((line, id, patient, grade));
                }
                "image" => {
                    let rec = ImageRecord {
                        image_id: field(&obj, "image_id", line)?.to_string(),
                        segment_id: field(&obj, "segment_id", line)?.to_string(),
                        path: PathBuf::from(field(&obj, "path", line)?),
                        synthetic: obj.get("synthetic").and_then(Value::as_bool).unwrap_or(false),
                    };
                    images.push((line, rec));
                }
                other => {
                    return Err(DomainError::MalformedRecord { line, message: format!("unknown record kind {other:?}") })
                }
            }
        }
        Self::link(root.into(), patients, segments, images)
    }

    /// Build from in-memory records (used by the synthetic generator).
    pub fn from_records(
        root: impl Into<PathBuf>,
        patients: Vec<(String, BTreeMap<String, String>)>,
        segments: Vec<(String, String, GeboesGrade)>,
        images: Vec<ImageRecord>,
    ) -> Result<Self, DomainError> {
        Self::link(
            root.into(),
            patients.into_iter().enumerate().map(|(i, (a, b))| (i + 1, a, b)).collect(),
            segments.into_iter().enumerate().map(|(i, (a, b, c))| (i + 1, a, b, c)).collect(),
            images.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect(),
        )
    }

    /// Canonical manifest text: patients, then segments, then images, each
    /// sorted by id, one JSON object per line with sorted keys.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        let mut push = |v: Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        for p in self.patients.values() {
            let mut v = json!({ "kind": "patient", "patient_id": p.patient_id });
            if !p.metadata.is_empty() {
                v["metadata"] = json!(p.metadata);
            }
            push(v);
        }
        for s in self.segments.values() {
            push(json!({
                "kind": "segment",
                "segment_id": s.segment_id,
                "patient_id": s.patient_id,
                "geboes": s.grade.to_string(),
            }));
        }
        for im in self.images.values() {
            let mut v = json!({
                "kind": "image",
                "image_id": im.image_id,
                "segment_id": im.segment_id,
                "path": im.path.to_string_lossy(),
            });
            if im.synthetic {
                v["synthetic"] = json!(true);
            }
            push(v);
        }
        out
    }

    pub fn label_of_image(&self, image_id: &str) -> Option<BinaryLabel> {
        let im = self.images.get(image_id)?;
        self.segments.get(&im.segment_id).map(|s| s.label)
    }

    pub fn image_path(&self, image: &ImageRecord) -> PathBuf {
        self.root.join(&image.path)
    }

    /// Decode an image as `[H, W, 3]` floats in `[0, 1]`.
    pub fn load_pixels(&self, image: &ImageRecord) -> Result<crate::Image, DomainError> {
        load_png(&self.image_path(image))
    }

    pub fn segment_list(&self) -> Vec<&SegmentRecord> {
        self.segments.values().collect()
    }
}

pub fn load_png(path: &Path) -> Result<crate::Image, DomainError> {
    let img = image::open(path)
        .map_err(|source| DomainError::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Ok(remission_nn::Tensor::from_vec([h as usize, w as usize, 3], data).expect("rgb buffer size"))
}

pub fn load_manifest(path: &Path) -> Result<Dataset, DomainError> {
    let text = std::fs::read_to_string(path).map_err(|source| DomainError::Io { path: path.to_path_buf(), source })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Dataset::parse_manifest(&text, root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Segment,
    Patient,
}

impl fmt::Display for SplitUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Segment => "segment",
            Self::Patient => "patient",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    /// `train:`, `val:`, `test:` lines with sorted comma-separated ids.
    pub fn to_manifest(&self) -> String {
        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(",");
        format!("train:{}\nval:{}\ntest:{}\n", join(&self.train), join(&self.validation), join(&self.test))
    }

    pub fn parse_manifest(text: &str) -> Result<Self, DomainError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut take = |prefix: &str| -> Result<BTreeSet<String>, DomainError> {
            let l = lines.next().ok_or_else(|| DomainError::MalformedSplit(format!("missing `{prefix}` line")))?;
            let rest = l
                .strip_prefix(prefix)
                .ok_or_else(|| DomainError::MalformedSplit(format!("expected `{prefix}`, got {l:?}")))?;
            Ok(rest.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect())
        };
        let split = Self { train: take("train:")?, validation: take("val:")?, test: take("test:")? };
        if !split.train.is_disjoint(&split.validation)
            || !split.train.is_disjoint(&split.test)
            || !split.validation.is_disjoint(&split.test)
        {
            return Err(DomainError::MalformedSplit("partitions overlap".into()));
        }
        Ok(split)
    }
}

/// Deterministic shuffled split of segments (or whole patients) into
/// `(train, validation, test)` of exactly the requested sizes.
pub fn make_split(
    segments: &[&SegmentRecord],
    sizes: [usize; 3],
    seed: u64,
    unit: SplitUnit,
) -> Result<DatasetSplit, DomainError> {
    // Units are sorted ids so the input order never matters.
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in segments {
        let key = match unit {
            SplitUnit::Segment => s.segment_id.as_str(),
            SplitUnit::Patient => s.patient_id.as_str(),
        };
        groups.entry(key).or_default().push(&s.segment_id);
    }
    let sum: usize = sizes.iter().sum();
    if sum != groups.len() {
        return Err(DomainError::SizeMismatch { sizes, sum, units: groups.len(), unit });
    }
    let mut units: Vec<Vec<&str>> = groups.into_values().collect();
    units.shuffle(&mut seed::rng_for(seed, "split"));
    let mut split = DatasetSplit::default();
    for (i, members) in units.into_iter().enumerate() {
        let target = if i < sizes[0] {
            &mut split.train
        } else if i < sizes[0] + sizes[1] {
            &mut split.validation
        } else {
            &mut split.test
        };
        target.extend(members.into_iter().map(str::to_string));
    }
    Ok(split)
}
