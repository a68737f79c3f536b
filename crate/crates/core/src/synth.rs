//! Procedural "gland texture" images with known labels.
//!
//! Remission segments render a regular hexagonal lattice of round crypts.
//! Activity segments render a distorted lattice with uneven, elongated
//! crypts and dark speckle standing in for inflammatory infiltrate. Every
//! image also gets a random rotation and a per-channel colour cast. The
//! `difficulty` knob interpolates both classes towards the same parameters:
//! at 0 they are trivially separable, at 1 they are identically distributed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{binarize, BinaryLabel, Dataset, DomainError, GeboesGrade, ImageRecord};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("cannot write to {path}: {source}")]
    UnwritableOutputDir { path: PathBuf, source: std::io::Error },
    #[error("cannot encode {path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive `[min, max]` segments per patient.
    pub segments_per_patient: [usize; 2],
    /// Force the total segment count (distributed within the per-patient range).
    pub total_segments: Option<usize>,
    pub images_per_segment: usize,
    pub image_size: usize,
    pub activity_fraction: f64,
    /// 0 = trivially separable classes, 1 = identical class distributions.
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 10,
            segments_per_patient: [2, 3],
            total_segments: None,
            images_per_segment: 5,
            image_size: 64,
            activity_fraction: 0.25,
            difficulty: 0.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    /// Cohort shaped like the reference study: 87 patients, 154 segments.
    pub fn study_shaped(seed: u64) -> Self {
        Self {
            n_patients: 87,
            segments_per_patient: [1, 3],
            total_segments: Some(154),
            images_per_segment: 5,
            image_size: 64,
            activity_fraction: 0.25,
            difficulty: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        let [lo, hi] = self.segments_per_patient;
        if self.n_patients == 0 {
            return bad("n_patients must be >= 1".into());
        }
        if lo == 0 || lo > hi {
            return bad(format!("segments_per_patient range {lo}..={hi} is empty or starts at 0"));
        }
        if let Some(t) = self.total_segments {
            if t < self.n_patients * lo || t > self.n_patients * hi {
                return bad(format!("total_segments {t} unreachable with {} patients x {lo}..={hi}", self.n_patients));
            }
        }
        if self.images_per_segment == 0 {
            return bad("images_per_segment must be >= 1".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} below 8", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.activity_fraction) {
            return bad(format!("activity_fraction {} outside [0, 1]", self.activity_fraction));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return bad(format!("difficulty {} outside [0, 1]", self.difficulty));
        }
        Ok(())
    }
}

/// Class counts of a generated cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub patients: usize,
    pub segments: usize,
    pub remission_segments: usize,
    pub activity_segments: usize,
    pub images: usize,
}

impl SynthSummary {
    pub fn of(ds: &Dataset) -> Self {
        let act = ds.segments.values().filter(|s| s.label.is_positive()).count();
        Self {
            patients: ds.patients.len(),
            segments: ds.segments.len(),
            remission_segments: ds.segments.len() - act,
            activity_segments: act,
            images: ds.images.len(),
        }
    }
}

impl std::fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "patients={} segments={} remission={} activity={} images={}",
            self.patients, self.segments, self.remission_segments, self.activity_segments, self.images
        )
    }
}

/// Number of activity segments: `floor(fraction * n)`, kept inside
/// `[1, n - 1]` whenever there are at least two segments.
pub fn activity_count(n_segments: usize, fraction: f64) -> usize {
    let raw = (fraction * n_segments as f64).floor() as usize;
    if n_segments >= 2 {
        raw.clamp(1, n_segments - 1)
    } else {
        raw.min(n_segments)
    }
}

fn segment_counts(cfg: &SynthConfig) -> Vec<usize> {
    let mut rng = seed::rng_for(cfg.seed, "layout");
    let [lo, hi] = cfg.segments_per_patient;
    let mut counts: Vec<usize> = (0..cfg.n_patients).map(|_| rng.random_range(lo..=hi)).collect();
    if let Some(target) = cfg.total_segments {
        let mut total: usize = counts.iter().sum();
        while total != target {
            let i = rng.random_range(0..counts.len());
            if total < target && counts[i] < hi {
                counts[i] += 1;
                total += 1;
            } else if total > target && counts[i] > lo {
                counts[i] -= 1;
                total -= 1;
            }
        }
    }
    counts
}

struct Layout {
    patients: Vec<(String, BTreeMap<String, String>)>,
    segments: Vec<(String, String, GeboesGrade)>,
    images: Vec<(ImageRecord, BinaryLabel)>,
}

fn layout(cfg: &SynthConfig) -> Layout {
    let counts = segment_counts(cfg);
    let width = cfg.n_patients.to_string().len().max(3);
    let mut patients = Vec::new();
    let mut seg_ids = Vec::new();
    for (p, &n) in counts.iter().enumerate() {
        let pid = format!("P{:0width$}", p + 1);
        let mut meta_rng = seed::rng_for(cfg.seed, &format!("meta:{pid}"));
        let mut meta = BTreeMap::new();
        meta.insert("sex".to_string(), if meta_rng.random_bool(0.5) { "F" } else { "M" }.to_string());
        meta.insert("age".to_string(), meta_rng.random_range(17..=78).to_string());
        meta.insert("mayo".to_string(), meta_rng.random_range(0..=3).to_string());
        patients.push((pid.clone(), meta));
        for s in 0..n {
            seg_ids.push((format!("{pid}-S{}", s + 1), pid.clone()));
        }
    }

    let n_act = activity_count(seg_ids.len(), cfg.activity_fraction);
    let mut order: Vec<usize> = (0..seg_ids.len()).collect();
    order.shuffle(&mut seed::rng_for(cfg.seed, "labels"));
    let mut is_active = vec![false; seg_ids.len()];
    for &i in &order[..n_act] {
        is_active[i] = true;
    }

    let all = GeboesGrade::all();
    let (rem, act): (Vec<GeboesGrade>, Vec<GeboesGrade>) =
        all.into_iter().partition(|g| binarize(*g) == BinaryLabel::Remission);
    let mut segments = Vec::new();
    let mut images = Vec::new();
    for (i, (sid, pid)) in seg_ids.into_iter().enumerate() {
        let pool = if is_active[i] { &act } else { &rem };
        let grade = *pool.choose(&mut seed::rng_for(cfg.seed, &format!("grade:{sid}"))).expect("non-empty pool");
        let label = binarize(grade);
        for k in 0..cfg.images_per_segment {
            let iid = format!("{sid}-I{:02}", k + 1);
            let path = PathBuf::from("images").join(format!("{iid}.png"));
            images.push((ImageRecord { image_id: iid, segment_id: sid.clone(), path, synthetic: false }, label));
        }
        segments.push((sid, pid, grade));
    }
    Layout { patients, segments, images }
}

struct ClassStyle {
    jitter: f64,
    radius_var: f64,
    ellipticity: f64,
    speckle: f64,
}

fn style(label: BinaryLabel, difficulty: f64) -> ClassStyle {
    let lerp = |a: f64, b: f64| a + (b - a) * difficulty;
    match label {
        BinaryLabel::Remission => ClassStyle {
            jitter: lerp(0.0, 0.15),
            radius_var: lerp(0.0, 0.12),
            ellipticity: lerp(0.0, 0.15),
            speckle: lerp(0.0, 0.012),
        },
        BinaryLabel::Activity => ClassStyle {
            jitter: lerp(0.3, 0.15),
            radius_var: lerp(0.25, 0.12),
            ellipticity: lerp(0.3, 0.15),
            speckle: lerp(0.025, 0.012),
        },
    }
}

const LAMINA: [f64; 3] = [0.78, 0.52, 0.72];
const LUMEN: [f64; 3] = [0.93, 0.86, 0.93];
const EPITHELIUM: [f64; 3] = [0.45, 0.25, 0.55];
const INFILTRATE: [f64; 3] = [0.05, 0.02, 0.08];

/// Render one image as interleaved RGB bytes (`size * size * 3`).
pub fn render(size: usize, label: BinaryLabel, difficulty: f64, image_seed: u64) -> Vec<u8> {
    let mut rng = seed::rng(image_seed);
    let st = style(label, difficulty);
    let s = size as f64;
    let mut px = vec![0.0f64; size * size * 3];

    // low-frequency background shading
    let (fx, fy, ph) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.0..2.0 * PI));
    for y in 0..size {
        for x in 0..size {
            let shade = 1.0 + 0.04 * ((fx * x as f64 / s * PI + fy * y as f64 / s * PI + ph).sin());
            for c in 0..3 {
                px[(y * size + x) * 3 + c] = LAMINA[c] * shade;
            }
        }
    }

    let spacing = s / 6.0;
    let theta = rng.random_range(0.0..2.0 * PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let (ox, oy) = (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing));
    let reach = (s / spacing).ceil() as i64 + 2;
    let row_h = spacing * 3f64.sqrt() / 2.0;
    for r in -reach..=reach {
        for q in -reach..=reach {
            let lx = q as f64 * spacing + if r.rem_euclid(2) == 1 { spacing / 2.0 } else { 0.0 } + ox;
            let ly = r as f64 * row_h + oy;
            let jx: f64 = rng.sample(StandardNormal);
            let jy: f64 = rng.sample(StandardNormal);
            let rz: f64 = rng.sample(StandardNormal);
            let e = rng.random_range(-1.0..1.0);
            let phi = rng.random_range(0.0..PI);
            let cx = s / 2.0 + lx * cos_t - ly * sin_t + jx * st.jitter * spacing;
            let cy = s / 2.0 + lx * sin_t + ly * cos_t + jy * st.jitter * spacing;
            let radius = (0.32 * spacing * (1.0 + st.radius_var * rz)).clamp(0.15 * spacing, 0.45 * spacing);
            let (a, b) = (radius * (1.0 + st.ellipticity * e), radius / (1.0 + st.ellipticity * e));
            let (sp, cp) = phi.sin_cos();
            let ext = a.max(b) + 1.0;
            if cx + ext < 0.0 || cy + ext < 0.0 || cx - ext > s || cy - ext > s {
                continue;
            }
            let (x0, x1) = ((cx - ext).floor().max(0.0) as usize, ((cx + ext).ceil() as usize).min(size));
            let (y0, y1) = ((cy - ext).floor().max(0.0) as usize, ((cy + ext).ceil() as usize).min(size));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let (u, v) = (dx * cp + dy * sp, -dx * sp + dy * cp);
                    let d = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                    let color = if d < 0.6 {
                        &LUMEN
                    } else if d < 1.0 {
                        &EPITHELIUM
                    } else {
                        continue;
                    };
                    px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(color);
                }
            }
        }
    }

    let n_dots = (st.speckle * s * s).round() as usize;
    for _ in 0..n_dots {
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let r = rng.random_range(0.8..1.5);
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(size));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    px[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&INFILTRATE);
                }
            }
        }
    }

    // staining variance: per-channel gain and offset
    let gain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let mut out = Vec::with_capacity(px.len());
    for (i, v) in px.into_iter().enumerate() {
        let c = i % 3;
        let n: f64 = rng.sample(StandardNormal);
        let v = v * gain[c] + offset[c] + 0.015 * n;
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

/// Seed of one image, a pure function of the cohort seed and the image id.
pub fn image_seed(cfg_seed: u64, image_id: &str) -> u64 {
    seed::derive(cfg_seed, &format!("image:{image_id}"))
}

/// Write `manifest.jsonl` and `images/*.png` under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let lay = layout(cfg);
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)
        .map_err(|source| SynthError::UnwritableOutputDir { path: img_dir.clone(), source })?;
    let sz = cfg.image_size as u32;
    for (rec, label) in &lay.images {
        let bytes = render(cfg.image_size, *label, cfg.difficulty, image_seed(cfg.seed, &rec.image_id));
        let path = out_dir.join(&rec.path);
        image::RgbImage::from_raw(sz, sz, bytes)
            .expect("buffer matches dimensions")
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| SynthError::Encode { path: path.clone(), source })?;
    }
    let ds = Dataset::from_records(
        out_dir,
        lay.patients,
        lay.segments,
        lay.images.into_iter().map(|(r, _)| r).collect(),
    )?;
    let manifest = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest, ds.to_manifest())
        .map_err(|source| SynthError::UnwritableOutputDir { path: manifest, source })?;
    Ok(ds)
}
