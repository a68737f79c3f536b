use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use remission_core::domain::*;
use remission_core::synth::{generate, SynthConfig, SynthSummary};
use sha2::{Digest, Sha256};

fn tree_hash(root: &Path) -> String {
    let mut files: Vec<_> = std::fs::read_dir(root.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
    files.push(root.join("manifest.jsonl"));
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(f).unwrap());
    }
    hex::encode(h.finalize())
}

#[test]
fn default_cohort_has_five_images_per_segment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_patients: 10, segments_per_patient: [2, 3], images_per_segment: 5, activity_fraction: 0.25, seed: 1, ..Default::default() };
    let ds = generate(&cfg, dir.path()).unwrap();
    assert_eq!(ds.patients.len(), 10);
    assert!((20..=30).contains(&ds.segments.len()));
    for s in ds.segments.values() {
        assert!(s.image_ids.len() >= 5);
        assert_eq!(s.label, binarize(s.grade));
    }
    let summary = SynthSummary::of(&ds);
    assert!(summary.activity_segments >= 1 && summary.remission_segments >= 1);
    for img in ds.images.values() {
        assert_eq!(ds.label_of_image(&img.image_id), Some(ds.segments[&img.segment_id].label));
        assert_eq!(ds.load_pixels(img).unwrap().shape(), &[64, 64, 3]);
    }
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig { n_patients: 3, image_size: 32, ..Default::default() };
    generate(&cfg, a.path()).unwrap();
    generate(&cfg, b.path()).unwrap();
    generate(&SynthConfig { seed: 2, ..cfg }, c.path()).unwrap();
    assert_eq!(tree_hash(a.path()), tree_hash(b.path()));
    assert_ne!(tree_hash(a.path()), tree_hash(c.path()));
}

#[test]
fn study_shaped_cohort_round_trips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&SynthConfig { image_size: 16, ..SynthConfig::study_shaped(5) }, dir.path()).unwrap();
    let act = ds.segments.values().filter(|s| s.label == BinaryLabel::Activity).count();
    // floor(0.25 * 154)
    assert!(act == 38 || act == 39, "{act}");
    let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(loaded.segments.len(), 154);
    assert_eq!(loaded.patients.len(), 87);
    assert_eq!(loaded.to_manifest(), ds.to_manifest());
    assert_eq!(loaded.segments, ds.segments);
}

fn dark_fraction(img: &remission_core::Image) -> f64 {
    let px = img.data().chunks(3).filter(|p| p.iter().sum::<f32>() / 3.0 < 0.2).count();
    px as f64 / (img.data().len() / 3) as f64
}

fn blue_mean(img: &remission_core::Image) -> f64 {
    img.data().chunks(3).map(|p| f64::from(p[2])).sum::<f64>() / (img.data().len() / 3) as f64
}

#[test]
fn difficulty_zero_is_separable_by_a_pixel_statistic_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_patients: 20, segments_per_patient: [2, 2], activity_fraction: 0.5, ..Default::default() };
    let ds = generate(&cfg, dir.path()).unwrap();
    // probe w . (dark fraction, mean blue) + b with w = (1, 0), b = -t
    let mut rem = Vec::new();
    let mut act = Vec::new();
    for img in ds.images.values() {
        let x = ds.load_pixels(img).unwrap();
        let feat = (dark_fraction(&x), blue_mean(&x));
        match ds.label_of_image(&img.image_id).unwrap() {
            BinaryLabel::Remission => rem.push(feat),
            BinaryLabel::Activity => act.push(feat),
        }
    }
    let rem_max = rem.iter().map(|f| f.0).fold(f64::MIN, f64::max);
    let act_min = act.iter().map(|f| f.0).fold(f64::MAX, f64::min);
    assert!(rem_max < act_min, "remission max {rem_max} vs activity min {act_min}");
    let t = (rem_max + act_min) / 2.0;
    let correct = rem.iter().filter(|f| f.0 < t).count() + act.iter().filter(|f| f.0 > t).count();
    assert_eq!(correct, rem.len() + act.len());
}

#[test]
fn hard_cohort_is_not_trivially_separable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_patients: 20, segments_per_patient: [2, 2], activity_fraction: 0.5, difficulty: 1.0, ..Default::default() };
    let ds = generate(&cfg, dir.path()).unwrap();
    let mut rem = Vec::new();
    let mut act = Vec::new();
    for img in ds.images.values() {
        let f = dark_fraction(&ds.load_pixels(img).unwrap());
        match ds.label_of_image(&img.image_id).unwrap() {
            BinaryLabel::Remission => rem.push(f),
            BinaryLabel::Activity => act.push(f),
        }
    }
    assert!(rem.iter().cloned().fold(f64::MIN, f64::max) > act.iter().cloned().fold(f64::MAX, f64::min));
}

#[test]
fn unwritable_output_dir_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let err = generate(&SynthConfig::default(), &file).unwrap_err();
    assert!(matches!(err, remission_core::synth::SynthError::UnwritableOutputDir { .. }), "{err:?}");
}

fn records(n_patients: usize, per: usize) -> Vec<SegmentRecord> {
    (0..n_patients)
        .flat_map(|p| {
            (0..per).map(move |s| SegmentRecord {
                segment_id: format!("P{p:02}-S{s}"),
                patient_id: format!("P{p:02}"),
                grade: parse_grade("1").unwrap(),
                label: BinaryLabel::Remission,
                image_ids: vec![format!("P{p:02}-S{s}-I1")],
            })
        })
        .collect()
}

proptest! {
    #[test]
    fn splits_are_exact_and_disjoint(n in 3usize..80, a in 0usize..100, b in 0usize..100, seed in any::<u64>()) {
        let segs = records(n, 1);
        let refs: Vec<&SegmentRecord> = segs.iter().collect();
        let val = a % (n - 1);
        let test = b % (n - val);
        let sizes = [n - val - test, val, test];
        let s = make_split(&refs, sizes, seed, SplitUnit::Segment).unwrap();
        prop_assert_eq!(s.sizes(), sizes);
        prop_assert!(s.train.is_disjoint(&s.validation) && s.train.is_disjoint(&s.test) && s.validation.is_disjoint(&s.test));
        let union: BTreeSet<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        prop_assert_eq!(union.len(), n);
        prop_assert_eq!(&make_split(&refs, sizes, seed, SplitUnit::Segment).unwrap(), &s);
        prop_assert_eq!(DatasetSplit::parse_manifest(&s.to_manifest()).unwrap(), s);
    }

    #[test]
    fn patient_splits_never_straddle(n in 3usize..30, per in 1usize..4, seed in any::<u64>()) {
        let segs = records(n, per);
        let refs: Vec<&SegmentRecord> = segs.iter().collect();
        let s = make_split(&refs, [n - 2, 1, 1], seed, SplitUnit::Patient).unwrap();
        for part in [&s.train, &s.validation, &s.test] {
            let patients: BTreeSet<&str> = part.iter().map(|id| &id[..3]).collect();
            for other in [&s.train, &s.validation, &s.test] {
                if std::ptr::eq(part, other) {
                    continue;
                }
                prop_assert!(other.iter().all(|id| !patients.contains(&id[..3])));
            }
        }
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n * per);
    }
}
