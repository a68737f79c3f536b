//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so every line reaches stdout.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use remission_core::checkpoint::load_checkpoint;
use remission_core::domain::{make_split, BinaryLabel, SplitUnit};
use remission_core::evaluate::{aggregate, auc, metrics, render_table, ConfusionCounts, TABLE_COLUMNS};
use remission_core::experiment::{self, ExperimentConfig};
use remission_core::models::{build, gradcheck, param_count, Family, ModelConfig};
use remission_core::preprocess::{Pipeline, PreprocessConfig};
use remission_core::resample::{ruao, smote, train_autoencoder, AutoencoderConfig, ClassIndex, SmoteConfig, Strategy};
use remission_core::synth::{self, SynthConfig};
use remission_core::{seed, Image};
use remission_nn::Tensor;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const A: BinaryLabel = BinaryLabel::Remission;
const P: BinaryLabel = BinaryLabel::Activity;

fn c01_row_3_2_consistency() -> Outcome {
    let m = metrics(&ConfusionCounts { tp: 9, fn_: 3, tn: 37, fp: 2 });
    let (acc, sens, spec) = (m.accuracy.unwrap(), m.sensitivity.unwrap(), m.specificity.unwrap());
    ensure!((acc - 0.902).abs() <= 0.0005, "accuracy {acc}");
    ensure!(sens == 0.75, "sensitivity {sens}");
    ensure!((spec - 0.949).abs() <= 0.0005, "specificity {spec}");
    // published row 3.2 values at two decimals
    let r2 = |v: f64| (v * 100.0).round() / 100.0;
    ensure!(r2(acc) == 0.90 && r2(sens) == 0.75 && r2(spec) == 0.95, "rounded {} {} {}", r2(acc), r2(sens), r2(spec));
    ensure!(9 + 3 + 37 + 2 == 16 + 35, "N != 51");
    Ok(format!("acc {acc:.4} sens {sens} spec {spec:.4} at N=51"))
}

fn c02_split_protocol(dir: &Path) -> Outcome {
    let ds = synth::generate(&SynthConfig::study_shaped(11), dir).map_err(|e| e.to_string())?;
    let segs = ds.segment_list();
    ensure!(segs.len() == 154, "{} segments", segs.len());
    let a = make_split(&segs, [103, 16, 35], 3, SplitUnit::Segment).map_err(|e| e.to_string())?;
    ensure!(a.sizes() == [103, 16, 35], "sizes {:?}", a.sizes());
    ensure!(a.train.is_disjoint(&a.validation) && a.train.is_disjoint(&a.test) && a.validation.is_disjoint(&a.test), "overlap");
    let all: BTreeSet<&String> = a.train.iter().chain(&a.validation).chain(&a.test).collect();
    ensure!(all.len() == 154, "union {}", all.len());
    let b = make_split(&segs, [103, 16, 35], 3, SplitUnit::Segment).map_err(|e| e.to_string())?;
    ensure!(a == b, "same seed gave different splits");
    let c = make_split(&segs, [103, 16, 35], 4, SplitUnit::Segment).map_err(|e| e.to_string())?;
    ensure!(a != c, "different seeds gave identical splits");
    Ok("103/16/35, disjoint, seed-deterministic".into())
}

fn c03_synthetic_end_to_end(dir: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::desk();
    cfg.output_dir = dir.to_path_buf();
    ensure!(cfg.data.synth.difficulty == 0.0 && cfg.model.family == Family::Ours, "preset is not ours at difficulty 0");
    ensure!(cfg.train.epochs <= 20, "{} epochs", cfg.train.epochs);
    let t = Instant::now();
    let out = experiment::run(&cfg).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let (acc, a) = (out.report.accuracy.unwrap_or(0.0), out.report.auc.unwrap_or(0.0));
    ensure!(a >= 0.95, "AUC {a}");
    ensure!(acc >= 0.90, "accuracy {acc}");
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!("AUC {a:.3} accuracy {acc:.3} on {} segments in {:.0?}", out.report.n, elapsed))
}

fn c04_null_model(dir: &Path) -> Outcome {
    let strategies = [Strategy::Ruao, Strategy::Smote, Strategy::None, Strategy::Ruao, Strategy::Smote];
    let mut aucs = Vec::new();
    for (s, strategy) in strategies.into_iter().enumerate() {
        let s = s as u64;
        let mut cfg = ExperimentConfig::smoke();
        cfg.output_dir = dir.join(format!("seed{s}"));
        cfg.data.synth = SynthConfig { n_patients: 150, segments_per_patient: [2, 2], image_size: 32, activity_fraction: 0.4, seed: 100 + s, ..SynthConfig::default() };
        cfg.data.permute_labels = true;
        cfg.split.sizes = Some([100, 20, 180]);
        cfg.split.seed = 200 + s;
        cfg.train.seed = 300 + s;
        cfg.train.epochs = 3;
        cfg.resample.strategy = strategy;
        let out = experiment::run(&cfg).map_err(|e| format!("seed {s}: {e}"))?;
        let a = out.report.auc.ok_or("undefined AUC")?;
        ensure!((0.35..=0.65).contains(&a), "seed {s} ({}) AUC {a:.3} over {} segments", strategy.label(), out.report.n);
        aucs.push(format!("{a:.3}"));
    }
    Ok(format!("AUCs [{}] over 200 segments each", aucs.join(", ")))
}

fn c05_resampling_invariants(dir: &Path) -> Outcome {
    let mut rng = seed::rng(55);
    for _ in 0..300 {
        let (n_neg, n_pos) = (rng.random_range(1..200usize), rng.random_range(1..200usize));
        let index = ClassIndex::new((0..n_neg).map(|i| format!("n{i:03}")).collect(), (0..n_pos).map(|i| format!("p{i:03}")).collect());
        let r = ruao(&index, rng.random()).map_err(|e| e.to_string())?;
        let (a, b) = r.counts();
        ensure!(a == b, "RUAO {n_neg}/{n_pos} -> {a}/{b}");
        ensure!(r.negatives.iter().all(|i| index.negatives.contains(i)) && r.positives.iter().all(|i| index.positives.contains(i)), "RUAO invented an id");
    }

    let cfg = SynthConfig { n_patients: 15, segments_per_patient: [2, 2], image_size: 32, activity_fraction: 0.25, seed: 9, ..SynthConfig::default() };
    let ds = synth::generate(&cfg, dir).map_err(|e| e.to_string())?;
    let pipe = Pipeline::new(PreprocessConfig { target_size: 32, custom_size: true, ..Default::default() }).map_err(|e| e.to_string())?;
    let images: BTreeMap<String, Image> = ds.images.values().map(|r| (r.image_id.clone(), pipe.prepare(&ds.load_pixels(r).unwrap()).unwrap())).collect();
    let index = ClassIndex::from_segments(&ds, ds.segments.keys());
    let train: Vec<&Image> = images.values().collect();
    let ae = train_autoencoder(&train, AutoencoderConfig { work_size: 16, channels: [8, 16, 16], epochs: 15, ..Default::default() }, 32).map_err(|e| e.to_string())?;
    let mut synthetic = 0;
    for (k, s) in [(1, 1u64), (3, 2), (5, 3)] {
        let out = smote(&index, &images, &ae, &SmoteConfig { k, seed: s, ..Default::default() }).map_err(|e| e.to_string())?;
        let (a, b) = out.counts();
        ensure!(a == b, "SMOTE k={k} -> {a}/{b}");
        let norm = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        for s in &out.synthetic {
            let gap = norm(&s.feature, &s.base_feature) + norm(&s.feature, &s.neighbour_feature) - norm(&s.base_feature, &s.neighbour_feature);
            ensure!(gap.abs() <= 1e-5, "{} off the segment by {gap:e}", s.id);
        }
        synthetic += out.synthetic.len();
    }
    Ok(format!("300 RUAO cases; {synthetic} SMOTE samples collinear within 1e-5"))
}

fn frequency_oracle(labels: &[BinaryLabel]) -> BinaryLabel {
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    if 2 * pos >= labels.len() {
        P
    } else {
        A
    }
}

fn c06_aggregation_oracle() -> Outcome {
    let mut checked = 0;
    for len in 1..=6usize {
        for mask in 0u32..(1 << len) {
            let labels: Vec<BinaryLabel> = (0..len).map(|i| if mask >> i & 1 == 1 { P } else { A }).collect();
            let got = aggregate(&labels).map_err(|e| e.to_string())?;
            ensure!(got == frequency_oracle(&labels), "{labels:?} -> {got:?}");
            checked += 1;
        }
    }
    ensure!(aggregate(&[]).is_err(), "empty list accepted");
    ensure!(aggregate(&[A, P]).unwrap() == P && aggregate(&[A, A, P, P]).unwrap() == P, "tie not ACTIVITY");
    Ok(format!("{checked} label lists, ties -> ACTIVITY"))
}

fn c07_auc_oracle() -> Outcome {
    let mut rng = seed::rng(77);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(2..=12usize);
        // coarse grid so ties are common
        let scores: Vec<(f64, BinaryLabel)> = (0..n).map(|_| (rng.random_range(0..5u32) as f64 / 4.0, if rng.random() { P } else { A })).collect();
        let pos: Vec<f64> = scores.iter().filter(|s| s.1 == P).map(|s| s.0).collect();
        let neg: Vec<f64> = scores.iter().filter(|s| s.1 == A).map(|s| s.0).collect();
        if pos.is_empty() || neg.is_empty() {
            ensure!(auc(&scores).is_err(), "single-class instance accepted");
            continue;
        }
        let wins: f64 = pos.iter().flat_map(|p| neg.iter().map(move |q| if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 })).sum();
        let brute = wins / (pos.len() * neg.len()) as f64;
        let got = auc(&scores).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute).abs());
        ensure!((got - brute).abs() <= 1e-12, "{scores:?}: {got} vs {brute}");
        done += 1;
    }
    Ok(format!("1000 instances, max |diff| {worst:e}"))
}

fn c08_gradient_checks() -> Outcome {
    let mut parts = Vec::new();
    for f in [Family::Resnet, Family::ResnetA, Family::Vit, Family::Ours] {
        let cfg = ModelConfig::tiny(f);
        let net = build::<f64>(&cfg, 3).map_err(|e| e.to_string())?;
        let s = cfg.input_size;
        let mut rng = seed::rng(5);
        let x = Tensor::from_vec([2, s, s, 3], (0..2 * s * s * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;
        let r = gradcheck::check(&net, &x, &[0, 1], 1e-5);
        ensure!(r.checked == param_count(&net), "{:?}: checked {} of {}", f, r.checked, param_count(&net));
        ensure!(r.max_rel_error < 1e-4, "{:?}: rel error {:e} at {:?}", f, r.max_rel_error, r.worst);
        parts.push(format!("{} {:.1e}", f.name(), r.max_rel_error));
    }
    Ok(parts.join(", "))
}

fn c09_parameter_reduction() -> Outcome {
    let a = param_count(&build::<f32>(&ModelConfig::resnet_a_desk(), 0).map_err(|e| e.to_string())?);
    let r = param_count(&build::<f32>(&ModelConfig::resnet_desk(), 0).map_err(|e| e.to_string())?);
    ensure!(a < r, "resnet_a {a} >= resnet {r}");
    Ok(format!("resnet_a {a} < resnet {r}"))
}

fn c10_determinism(dir: &Path) -> Outcome {
    let mut files = Vec::new();
    for tag in ["a", "b"] {
        let mut cfg = ExperimentConfig::smoke();
        cfg.train.epochs = 3;
        cfg.output_dir = dir.join(tag);
        let out = experiment::run(&cfg).map_err(|e| e.to_string())?;
        let read = |n: &str| std::fs::read(cfg.output_dir.join(n)).unwrap();
        files.push((read("train_log.jsonl"), read("report.jsonl"), read("checkpoint.bin"), out));
    }
    let (a, b) = (&files[0], &files[1]);
    ensure!(a.0 == b.0, "train logs differ");
    ensure!(a.1 == b.1, "eval reports differ");
    ensure!(a.2 == b.2, "checkpoints differ");

    let loaded = load_checkpoint(&dir.join("a").join("checkpoint.bin")).map_err(|e| e.to_string())?;
    let original = a.3.checkpoint.network().map_err(|e| e.to_string())?;
    let restored = loaded.network().map_err(|e| e.to_string())?;
    let s = original.config.input_size;
    let mut rng = seed::rng(8);
    let probe = Tensor::from_vec([4, s, s, 3], (0..4 * s * s * 3).map(|_| rng.random_range(-2.0f32..2.0)).collect()).map_err(|e| e.to_string())?;
    let (x, y) = (original.forward(&probe).map_err(|e| e.to_string())?, restored.forward(&probe).map_err(|e| e.to_string())?);
    ensure!(x.data() == y.data(), "probe logits differ by {}", x.max_abs_diff(&y));
    Ok(format!("byte-identical log/report/checkpoint ({} bytes); probe logits exact", a.2.len()))
}

fn c11_grid_shape(dir: &Path) -> Outcome {
    let cells = experiment::reproduction_grid();
    let expected = ["1.1", "1.2", "1.3", "1.4", "1.5", "1.6", "1.7", "1.8", "1.9", "2.1", "2.2", "3.1", "3.2"];
    let ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
    ensure!(ids == expected, "ids {ids:?}");
    ensure!(TABLE_COLUMNS == ["ID", "Backbone", "Image size", "Resampling", "Accuracy", "Sensitivity", "Specificity", "AUC"], "columns {TABLE_COLUMNS:?}");

    let mut base = ExperimentConfig::smoke();
    base.output_dir = dir.to_path_buf();
    base.data.synth.image_size = 24;
    base.train.epochs = 1;
    let sizes = BTreeMap::from([(224, 16), (299, 24), (512, 32)]);
    let report = experiment::grid(&base, &cells, &sizes).map_err(|e| e.to_string())?;
    ensure!(report.failures.is_empty(), "failures {:?}", report.failures);
    ensure!(report.rows.len() == 13, "{} rows", report.rows.len());
    let got: Vec<&str> = report.rows.iter().map(|r| r.id.as_str()).collect();
    ensure!(got == expected, "row order {got:?}");
    let reference = [
        ("ResNet-101", "[224, 224]", "RUAO"),
        ("ResNet-101", "[299, 299]", "RUAO"),
        ("ResNet-101", "[512, 512]", "RUAO"),
        ("ResNet-101", "[224, 224]", "NO"),
        ("EfficientNet-B0", "[224, 224]", "NO"),
        ("ResNet-101", "[224, 224]", "RUAO"),
        ("EfficientNet-B0", "[224, 224]", "RUAO"),
        ("ResNet-101", "[224, 224]", "SMOTE"),
        ("EfficientNet-B0", "[224, 224]", "SMOTE"),
        ("ViT-Base", "[224, 224]", "RUAO"),
        ("ViT-Large", "[224, 224]", "RUAO"),
        ("ResNet-A", "[224, 224]", "RUAO"),
        ("Our", "[224, 224]", "RUAO"),
    ];
    for (row, (b, s, r)) in report.rows.iter().zip(reference) {
        ensure!((row.backbone.as_str(), row.image_size.as_str(), row.resampling.as_str()) == (b, s, r), "row {}: {:?}", row.id, (&row.backbone, &row.image_size, &row.resampling));
        ensure!(row.config_digest.len() == 64, "row {} digest", row.id);
    }
    let table = render_table(&report.rows);
    let header = table.lines().next().unwrap_or_default();
    ensure!(header == format!("| {} | Config digest |", TABLE_COLUMNS.join(" | ")), "header {header}");
    ensure!(table.lines().count() == 15, "table has {} lines", table.lines().count());
    Ok("13 rows, IDs 1.1-3.2, columns in reference order".into())
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).is_test(true).try_init();
    let root = tempfile::tempdir().expect("temp dir");
    let dir = |n: &str| root.path().join(n);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 row 3.2 consistency", Box::new(c01_row_3_2_consistency)),
        ("2 split protocol", Box::new(|| c02_split_protocol(&dir("c02")))),
        ("3 synthetic end-to-end", Box::new(|| c03_synthetic_end_to_end(&dir("c03")))),
        ("4 null-model sanity", Box::new(|| c04_null_model(&dir("c04")))),
        ("5 resampling invariants", Box::new(|| c05_resampling_invariants(&dir("c05")))),
        ("6 aggregation oracle", Box::new(c06_aggregation_oracle)),
        ("7 AUC oracle", Box::new(c07_auc_oracle)),
        ("8 gradient checks", Box::new(c08_gradient_checks)),
        ("9 parameter reduction", Box::new(c09_parameter_reduction)),
        ("10 determinism", Box::new(|| c10_determinism(&dir("c10")))),
        ("11 grid shape", Box::new(|| c11_grid_shape(&dir("c11")))),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in &criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{:.1?}]", t.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why} [{:.1?}]", t.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
