use proptest::prelude::*;
use rand::seq::SliceRandom;
use remission_core::domain::BinaryLabel;
use remission_core::evaluate::*;
use remission_core::models::{build, Family, ModelConfig};
use remission_core::seed;
use remission_nn::Tensor;

fn label(b: bool) -> BinaryLabel {
    if b {
        BinaryLabel::Activity
    } else {
        BinaryLabel::Remission
    }
}

fn brute_auc(scores: &[(f64, BinaryLabel)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in scores.iter().filter(|s| s.1.is_positive()) {
        for n in scores.iter().filter(|s| !s.1.is_positive()) {
            pairs += 1.0;
            wins += if p.0 > n.0 {
                1.0
            } else if p.0 == n.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn two_class() -> impl Strategy<Value = Vec<(f64, BinaryLabel)>> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..40)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| v.into_iter().map(|(s, b)| (f64::from(s) / 19.0, label(b))).collect())
}

proptest! {
    #[test]
    fn metrics_match_naive_recount(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let preds: Vec<(BinaryLabel, BinaryLabel)> = pairs.iter().map(|&(p, t)| (label(p), label(t))).collect();
        let c = confusion(&preds);
        prop_assert_eq!(c.total(), preds.len());
        let correct = pairs.iter().filter(|(p, t)| p == t).count();
        let pos = pairs.iter().filter(|(_, t)| *t).count();
        let hit_pos = pairs.iter().filter(|(p, t)| *p && *t).count();
        let hit_neg = pairs.iter().filter(|(p, t)| !*p && !*t).count();
        let m = metrics(&c);
        prop_assert_eq!(m.accuracy, Some(correct as f64 / pairs.len() as f64));
        prop_assert_eq!(m.sensitivity, (pos > 0).then(|| hit_pos as f64 / pos as f64));
        let neg = pairs.len() - pos;
        prop_assert_eq!(m.specificity, (neg > 0).then(|| hit_neg as f64 / neg as f64));
        if let (Some(se), Some(sp), Some(acc)) = (m.sensitivity, m.specificity, m.accuracy) {
            let recomposed = (se * pos as f64 + sp * neg as f64) / pairs.len() as f64;
            prop_assert!((recomposed - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_matches_pairs_and_trapezoid(scores in two_class()) {
        let a = auc(&scores).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - brute_auc(&scores)).abs() < 1e-12);
        prop_assert!((a - trapezoid(&roc_curve(&scores).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn auc_of_negated_scores_is_complement(raw in prop::collection::btree_set(0u32..10_000, 2..30), seed_ in any::<u64>()) {
        let mut vals: Vec<u32> = raw.into_iter().collect();
        vals.shuffle(&mut seed::rng(seed_));
        let scores: Vec<(f64, BinaryLabel)> = vals.iter().enumerate().map(|(i, &v)| (f64::from(v), label(i % 2 == 0))).collect();
        let neg: Vec<(f64, BinaryLabel)> = scores.iter().map(|&(s, l)| (-s, l)).collect();
        prop_assert!((auc(&scores).unwrap() + auc(&neg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_permutation_invariant(bits in prop::collection::vec(any::<bool>(), 1..15), seed_ in any::<u64>()) {
        let labels: Vec<BinaryLabel> = bits.iter().map(|&b| label(b)).collect();
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut seed::rng(seed_));
        prop_assert_eq!(aggregate(&labels).unwrap(), aggregate(&shuffled).unwrap());
    }
}

#[test]
fn auc_fixed_examples() {
    let sep = [(0.1, label(false)), (0.2, label(false)), (0.8, label(true)), (0.9, label(true))];
    assert_eq!(auc(&sep).unwrap(), 1.0);
    let flat = [(0.5, label(false)), (0.5, label(true)), (0.5, label(true))];
    assert_eq!(auc(&flat).unwrap(), 0.5);
    assert_eq!(auc(&[(0.3, label(true))]), Err(EvalError::SingleClassOnly));
}

#[test]
fn row_3_2_confusion_counts() {
    let mut preds = Vec::new();
    preds.extend(std::iter::repeat_n((label(true), label(true)), 9));
    preds.extend(std::iter::repeat_n((label(false), label(true)), 3));
    preds.extend(std::iter::repeat_n((label(false), label(false)), 37));
    preds.extend(std::iter::repeat_n((label(true), label(false)), 2));
    let c = confusion(&preds);
    assert_eq!(c, ConfusionCounts { tp: 9, fn_: 3, tn: 37, fp: 2 });
    assert_eq!(c.total(), 51);
    let m = metrics(&ConfusionCounts { tp: 1, fn_: 0, tn: 1, fp: 0 });
    assert_eq!((m.accuracy, m.sensitivity, m.specificity), (Some(1.0), Some(1.0), Some(1.0)));
    let same: Vec<_> = preds.iter().map(|p| (p.1, p.1)).collect();
    assert_eq!(metrics(&confusion(&same)).accuracy, Some(1.0));
}

fn segments(n: usize, activity: usize, size: usize) -> Vec<EvalSegment> {
    let mut rng = seed::rng(n as u64);
    (0..n)
        .map(|i| EvalSegment {
            segment_id: format!("seg{i:03}"),
            truth: label(i < activity),
            images: (0..5)
                .map(|_| {
                    use rand::Rng;
                    Tensor::from_vec([size, size, 3], (0..size * size * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
                })
                .collect(),
        })
        .collect()
}

#[test]
fn fifty_one_segments_give_fifty_one_rows_in_any_order() {
    let net = build::<f32>(&ModelConfig::tiny(Family::Ours), 1).unwrap();
    let mut segs = segments(51, 12, 16);
    let a = evaluate_split(&net, &segs, "digest", 7).unwrap();
    assert_eq!(a.n, 51);
    assert_eq!(a.segments.len(), 51);
    assert_eq!(a.counts.positives(), 12);
    segs.shuffle(&mut seed::rng(2));
    let b = evaluate_split(&net, &segs, "digest", 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    a.verify().unwrap();
    for s in &a.segments {
        assert!((0.0..=1.0).contains(&s.aggregate_score));
        assert_eq!(s.aggregate_label, aggregate(&s.image_labels).unwrap());
    }
}

#[test]
fn majority_class_predictor_has_zero_sensitivity() {
    let mut net = build::<f32>(&ModelConfig::tiny(Family::Resnet), 1).unwrap();
    let names: Vec<String> = net.params.iter().map(|(_, n, _)| n.to_string()).collect();
    let last_w = names.iter().rev().find(|n| n.starts_with("head") && n.ends_with(".w")).unwrap().clone();
    let last_b = names.iter().rev().find(|n| n.starts_with("head") && n.ends_with(".b")).unwrap().clone();
    let w = net.params.find(&last_w).unwrap();
    net.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = net.params.find(&last_b).unwrap();
    net.params.get_mut(b).data_mut().copy_from_slice(&[4.0, -4.0]);
    let r = evaluate_split(&net, &segments(20, 5, 16), "d", 16).unwrap();
    assert_eq!(r.sensitivity, Some(0.0));
    assert_eq!(r.specificity, Some(1.0));
    assert_eq!(r.accuracy, Some(0.75));
    // every segment scores the same, so the ranking carries no information
    assert_eq!(r.auc, Some(0.5));
}

#[test]
fn jsonl_round_trip_and_tamper_detection() {
    let segs = vec![
        SegmentPrediction::from_scores("a", label(true), vec![0.9, 0.8, 0.2]).unwrap(),
        SegmentPrediction::from_scores("b", label(false), vec![0.1, 0.6, 0.3, 0.7]).unwrap(),
        SegmentPrediction::from_scores("c", label(false), vec![0.2]).unwrap(),
    ];
    let r = EvalReport::from_predictions(segs, "abc").unwrap();
    assert_eq!(r.segments[1].aggregate_label, TIE_POLICY);
    let text = r.to_jsonl();
    assert_eq!(EvalReport::from_jsonl(&text).unwrap(), r);
    let tampered = text.replacen("\"tp\":1", "\"tp\":2", 1);
    assert_ne!(tampered, text);
    assert!(EvalReport::from_jsonl(&tampered).is_err());
}

#[test]
fn table_uses_reference_columns() {
    let row = TableRow {
        id: "3.2".into(),
        backbone: "Our".into(),
        image_size: "[224, 224]".into(),
        resampling: "RUAO".into(),
        accuracy: Some(0.90196),
        sensitivity: Some(0.75),
        specificity: None,
        auc: Some(0.81),
        config_digest: "0123456789abcdef".into(),
    };
    let t = render_table(&[row]);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "| ID | Backbone | Image size | Resampling | Accuracy | Sensitivity | Specificity | AUC | Config digest |");
    assert!(lines[2].starts_with("| 3.2 | Our | [224, 224] | RUAO | 0.902 | 0.750 | n/a | 0.810 |"), "{}", lines[2]);
}
