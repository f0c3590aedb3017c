use gtp_core::metrics::{
    confusion_metrics, delong_test, mean_std, pr_curve, roc_auc, stratified_folds, summarize_folds, MetricsReport,
    LOG10_ALPHA_05,
};
use gtp_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Explicit double-loop structural components and the z statistic.
fn delong_oracle(a: &[f64], b: &[f64], labels: &[bool]) -> (f64, f64, f64) {
    let psi = |x: f64, y: f64| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let mut v10 = vec![[0.0; 2]; pos.len()];
    let mut v01 = vec![[0.0; 2]; neg.len()];
    for (pi, &i) in pos.iter().enumerate() {
        for (ni, &j) in neg.iter().enumerate() {
            for (r, s) in [a, b].iter().enumerate() {
                let v = psi(s[i], s[j]);
                v10[pi][r] += v / n;
                v01[ni][r] += v / m;
            }
        }
    }
    let auc = |r: usize| v10.iter().map(|v| v[r]).sum::<f64>() / m;
    let (auc_a, auc_b) = (auc(0), auc(1));
    let cov = |v: &Vec<[f64; 2]>, r: usize, s: usize, th: [f64; 2]| {
        v.iter().map(|x| (x[r] - th[r]) * (x[s] - th[s])).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let th10 = [auc_a, auc_b];
    let th01 = [
        v01.iter().map(|v| v[0]).sum::<f64>() / n,
        v01.iter().map(|v| v[1]).sum::<f64>() / n,
    ];
    let s10 = |r, s| cov(&v10, r, s, th10);
    let s01 = |r, s| cov(&v01, r, s, th01);
    let var = (s10(0, 0) + s10(1, 1) - 2.0 * s10(0, 1)) / m + (s01(0, 0) + s01(1, 1) - 2.0 * s01(0, 1)) / n;
    (auc_a, auc_b, (auc_a - auc_b) / var.sqrt())
}

fn random_instance(seed: u64, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng::stream(seed, 0);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random::<bool>()).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_equals_pair_counting(seed in any::<u64>(), n in 2usize..=50, levels in 2u32..40) {
        let (scores, labels) = random_instance(seed, n, levels);
        let roc = roc_auc(&scores, &labels).unwrap();
        prop_assert_eq!(roc.auc, pair_oracle(&scores, &labels));
        prop_assert_eq!((roc.fpr[0], roc.tpr[0]), (0.0, 0.0));
        prop_assert_eq!((*roc.fpr.last().unwrap(), *roc.tpr.last().unwrap()), (1.0, 1.0));
    }

    #[test]
    fn auc_ignores_monotone_transforms(seed in any::<u64>(), n in 2usize..=50) {
        let (scores, labels) = random_instance(seed, n, 1000);
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap().auc, roc_auc(&warped, &labels).unwrap().auc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn delong_matches_double_loops(seed in any::<u64>(), n in 6usize..40) {
        let (a, mut labels) = random_instance(seed, n, 50);
        labels[2] = true;
        labels[3] = false;
        let (b, _) = random_instance(seed ^ 0xABCD, n, 50);
        let (auc_a, auc_b, z) = delong_oracle(&a, &b, &labels);
        prop_assume!(z.is_finite());
        let got = delong_test(&a, &b, &labels).unwrap();
        prop_assert!((got.auc_a - auc_a).abs() < 1e-10);
        prop_assert!((got.auc_b - auc_b).abs() < 1e-10);
        prop_assert!((got.z - z).abs() < 1e-10, "{} vs {}", got.z, z);

        let swapped = delong_test(&b, &a, &labels).unwrap();
        prop_assert!((swapped.z + got.z).abs() < 1e-12);
        prop_assert!((swapped.log10_p - got.log10_p).abs() < 1e-12);
        prop_assert!(got.log10_p <= 0.0);
    }
}

#[test]
fn delong_examples() {
    let (a, labels) = random_instance(3, 12, 100);
    let same = delong_test(&a, &a, &labels).unwrap();
    assert_eq!(same.log10_p, 0.0);
    assert_eq!(same.z, 0.0);
    assert_eq!((LOG10_ALPHA_05 * 1000.0).round() / 1000.0, -1.301);

    // Twelve-sample paired case.
    let labels = [true, true, true, true, true, true, false, false, false, false, false, false];
    let a = [0.9, 0.8, 0.75, 0.6, 0.55, 0.3, 0.7, 0.5, 0.4, 0.35, 0.2, 0.1];
    let b = [0.6, 0.85, 0.4, 0.5, 0.65, 0.45, 0.55, 0.6, 0.3, 0.5, 0.25, 0.15];
    let got = delong_test(&a, &b, &labels).unwrap();
    let (auc_a, auc_b, z) = delong_oracle(&a, &b, &labels);
    assert!((got.auc_a - auc_a).abs() < 1e-12 && (got.auc_b - auc_b).abs() < 1e-12);
    assert!((got.z - z).abs() < 1e-10);
    assert!(delong_test(&a[..3], &b[..3], &labels[..3]).is_err());
}

#[test]
fn roc_examples() {
    let labels = [true, true, false, false];
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap().auc, 1.0);
    assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap().auc, 0.5);
    assert!(roc_auc(&[0.5, 0.6], &[true, true]).is_err());
}

/// Walks the ranking one sample at a time and sums precision at each positive.
fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut ap) = (0.0, 0.0);
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
            ap += tp / (rank + 1) as f64 / p;
        }
    }
    ap
}

#[test]
fn pr_examples() {
    let labels = [true, true, false, false];
    assert_eq!(pr_curve(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap().average_precision, 1.0);

    let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
    let labels = [true, true, true, false, false, false];
    let ap = pr_curve(&scores, &labels).unwrap().average_precision;
    assert!((ap - ap_oracle(&scores, &labels)).abs() < 1e-15);
    assert!((ap - (1.0 / 4.0 + 2.0 / 5.0 + 3.0 / 6.0) / 3.0).abs() < 1e-15);

    let mut scores = vec![0.0; 10];
    scores[0] = 1.0;
    let mut labels = vec![false; 10];
    labels[0] = true;
    for (i, s) in scores.iter_mut().enumerate().skip(1) {
        *s = 0.5 - i as f64 * 0.01;
    }
    assert_eq!(pr_curve(&scores, &labels).unwrap().average_precision, 1.0);
    assert!(pr_curve(&[0.1], &[false]).is_err());
}

proptest! {
    #[test]
    fn ap_matches_enumeration_without_ties(seed in any::<u64>(), n in 2usize..40) {
        let (_, labels) = random_instance(seed, n, 2);
        let scores: Vec<f64> = rng::permutation(&mut rng::stream(seed, 9), n).into_iter().map(|i| i as f64).collect();
        let ap = pr_curve(&scores, &labels).unwrap().average_precision;
        prop_assert!((ap - ap_oracle(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn confusion_examples() {
    let perfect = confusion_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert!(perfect
        .per_class
        .iter()
        .all(|m| m.precision == 1.0 && m.recall == 1.0 && m.specificity == 1.0));

    let zeros = confusion_metrics(&[0, 1, 2, 0, 1, 2], &[0; 6], 3).unwrap();
    assert!((zeros.accuracy - 1.0 / 3.0).abs() < 1e-15);
    assert!(zeros.per_class[1].precision_undefined);
    assert_eq!(zeros.per_class[1].precision, 0.0);

    let labels = [0, 0, 1, 2, 2, 2];
    let preds = [0, 1, 1, 2, 2, 0];
    let r = confusion_metrics(&labels, &preds, 3).unwrap();
    assert_eq!(r.matrix, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 2]]);
    assert_eq!(r.matrix.iter().flatten().sum::<usize>(), 6);
    for c in 0..3 {
        let count = |f: &dyn Fn(usize, usize) -> bool| labels.iter().zip(&preds).filter(|(&y, &p)| f(y, p)).count() as f64;
        let tp = count(&|y, p| y == c && p == c);
        let fp = count(&|y, p| y != c && p == c);
        let fn_ = count(&|y, p| y == c && p != c);
        let tn = count(&|y, p| y != c && p != c);
        assert_eq!(r.per_class[c].precision, tp / (tp + fp));
        assert_eq!(r.per_class[c].recall, tp / (tp + fn_));
        assert_eq!(r.per_class[c].specificity, tn / (tn + fp));
    }
    assert_eq!(r.accuracy, 4.0 / 6.0);
    assert!(confusion_metrics(&[], &[], 3).is_err());
    assert!(confusion_metrics(&[0], &[3], 3).is_err());
}

#[test]
fn folds_partition_and_stratify() {
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let folds = stratified_folds(&labels, 5, 1).unwrap();
    let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..30).collect::<Vec<_>>());
    for f in &folds {
        assert_eq!(f.len(), 6);
        for c in 0..3 {
            assert_eq!(f.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
    }
    assert_eq!(folds, stratified_folds(&labels, 5, 1).unwrap());
    assert!(stratified_folds(&labels, 1, 1).is_err());
}

#[test]
fn mean_std_is_sample_std() {
    let m = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(m.mean, 2.5);
    assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(mean_std(&[7.0]).unwrap().std, 0.0);
}

#[test]
fn report_round_trip() {
    let labels = vec![0, 1, 2, 0, 1, 2];
    let probs = vec![
        vec![0.8, 0.1, 0.1],
        vec![0.2, 0.7, 0.1],
        vec![0.1, 0.2, 0.7],
        vec![0.3, 0.4, 0.3],
        vec![0.1, 0.8, 0.1],
        vec![0.2, 0.2, 0.6],
    ];
    let report = MetricsReport::from_probabilities(&labels, &probs, 3).unwrap();
    assert!((report.accuracy() - 5.0 / 6.0).abs() < 1e-15);
    assert!(report.roc.iter().all(|r| r.is_some()));
    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path(), &serde_json::json!({"seed": 1})).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics_report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["samples"], 6);
    assert_eq!(v["config"]["seed"], 1);
    let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert!(csv.starts_with("class,curve,threshold,x,y\n0,roc,,0,0\n"));

    let summary = summarize_folds(vec![report.clone(), report]).unwrap();
    assert_eq!(summary.accuracy.std, 0.0);
    assert_eq!(summary.precision.len(), 3);
}
