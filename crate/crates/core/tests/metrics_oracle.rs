use ynet_core::metrics::{compute_report, ConfusionMatrix};
use ynet_core::Rng;

struct Oracle {
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    accuracy: f64,
}

/// Recounts TP/FP/FN per class straight from the prediction list.
fn brute_force(k: usize, pairs: &[(usize, usize)]) -> Oracle {
    let mut o = Oracle {
        precision: vec![],
        recall: vec![],
        f1: vec![],
        accuracy: 0.0,
    };
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as u64;
        let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as u64;
        let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as u64;
        let p = if tp + fp == 0 { 0.0 } else { 100.0 * tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { 100.0 * tp as f64 / (tp + fn_) as f64 };
        o.precision.push(p);
        o.recall.push(r);
        o.f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    o.accuracy = 100.0 * correct as f64 / pairs.len() as f64;
    o
}

fn random_set(rng: &mut Rng) -> (usize, Vec<(usize, usize)>) {
    let k = 2 + rng.below(9);
    let n = 1 + rng.below(1000);
    let skill = rng.uniform();
    let pairs = (0..n)
        .map(|_| {
            let t = rng.below(k);
            let p = if rng.bernoulli(skill) { t } else { rng.below(k) };
            (t, p)
        })
        .collect();
    (k, pairs)
}

fn matrix(k: usize, pairs: &[(usize, usize)]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new((0..k).map(|i| format!("class{i}")).collect());
    for &(t, p) in pairs {
        cm.accumulate(t, p).unwrap();
    }
    cm
}

#[test]
fn report_equals_brute_force_recount() {
    let mut rng = Rng::new(100, 0);
    for _ in 0..100 {
        let (k, pairs) = random_set(&mut rng);
        let report = compute_report(&matrix(k, &pairs)).unwrap();
        let o = brute_force(k, &pairs);
        for (c, m) in report.classes.iter().enumerate() {
            assert_eq!(m.precision, o.precision[c]);
            assert_eq!(m.recall, o.recall[c]);
            assert_eq!(m.f1, o.f1[c]);
        }
        assert_eq!(report.accuracy, o.accuracy);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
        assert_eq!(report.macro_precision, mean(&o.precision));
        assert_eq!(report.macro_recall, mean(&o.recall));
        assert_eq!(report.macro_f1, mean(&o.f1));
    }
}

#[test]
fn accuracy_is_micro_recall() {
    let mut rng = Rng::new(5, 0);
    for _ in 0..20 {
        let (k, pairs) = random_set(&mut rng);
        let cm = matrix(k, &pairs);
        let report = compute_report(&cm).unwrap();
        let micro_tp: u64 = (0..k).map(|c| cm.get(c, c)).sum();
        let micro_support: u64 = (0..k).map(|c| cm.row_sum(c)).sum();
        assert_eq!(report.accuracy, 100.0 * micro_tp as f64 / micro_support as f64);
        assert_eq!(report.accuracy, 100.0 * cm.trace() as f64 / cm.total() as f64);
    }
}

#[test]
fn class_permutation_only_reorders_rows() {
    let mut rng = Rng::new(6, 0);
    for _ in 0..20 {
        let (k, pairs) = random_set(&mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<_> = pairs.iter().map(|&(t, p)| (perm[t], perm[p])).collect();
        let a = compute_report(&matrix(k, &pairs)).unwrap();
        let b = compute_report(&matrix(k, &permuted)).unwrap();
        for c in 0..k {
            assert_eq!(a.classes[c].precision, b.classes[perm[c]].precision);
            assert_eq!(a.classes[c].recall, b.classes[perm[c]].recall);
            assert_eq!(a.classes[c].f1, b.classes[perm[c]].f1);
        }
        assert_eq!(a.accuracy, b.accuracy);
        for (x, y) in [
            (a.macro_precision, b.macro_precision),
            (a.macro_recall, b.macro_recall),
            (a.macro_f1, b.macro_f1),
        ] {
            // summation order changes, so allow a few ulps
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn duplicating_samples_changes_nothing() {
    let mut rng = Rng::new(8, 0);
    for _ in 0..20 {
        let (k, pairs) = random_set(&mut rng);
        let doubled: Vec<_> = pairs.iter().chain(&pairs).copied().collect();
        let a = compute_report(&matrix(k, &pairs)).unwrap();
        let b = compute_report(&matrix(k, &doubled)).unwrap();
        assert_eq!(a.classes, b.classes);
        assert_eq!(
            (a.accuracy, a.macro_precision, a.macro_recall, a.macro_f1),
            (b.accuracy, b.macro_precision, b.macro_recall, b.macro_f1)
        );
    }
}

#[test]
fn hand_enumerated_two_class_case() {
    let cm = ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], &[vec![2, 1], vec![0, 3]]).unwrap();
    let r = compute_report(&cm).unwrap();
    assert_eq!(format!("{:.2}", r.accuracy), "83.33");
    assert_eq!(format!("{:.2}", r.macro_f1), "82.86");
    assert_eq!(format!("{:.2}", r.classes[0].f1), "80.00");
    assert_eq!(format!("{:.2}", r.classes[1].f1), "85.71");
}
