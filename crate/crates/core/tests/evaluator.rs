use ggograde::evaluator::{auroc_macro, binary_auroc, f1_macro, per_class_auroc, ConfusionMatrix};
use proptest::prelude::*;

/// Pairwise definition: P(s_pos > s_neg) + 0.5 P(s_pos == s_neg).
fn pairwise_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

/// F1 straight from the labels, with no confusion matrix.
fn brute_f1_macro(truth: &[usize], pred: &[usize]) -> f64 {
    let mut total = 0.0;
    for c in 0..4 {
        let tp = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count() as f64;
        let pp = pred.iter().filter(|&&p| p == c).count() as f64;
        let ap = truth.iter().filter(|&&t| t == c).count() as f64;
        let prec = if pp == 0.0 { 0.0 } else { tp / pp };
        let rec = if ap == 0.0 { 0.0 } else { tp / ap };
        total += if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    }
    25.0 * total
}

fn normalised(raw: Vec<u8>) -> Vec<f64> {
    // small integer weights give plenty of ties
    raw.chunks(4)
        .flat_map(|r| {
            let s: f64 = r.iter().map(|&v| v as f64 + 1.0).sum();
            r.iter().map(move |&v| (v as f64 + 1.0) / s).collect::<Vec<_>>()
        })
        .collect()
}

fn samples() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (proptest::collection::vec(0usize..4, n), proptest::collection::vec(0u8..4, n * 4).prop_map(normalised))
    })
}

proptest! {
    #[test]
    fn f1_matches_brute_force(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred).unwrap();
        let f1 = f1_macro(&cm).unwrap();
        prop_assert!((f1 - brute_f1_macro(&truth, &pred)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&f1));
    }

    #[test]
    fn auroc_matches_pairwise_oracle((labels, scores) in samples()) {
        let got = per_class_auroc(&scores, &labels);
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..4 {
            let col: Vec<f64> = scores.chunks(4).map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let want = pairwise_auroc(&col, &pos);
            prop_assert_eq!(want.is_some(), got[c].is_some());
            if let (Some(w), Some(g)) = (want, got[c]) {
                prop_assert!((w - g).abs() < 1e-9);
                sum += w;
                n += 1;
            }
        }
        match auroc_macro(&scores, &labels) {
            Ok(m) => {
                prop_assert!((m - 100.0 * sum / n as f64).abs() < 1e-9);
                prop_assert!((0.0..=100.0).contains(&m));
            }
            Err(_) => prop_assert_eq!(n, 0),
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_column_transforms((labels, scores) in samples()) {
        let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + s.powi(3)).collect();
        let a = per_class_auroc(&scores, &labels);
        let b = per_class_auroc(&warped, &labels);
        for c in 0..4 {
            match (a[c], b[c]) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn auroc_is_invariant_under_sample_permutation((labels, scores) in samples(), rot in 0usize..40) {
        let n = labels.len();
        let r = rot % n;
        let labels2: Vec<usize> = (0..n).map(|i| labels[(i + r) % n]).collect();
        let scores2: Vec<f64> = (0..n).flat_map(|i| scores[4 * ((i + r) % n)..4 * ((i + r) % n) + 4].to_vec()).collect();
        match (auroc_macro(&scores, &labels), auroc_macro(&scores2, &labels2)) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-9),
            (x, y) => prop_assert_eq!(x.is_ok(), y.is_ok()),
        }
    }
}

#[test]
fn reversed_scores_give_zero() {
    let scores = [0.9, 0.8, 0.1, 0.2];
    let pos = [false, false, true, true];
    assert_eq!(binary_auroc(&scores, &pos), Some(0.0));
    assert_eq!(binary_auroc(&scores, &[true; 4]), None);
}
