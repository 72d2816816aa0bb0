//! Classification metrics, report tables and prediction files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::severity::{Severity, NUM_CLASSES};

const K: usize = NUM_CLASSES;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid evaluation argument: {0}")]
    Argument(String),
    #[error("duplicate prediction for scan {0:?}")]
    DuplicatePrediction(String),
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; K]; K]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize]) -> Result<Self, EvalError> {
        if truth.len() != pred.len() {
            return Err(EvalError::Argument(format!("{} labels but {} predictions", truth.len(), pred.len())));
        }
        let mut cm = ConfusionMatrix::default();
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= K || p >= K {
                return Err(EvalError::Argument(format!("class id out of range: true {t}, predicted {p}")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    pub fn fp(&self, i: usize) -> u64 {
        (0..K).map(|t| self.counts[t][i]).sum::<u64>() - self.tp(i)
    }

    pub fn fn_(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() - self.tp(i)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..K).map(|i| self.tp(i)).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 per class as fractions; every `0/0` is 0.
pub fn per_class(cm: &ConfusionMatrix) -> [ClassMetrics; K] {
    std::array::from_fn(|i| {
        let precision = ratio(cm.tp(i), cm.tp(i) + cm.fp(i));
        let recall = ratio(cm.tp(i), cm.tp(i) + cm.fn_(i));
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        ClassMetrics { precision, recall, f1 }
    })
}

/// Unweighted mean of the per-class F1 scores, as a percentage.
pub fn f1_macro(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::Argument("confusion matrix is empty".into()));
    }
    Ok(100.0 * per_class(cm).iter().map(|m| m.f1).sum::<f64>() / K as f64)
}

/// Area under the ROC curve of `scores` for the binary labels `positive`,
/// via the Mann-Whitney rank sum with mid-ranks for ties. `None` when one
/// side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUROC averaged over classes that have both positives and
/// negatives, as a percentage. `scores` is row-major `N x K` with rows
/// summing to one.
pub fn auroc_macro(scores: &[f64], labels: &[usize]) -> Result<f64, EvalError> {
    let n = labels.len();
    if scores.len() != n * K {
        return Err(EvalError::Argument(format!("expected {} scores for {n} samples, got {}", n * K, scores.len())));
    }
    for (r, row) in scores.chunks_exact(K).enumerate() {
        if row.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::Argument(format!("score row {r} is not finite")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(EvalError::Argument(format!("score row {r} sums to {sum}, not 1")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= K) {
        return Err(EvalError::Argument(format!("label {bad} out of range")));
    }
    per_class_auroc(scores, labels)
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<(f64, usize)>, a| Some(acc.map_or((a, 1), |(s, c)| (s + a, c + 1))))
        .map(|(s, c)| 100.0 * s / c as f64)
        .ok_or_else(|| EvalError::Argument("no class has both positive and negative examples".into()))
}

/// One-vs-rest AUROC of each class column (fractions), without input
/// validation.
pub fn per_class_auroc(scores: &[f64], labels: &[usize]) -> [Option<f64>; K] {
    std::array::from_fn(|c| {
        let column: Vec<f64> = scores.chunks_exact(K).map(|row| row[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        binary_auroc(&column, &positive)
    })
}

/// Predictions per class in grade order.
pub fn predict_distribution(preds: &[usize]) -> [usize; K] {
    let mut counts = [0; K];
    for &p in preds {
        counts[p] += 1;
    }
    counts
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub confusion: ConfusionMatrix,
    pub per_class: [ClassMetrics; K],
    pub f1_macro: f64,
    pub auroc_macro: f64,
    pub accuracy: f64,
    pub pred_class_distribution: [usize; K],
    pub n_evaluated: usize,
}

/// Scores every sample by its probability row; the prediction is the
/// highest-probability class (lowest id on ties).
pub fn evaluate(run_id: &str, probs: &[f64], labels: &[usize]) -> Result<EvalReport, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Argument("nothing to evaluate".into()));
    }
    let auroc = auroc_macro(probs, labels)?;
    let preds: Vec<usize> = probs.chunks_exact(K).map(argmax).collect();
    let cm = ConfusionMatrix::from_predictions(labels, &preds)?;
    Ok(EvalReport {
        run_id: run_id.to_string(),
        per_class: per_class(&cm),
        f1_macro: f1_macro(&cm)?,
        auroc_macro: auroc,
        accuracy: cm.accuracy(),
        pred_class_distribution: predict_distribution(&preds),
        n_evaluated: labels.len(),
        confusion: cm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Table1,
    Table2,
    Table3,
}

impl std::str::FromStr for Layout {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table1" => Ok(Layout::Table1),
            "table2" => Ok(Layout::Table2),
            "table3" => Ok(Layout::Table3),
            other => Err(EvalError::Argument(format!("unknown report layout {other:?}"))),
        }
    }
}

/// One table row: a run scored on internal and unseen validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub settings: String,
    pub val: EvalReport,
    pub unseen: EvalReport,
    /// Predicted classes on the test split, when one was scored.
    pub test_distribution: Option<[usize; K]>,
}

impl ReportRow {
    /// Distribution shown in the table: test predictions when available,
    /// otherwise unseen-validation predictions.
    pub fn distribution(&self) -> [usize; K] {
        self.test_distribution.unwrap_or(self.unseen.pred_class_distribution)
    }
}

/// `BS<bs> <OPT> LR<lr>`, e.g. `BS16 SGD LR0.001`.
pub fn settings_string(batch_size: usize, optimizer: &str, lr: f64) -> String {
    format!("BS{batch_size} {} LR{lr}", optimizer.to_ascii_uppercase())
}

fn pct(v: f64) -> String {
    format!("{v:.1}")
}

fn distribution_cell(d: [usize; K]) -> String {
    d.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
}

fn table_cells(rows: &[ReportRow], layout: Layout) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    match layout {
        Layout::Table1 | Layout::Table2 => {
            let unseen = if layout == Layout::Table1 { "Unseen*" } else { "Unseen" };
            let header = vec![
                vec!["".into(), "".into(), "AUROC".into(), "".into(), "F1-macro".into(), "".into(), "Pred. class distr.".into()],
                vec!["Model".into(), "Settings".into(), "Val".into(), unseen.into(), "Val".into(), unseen.into(), "".into()],
            ];
            let body = rows
                .iter()
                .map(|r| {
                    vec![
                        r.model.clone(),
                        r.settings.clone(),
                        pct(r.val.auroc_macro),
                        pct(r.unseen.auroc_macro),
                        pct(r.val.f1_macro),
                        pct(r.unseen.f1_macro),
                        distribution_cell(r.distribution()),
                    ]
                })
                .collect();
            (header, body)
        }
        Layout::Table3 => {
            let mut top = vec!["".to_string(), "".into(), "".into(), "Class-wise F1-macro".into()];
            top.extend(std::iter::repeat_n(String::new(), K - 1));
            let mut names = vec!["Model".to_string(), "Settings".into(), "Average F1-macro".into()];
            names.extend(Severity::ALL.iter().map(|s| s.title().to_string()));
            let body = rows
                .iter()
                .map(|r| {
                    let mut cells = vec![r.model.clone(), r.settings.clone(), pct(r.unseen.f1_macro)];
                    cells.extend(r.unseen.per_class.iter().map(|m| pct(100.0 * m.f1)));
                    cells
                })
                .collect();
            (vec![top, names], body)
        }
    }
}

/// Aligned plain-text table.
pub fn emit_report(rows: &[ReportRow], layout: Layout) -> String {
    let (header, body) = table_cells(rows, layout);
    let cols = header[0].len();
    let mut widths = vec![0; cols];
    for row in header.iter().chain(&body) {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    // group labels may be wider than the column they start in
    let mut out = String::new();
    let line = |row: &[String], out: &mut String| {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
    };
    for row in &header {
        line(row, &mut out);
    }
    let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
    for row in &body {
        line(row, &mut out);
    }
    out
}

/// The same table as CSV with a single flattened header row.
pub fn emit_report_csv(rows: &[ReportRow], layout: Layout) -> String {
    let (header, body) = table_cells(rows, layout);
    let mut flat = Vec::new();
    let mut group = String::new();
    for (top, name) in header[0].iter().zip(&header[1]) {
        if !top.is_empty() {
            group = top.clone();
        }
        flat.push(match (group.is_empty(), name.is_empty()) {
            (true, _) => name.clone(),
            (false, true) => group.clone(),
            (false, false) => format!("{group} {name}"),
        });
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&flat).expect("in-memory csv");
    for row in &body {
        w.write_record(row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Writes `scan_id,severity` rows sorted by scan id.
pub fn emit_predictions(preds: &[(String, Severity)], path: &Path) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for (id, _) in preds {
        if !seen.insert(id.as_str()) {
            return Err(EvalError::DuplicatePrediction(id.clone()));
        }
    }
    let mut sorted: Vec<&(String, Severity)> = preds.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut text = String::from("scan_id,severity\n");
    for (id, sev) in sorted {
        let _ = writeln!(text, "{id},{sev}");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| EvalError::Write { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    fs::write(path, text).map_err(|e| EvalError::Write { path: path.to_path_buf(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(f1: f64, auroc: f64, dist: [usize; 4]) -> EvalReport {
        EvalReport {
            run_id: "r".into(),
            confusion: ConfusionMatrix::default(),
            per_class: [ClassMetrics { precision: 1.0, recall: 0.5, f1: 0.666 }; 4],
            f1_macro: f1,
            auroc_macro: auroc,
            accuracy: 0.5,
            pred_class_distribution: dist,
            n_evaluated: dist.iter().sum(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let truth = [0, 1, 2, 3, 0, 2];
        let cm = ConfusionMatrix::from_predictions(&truth, &truth).unwrap();
        assert_eq!(f1_macro(&cm).unwrap(), 100.0);
    }

    #[test]
    fn two_class_toy() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        let f1: Vec<f64> = per_class(&cm).iter().map(|m| m.f1).collect();
        assert_eq!(f1, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(f1_macro(&cm).unwrap(), 25.0);
    }

    #[test]
    fn constant_predictor() {
        let truth: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &[2; 100]).unwrap();
        assert!((per_class(&cm)[2].f1 - 0.4).abs() < 1e-12);
        assert!((f1_macro(&cm).unwrap() - 10.0).abs() < 1e-12);
        assert!(f1_macro(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn auroc_fixed_points() {
        let labels = [0, 1, 2, 3, 1];
        let onehot: Vec<f64> = labels.iter().flat_map(|&l| (0..4).map(move |c| if c == l { 1.0 } else { 0.0 })).collect();
        assert_eq!(auroc_macro(&onehot, &labels).unwrap(), 100.0);
        let flat = vec![0.25; 20];
        assert_eq!(auroc_macro(&flat, &labels).unwrap(), 50.0);
        assert!(auroc_macro(&flat, &[1; 5]).is_err());
        assert!(auroc_macro(&[0.5; 20], &labels).is_err());
    }

    #[test]
    fn distributions() {
        assert_eq!(predict_distribution(&[2; 231]), [0, 0, 231, 0]);
        assert_eq!(predict_distribution(&[0, 1, 2, 3]), [1, 1, 1, 1]);
        assert_eq!(predict_distribution(&[2, 2]), [0, 0, 2, 0]);
    }

    #[test]
    fn report_cells() {
        assert_eq!(settings_string(16, "sgd", 0.001), "BS16 SGD LR0.001");
        let row = ReportRow {
            model: "AlexNet".into(),
            settings: settings_string(16, "SGD", 0.001),
            val: report(49.62, 66.84, [1, 2, 3, 4]),
            unseen: report(39.5, 59.0, [1, 2, 3, 4]),
            test_distribution: Some([0, 0, 231, 0]),
        };
        let t = emit_report(std::slice::from_ref(&row), Layout::Table1);
        assert!(t.contains("BS16 SGD LR0.001"));
        assert!(t.contains("49.6") && t.contains("66.8"));
        assert!(t.contains("Pred. class distr."));
        assert!(t.contains("0, 0, 231, 0"));
        let t3 = emit_report(std::slice::from_ref(&row), Layout::Table3);
        assert!(t3.contains("Class-wise F1-macro"));
        assert!(t3.contains("Mild") && t3.contains("Critical"));
        let csv = emit_report_csv(&[row], Layout::Table2);
        assert!(csv.starts_with("Model,Settings,AUROC Val,AUROC Unseen,F1-macro Val,F1-macro Unseen,Pred. class distr.\n"));
    }

    #[test]
    fn prediction_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval/pred.csv");
        emit_predictions(&[("s2".into(), Severity::Critical), ("s1".into(), Severity::Mild)], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "scan_id,severity\ns1,mild\ns2,critical\n");
        let dup = [("a".to_string(), Severity::Mild), ("a".to_string(), Severity::Severe)];
        assert!(matches!(emit_predictions(&dup, &p), Err(EvalError::DuplicatePrediction(_))));
    }
}
