//! Metrics and report tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("AUC needs both classes (positives {pos}, negatives {neg})")]
    SingleClass { pos: usize, neg: usize },
    #[error("baseline RMSE is zero; percent change undefined")]
    ZeroBaseline,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_lengths(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(preds: &[bool], labels: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn f1(preds: &[bool], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), labels.len())?;
    Ok(Confusion::from_labels(preds, labels).f1())
}

/// Mann–Whitney AUC: the fraction of positive/negative pairs where the
/// positive scores higher, ties counting one half. Computed from mid-ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { pos: n_pos, neg: n_neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps mid-ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the mid-rank (i + 1 + j) / 2
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += pos_in_group * (i + 1 + j) as u128;
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), targets.len())?;
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// RMSE of always predicting the training mean.
pub fn constant_baseline_rmse(train_targets: &[f64], eval_targets: &[f64]) -> Result<f64, EvalError> {
    if train_targets.is_empty() || eval_targets.is_empty() {
        return Err(EvalError::Empty);
    }
    let m = mean(train_targets);
    rmse(&vec![m; eval_targets.len()], eval_targets)
}

/// Relative RMSE change in percent; negative means the model is better.
pub fn change_pct(model_rmse: f64, baseline_rmse: f64) -> Result<f64, EvalError> {
    if baseline_rmse == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok(100.0 * (model_rmse - baseline_rmse) / baseline_rmse)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Baseline,
    Individual,
    Shared,
    StrongLabel,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Baseline => "Baseline",
            ModelKind::Individual => "Individual",
            ModelKind::Shared => "Shared",
            ModelKind::StrongLabel => "Strong-label",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationRow {
    pub class: String,
    pub training: String,
    pub model_kind: ModelKind,
    /// Binarization threshold of the training labels, or empty for strong labels.
    pub threshold: Option<f64>,
    pub unit: String,
    pub auc: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub rows: Vec<ClassificationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionRow {
    pub variable: String,
    pub unit: String,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub baseline_rmse: f64,
    pub model_kind: ModelKind,
    pub model_rmse: f64,
    pub change_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RegressionReport {
    pub rows: Vec<RegressionRow>,
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn write_csv_rows<T: Serialize>(path: &Path, comment: Option<&str>, rows: &[T]) -> Result<(), EvalError> {
    let mut file = std::fs::File::create(path)?;
    if let Some(c) = comment {
        use std::io::Write;
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl ClassificationReport {
    pub fn write_csv(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<(), EvalError> {
        write_csv_rows(path.as_ref(), comment, &self.rows)
    }

    /// Class | Training | Model | Threshold | AUC | F1
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:<10} {:<13} {:<12} {:>6} {:>6}", "Class", "Training", "Model", "Threshold", "AUC", "F1");
        for r in &self.rows {
            let th = match r.threshold {
                Some(t) => format!("{t} {}", r.unit),
                None => "N/A".to_string(),
            };
            let _ = writeln!(
                s,
                "{:<8} {:<10} {:<13} {:<12} {:>6.3} {:>6.3}",
                r.class,
                r.training,
                r.model_kind.label(),
                th,
                r.auc,
                r.f1
            );
        }
        s
    }
}

impl RegressionReport {
    pub fn write_csv(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<(), EvalError> {
        write_csv_rows(path.as_ref(), comment, &self.rows)
    }

    /// Label | Min | Median | Max | Baseline RMSE | Exp | RMSE | Change (%)
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>8} {:>8} {:>13} {:<10} {:>8} {:>10}",
            "Label", "Min", "Median", "Max", "Baseline RMSE", "Exp", "RMSE", "Change (%)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>8.3} {:>8.3} {:>8.3} {:>13.3} {:<10} {:>8.3} {:>10.2}",
                format!("{} ({})", r.variable, r.unit),
                r.min,
                r.median,
                r.max,
                r.baseline_rmse,
                r.model_kind.label(),
                r.model_rmse,
                r.change_pct
            );
        }
        s
    }
}
