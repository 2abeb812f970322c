//! Pixel-level segmentation metrics: confusion counts, accuracy, ROC curves
//! and the per-image accuracy report.

use std::fmt::Write as _;

use thiserror::Error;

use crate::imagio::{write_csv, BinaryImage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("no pixels to evaluate")]
    EmptyEvaluation,
    #[error("ground truth holds a single class")]
    SingleClassTruth,
    #[error("report needs at least one image")]
    EmptyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64, EvalError> {
        accuracy(self)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn dims(b: &BinaryImage) -> (usize, usize) {
    (b.width(), b.height())
}

fn check_same(a: &BinaryImage, b: &BinaryImage) -> Result<(), EvalError> {
    if dims(a) != dims(b) {
        return Err(EvalError::DimensionMismatch(dims(a), dims(b)));
    }
    Ok(())
}

/// Tallies prediction against truth, optionally restricted to `mask = 1`.
pub fn confusion(
    pred: &BinaryImage,
    truth: &BinaryImage,
    mask: Option<&BinaryImage>,
) -> Result<ConfusionCounts, EvalError> {
    check_same(pred, truth)?;
    if let Some(m) = mask {
        check_same(pred, m)?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0) {
            continue;
        }
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64, EvalError> {
    let total = c.total();
    if total == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl Roc {
    pub fn to_csv_rows(&self, label: &str) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|(fpr, tpr)| vec![label.to_string(), fpr.to_string(), tpr.to_string()])
            .collect()
    }
}

/// ROC over every distinct score (descending), with trapezoidal AUC.
pub fn roc_points(scores: &[f64], truth: &[u8]) -> Result<Roc, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::DimensionMismatch(
            (scores.len(), 1),
            (truth.len(), 1),
        ));
    }
    let positives = truth.iter().filter(|&&t| t == 1).count() as f64;
    let negatives = truth.len() as f64 - positives;
    if positives == 0.0 || negatives == 0.0 {
        return Err(EvalError::SingleClassTruth);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("curve starts at origin");
        let (x1, y1) = (fp / negatives, tp / positives);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(Roc { points, auc })
}

/// [`roc_points`] over image pixels, optionally restricted to `mask = 1`.
pub fn roc_image(
    scores: &[f64],
    truth: &BinaryImage,
    mask: Option<&BinaryImage>,
) -> Result<Roc, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::DimensionMismatch(
            (scores.len(), 1),
            (truth.len(), 1),
        ));
    }
    if let Some(m) = mask {
        check_same(truth, m)?;
    }
    let keep = |i: usize| mask.is_none_or(|m| m.data()[i] == 1);
    let (s, t): (Vec<f64>, Vec<u8>) = scores
        .iter()
        .zip(truth.data())
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, (&s, &t))| (s, t))
        .unzip();
    roc_points(&s, &t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub id: String,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub runtime_s: f64,
}

impl ImageResult {
    pub fn new(
        id: impl Into<String>,
        counts: ConfusionCounts,
        runtime_s: f64,
    ) -> Result<Self, EvalError> {
        Ok(Self {
            id: id.into(),
            accuracy: accuracy(&counts)?,
            counts,
            runtime_s,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub csv: Vec<u8>,
    pub table: String,
    /// Unweighted mean of the per-image accuracies.
    pub average: f64,
    pub total_runtime_s: f64,
}

pub const REPORT_COLUMNS: [&str; 7] = ["image", "tp", "tn", "fp", "fn", "accuracy", "runtime_s"];

/// One row per image in input order followed by an `AVERAGE` row.
pub fn report(results: &[ImageResult]) -> Result<Report, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let n = results.len() as f64;
    let average = results.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let total_runtime_s: f64 = results.iter().map(|r| r.runtime_s).sum();

    let mut rows: Vec<Vec<String>> = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect()];
    let mut table = format!(
        "{:<20} {:>9} {:>9} {:>9} {:>9} {:>9} {:>10}\n",
        "image", "tp", "tn", "fp", "fn", "accuracy", "runtime_s"
    );
    for r in results {
        let c = r.counts;
        rows.push(vec![
            r.id.clone(),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.runtime_s),
        ]);
        let _ = writeln!(
            table,
            "{:<20} {:>9} {:>9} {:>9} {:>9} {:>9.4} {:>10.4}",
            r.id, c.tp, c.tn, c.fp, c.fn_, r.accuracy, r.runtime_s
        );
    }
    rows.push(vec![
        "AVERAGE".into(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        format!("{average:.4}"),
        format!("{:.4}", total_runtime_s / n),
    ]);
    let _ = writeln!(
        table,
        "{:<20} {:>49.4} {:>10.4}",
        "AVERAGE",
        average,
        total_runtime_s / n
    );
    let _ = writeln!(
        table,
        "total runtime: {total_runtime_s:.4} s over {} images",
        results.len()
    );
    Ok(Report {
        csv: write_csv(&rows),
        table,
        average,
        total_runtime_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphbin::complement;

    fn bin(w: usize, h: usize, d: &[u8]) -> BinaryImage {
        BinaryImage::new(w, h, d.to_vec()).unwrap()
    }

    #[test]
    fn hand_enumerated_counts() {
        let c = confusion(&bin(2, 2, &[1, 1, 0, 0]), &bin(2, 2, &[1, 0, 1, 0]), None).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                tn: 1,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!(accuracy(&c).unwrap(), 0.5);
    }

    #[test]
    fn identity_and_complement() {
        let t = bin(3, 2, &[1, 0, 0, 1, 1, 0]);
        let c = confusion(&t, &t, None).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(accuracy(&c).unwrap(), 1.0);
        let c = confusion(&complement(&t), &t, None).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(
            accuracy(&ConfusionCounts::default()),
            Err(EvalError::EmptyEvaluation)
        );
    }

    #[test]
    fn mask_restricts_and_sizes_checked() {
        let p = bin(2, 2, &[1, 1, 0, 0]);
        let t = bin(2, 2, &[1, 0, 1, 0]);
        let m = bin(2, 2, &[1, 0, 0, 1]);
        let c = confusion(&p, &t, Some(&m)).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                tn: 1,
                fp: 0,
                fn_: 0
            }
        );
        assert!(matches!(
            confusion(&p, &bin(4, 1, &[0; 4]), None),
            Err(EvalError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn roc_hand_case() {
        let roc = roc_points(&[0.9, 0.8, 0.7, 0.4, 0.3, 0.1], &[1, 1, 0, 1, 0, 0]).unwrap();
        assert!((roc.auc - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn roc_degenerate_cases() {
        let perfect = roc_points(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(perfect.auc, 1.0);
        let flat = roc_points(&[0.5; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(flat.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(flat.auc, 0.5);
        assert_eq!(
            roc_points(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::SingleClassTruth)
        );
    }

    #[test]
    fn report_layout_and_average() {
        let r1 = ImageResult::new(
            "21_training",
            ConfusionCounts {
                tp: 10,
                tn: 958,
                fp: 20,
                fn_: 12,
            },
            1.25,
        )
        .unwrap();
        let rep = report(std::slice::from_ref(&r1)).unwrap();
        assert_eq!(rep.average, r1.accuracy);
        let csv = String::from_utf8(rep.csv.clone()).unwrap();
        assert_eq!(
            csv,
            "image,tp,tn,fp,fn,accuracy,runtime_s\n21_training,10,958,20,12,0.9680,1.2500\nAVERAGE,,,,,0.9680,1.2500\n"
        );
        assert_eq!(report(&[r1]).unwrap(), rep);
        assert_eq!(report(&[]), Err(EvalError::EmptyReport));
    }
}
