//! Accuracy, ROC AUC and equal error rate, plus the cross-client evaluation
//! matrix.
//!
//! Labels are `0` (real, negative) and `1` (fake, positive); scores are the
//! predicted probability of the positive class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::model::ForgeryModel;
use crate::tensor::Tensor;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("metric", &[scores.len()], &[labels.len()]));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Domain("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Fraction of samples where `(score >= threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= threshold) == (**l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Mann–Whitney estimate of the ROC AUC with half credit for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Equal error rate.
///
/// Thresholds sweep every distinct score (predict positive when
/// `score >= t`) plus `+∞`. The first adjacent pair of operating points at
/// which `FPR − FNR` changes sign brackets the crossing, and the rate is
/// linearly interpolated between them.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk thresholds upward; samples strictly below the threshold are
    // predicted negative.
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let point = |pb: usize, nb: usize| {
        let fpr = (neg - nb) as f64 / neg as f64;
        let fnr = pb as f64 / pos as f64;
        (fpr, fnr)
    };
    let mut prev = point(0, 0);
    let mut i = 0;
    loop {
        let (fpr, fnr) = prev;
        if fpr == fnr {
            return Ok(fpr);
        }
        if i >= order.len() {
            break;
        }
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let next = point(pos_below, neg_below);
        let (d1, d2) = (prev.0 - prev.1, next.0 - next.1);
        if d1 > 0.0 && d2 < 0.0 {
            let frac = d1 / (d1 - d2);
            return Ok(prev.0 + frac * (next.0 - prev.0));
        }
        prev = next;
    }
    // the sweep ends at FPR = 0, FNR = 1 and starts at FPR = 1, FNR = 0, so
    // a crossing always exists
    unreachable!("FPR − FNR must change sign over the sweep")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub auc: f64,
    pub eer: f64,
    pub n_samples: usize,
}

pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<EvalResult> {
    Ok(EvalResult {
        accuracy: accuracy(scores, labels, 0.5)?,
        auc: auc(scores, labels)?,
        eer: eer(scores, labels)?,
        n_samples: scores.len(),
    })
}

/// Scores `model` on a list of samples.
pub fn evaluate_model(model: &ForgeryModel, samples: &[LabeledSample]) -> Result<EvalResult> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Degenerate("empty test set".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let images = Tensor::new(shape, data)?;
    let scores = model.infer(&images)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    evaluate(&scores, &labels)
}

/// Row `i` = model trained on client `i`, column `j` = test data of client `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    size: usize,
    cells: Vec<EvalResult>,
}

impl EvalMatrix {
    pub fn new(size: usize, cells: Vec<EvalResult>) -> Result<Self> {
        if size == 0 || cells.len() != size * size {
            return Err(Error::shape("eval matrix", &[size, size], &[cells.len()]));
        }
        Ok(Self { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, train: usize, test: usize) -> &EvalResult {
        &self.cells[train * self.size + test]
    }

    pub fn row(&self, train: usize) -> &[EvalResult] {
        &self.cells[train * self.size..(train + 1) * self.size]
    }

    /// Whether every row's accuracy is maximized on the diagonal. Ties with
    /// an off-diagonal cell count as a miss.
    pub fn diagonal_dominant(&self) -> bool {
        (0..self.size).all(|i| {
            let d = self.get(i, i).accuracy;
            (0..self.size).all(|j| j == i || self.get(i, j).accuracy < d)
        })
    }

    pub fn mean_diagonal_accuracy(&self) -> f64 {
        (0..self.size).map(|i| self.get(i, i).accuracy).sum::<f64>() / self.size as f64
    }

    /// Accuracy grid as CSV with a header row, 4 decimals per cell.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("train\\test");
        for j in 0..self.size {
            write!(out, ",{j}").unwrap();
        }
        out.push('\n');
        for i in 0..self.size {
            write!(out, "{i}").unwrap();
            for cell in self.row(i) {
                write!(out, ",{:.4}", cell.accuracy).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn cross_eval(models: &[&ForgeryModel], test_sets: &[&[LabeledSample]]) -> Result<EvalMatrix> {
    if models.len() != test_sets.len() {
        return Err(Error::shape("cross_eval", &[models.len()], &[test_sets.len()]));
    }
    let mut cells = Vec::with_capacity(models.len() * models.len());
    for model in models {
        for test in test_sets {
            cells.push(evaluate_model(model, test)?);
        }
    }
    EvalMatrix::new(models.len(), cells)
}
