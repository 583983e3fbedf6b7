//! Accuracy, confusion counts, ROC curve and AUC. Ia is the positive
//! class throughout.

use std::fmt::Write as _;

use crate::data::{EncodedSample, Label};
use crate::error::{Error, Result};
use crate::net::Network;

/// Decision threshold on the Ia probability used for accuracy.
pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn accuracy(predicted: &[Label], truth: &[Label]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / predicted.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// True/false positive rates. A rate whose denominator is zero is
/// reported as 0 with its `*_defined` flag cleared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub tpr: f64,
    pub fpr: f64,
    pub tpr_defined: bool,
    pub fpr_defined: bool,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn rates(&self) -> Rates {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        Rates {
            tpr: ratio(self.tp, self.tp + self.fn_),
            fpr: ratio(self.fp, self.fp + self.tn),
            tpr_defined: self.tp + self.fn_ > 0,
            fpr_defined: self.fp + self.tn > 0,
        }
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

/// Predicts Ia iff `score >= threshold`.
pub fn confusion_at(scores: &[f64], labels: &[Label], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == Label::Ia) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Points from the strictest threshold (+∞, nothing predicted positive)
/// down to the smallest score (everything positive).
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// ROC curve over every distinct score plus a +∞ sentinel, and its
/// trapezoidal area. The area is accumulated in integer counts, so it
/// equals `P(s_pos > s_neg) + ½·P(s_pos = s_neg)` exactly.
pub fn roc_and_auc(scores: &[f64], labels: &[Label]) -> Result<(RocCurve, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == Label::Ia).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == Label::Ia {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = area2 as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok((RocCurve { points }, auc))
}

/// `threshold,fpr,tpr` rows with 17 significant digits.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(s, "{:.16e},{:.16e},{:.16e}", p.threshold, p.fpr, p.tpr);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub auc: f64,
    pub roc: RocCurve,
    pub confusion: ConfusionCounts,
}

/// Scores are Ia probabilities; accuracy uses [`DECISION_THRESHOLD`].
pub fn evaluate_scores(scores: &[f64], labels: &[Label]) -> Result<Evaluation> {
    let (roc, auc) = roc_and_auc(scores, labels)?;
    let confusion = confusion_at(scores, labels, DECISION_THRESHOLD);
    Ok(Evaluation {
        accuracy: confusion.accuracy(),
        auc,
        roc,
        confusion,
    })
}

pub fn evaluate_fold(net: &Network, test: &[EncodedSample]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Data("empty test fold".into()));
    }
    let scores = net.predict_scores(test, 64)?;
    let labels: Vec<Label> = test.iter().map(|s| s.label).collect();
    evaluate_scores(&scores, &labels)
}

/// Mean and sample standard deviation across folds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for Aggregate {
    /// `0.983 ± 0.0004`
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.4}", self.mean, self.std)
    }
}
