//! Classification and metric-learning objectives.
//!
//! The scalar helpers ([`l2_distance`], [`triplet_loss`],
//! [`adapted_triplet_loss`]) evaluate single triplets on plain vectors.
//! [`mine_batch_all`] builds the batch objective on a tape: every valid
//! triplet of the batch is formed, and each of the two losses is averaged
//! over its strictly positive ("useful") terms.

use crate::data::Label;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{l2, Tape, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `-ln p(true class)` over the batch, with probabilities floored
/// at [`PROB_FLOOR`]. `labels` are class indices (0 = not-Ia, 1 = Ia).
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err!(
            "cross_entropy: probs {shape:?} for {} labels",
            labels.len()
        ));
    }
    let cols = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l > 1 || l >= cols) {
        return Err(Error::Domain(format!("label {bad} outside {{0, 1}}")));
    }
    for (i, row) in tape.data(probs).chunks(cols).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probability row {i} sums to {s}")));
        }
    }
    let picks: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| i * cols + l)
        .collect();
    let p = tape.gather(probs, &picks)?;
    let p = tape.clamp_min(p, PROB_FLOOR);
    let logp = tape.log(p)?;
    let total = tape.sum(logp);
    let mean = tape.div_scalar(total, labels.len() as f64)?;
    Ok(tape.scale(mean, -1.0))
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "l2_distance: lengths {} and {}",
            a.len(),
            b.len()
        ));
    }
    Ok(l2(a, b))
}

/// `max(d(a,p) - d(a,n) + margin, 0)`
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    let v = l2_distance(a, p)? - l2_distance(a, n)? + margin;
    Ok(if v > 0.0 { v } else { 0.0 })
}

/// `d(a,a') + max(0, margin' - d(a,n))`
pub fn adapted_triplet_loss(a: &[f64], a_sub: &[f64], n: &[f64], margin_prime: f64) -> Result<f64> {
    let hinge = -l2_distance(a, n)? + margin_prime;
    Ok(l2_distance(a, a_sub)? + if hinge > 0.0 { hinge } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub margin: f64,
    pub margin_prime: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            margin_prime: 1.0,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |m: f64| m.is_finite() && m > 0.0;
        if ok(self.margin) && ok(self.margin_prime) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "margins must be finite and positive: {self:?}"
            )))
        }
    }
}

/// Embeddings of a batch and of sub-sampled copies of the same curves,
/// row-aligned, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TripletBatch<'a> {
    pub embeddings: Var,
    pub subsampled: Var,
    pub labels: &'a [Label],
}

#[derive(Debug)]
pub struct Mined {
    /// `L_triplet_mean + L_triplet'_mean`; a constant zero when nothing is
    /// useful.
    pub loss: Var,
    pub triplet: f64,
    pub triplet_prime: f64,
    pub n_useful: usize,
    pub n_useful_prime: usize,
    /// No anchor had a negative in the batch.
    pub single_class: bool,
}

/// Batch-all online mining of both triplet objectives.
///
/// Triplets are enumerated anchor-major: `(a, p, n)` with
/// `label(p) == label(a)`, `p != a`, `label(n) != label(a)`, and for the
/// adapted loss `(a, a', n)` with `label(n) != label(a)`.
pub fn mine_batch_all(
    tape: &mut Tape,
    batch: &TripletBatch<'_>,
    margins: &MarginConfig,
) -> Result<Mined> {
    margins.validate()?;
    let (es, ss) = (
        tape.shape(batch.embeddings).to_vec(),
        tape.shape(batch.subsampled).to_vec(),
    );
    let b = batch.labels.len();
    if es.len() != 2 || es[0] != b || es != ss {
        return Err(shape_err!(
            "mine_batch_all: embeddings {es:?}, subsampled {ss:?}, {b} labels"
        ));
    }
    let labels = batch.labels;
    let mut ap = Vec::new();
    let mut an = Vec::new();
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] != labels[a] {
                    ap.push(a * b + p);
                    an.push(a * b + n);
                }
            }
        }
    }
    let mut an_prime = Vec::new();
    let mut diag = Vec::new();
    for a in 0..b {
        for n in 0..b {
            if labels[n] != labels[a] {
                an_prime.push(a * b + n);
                diag.push(a * b + a);
            }
        }
    }
    if an_prime.is_empty() {
        log::warn!("triplet mining: batch of {b} holds a single class; no triplets");
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(Mined {
            loss,
            triplet: 0.0,
            triplet_prime: 0.0,
            n_useful: 0,
            n_useful_prime: 0,
            single_class: true,
        });
    }

    let dist = tape.pairwise_l2(batch.embeddings, batch.embeddings)?;
    let dist_sub = tape.pairwise_l2(batch.embeddings, batch.subsampled)?;

    let mut terms = Vec::new();
    let (mut triplet, mut n_useful) = (0.0, 0);
    if !ap.is_empty() {
        let d_ap = tape.gather(dist, &ap)?;
        let d_an = tape.gather(dist, &an)?;
        let diff = tape.sub(d_ap, d_an)?;
        let m = tape.constant(Tensor::scalar(margins.margin));
        let shifted = tape.add(diff, m)?;
        let hinge = tape.relu(shifted);
        n_useful = tape.data(hinge).iter().filter(|&&v| v > 0.0).count();
        if n_useful > 0 {
            let total = tape.sum(hinge);
            let mean = tape.div_scalar(total, n_useful as f64)?;
            triplet = tape.value(mean).item();
            terms.push(mean);
        }
    }

    let d_aa = tape.gather(dist_sub, &diag)?;
    let d_an = tape.gather(dist, &an_prime)?;
    let neg = tape.scale(d_an, -1.0);
    let mp = tape.constant(Tensor::scalar(margins.margin_prime));
    let shifted = tape.add(neg, mp)?;
    let hinge = tape.relu(shifted);
    let per = tape.add(d_aa, hinge)?;
    let n_useful_prime = tape.data(per).iter().filter(|&&v| v > 0.0).count();
    let mut triplet_prime = 0.0;
    if n_useful_prime > 0 {
        let total = tape.sum(per);
        let mean = tape.div_scalar(total, n_useful_prime as f64)?;
        triplet_prime = tape.value(mean).item();
        terms.push(mean);
    }

    let loss = match terms.as_slice() {
        [] => tape.constant(Tensor::scalar(0.0)),
        [one] => *one,
        [first, second] => tape.add(*first, *second)?,
        _ => unreachable!(),
    };
    Ok(Mined {
        loss,
        triplet,
        triplet_prime,
        n_useful,
        n_useful_prime,
        single_class: false,
    })
}
