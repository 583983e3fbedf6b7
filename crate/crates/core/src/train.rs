//! Initialization, optimizer, learning-rate schedule and the three
//! training loops: CNN on cross-entropy, Siamese embedding on the mined
//! triplet objective, and a classifier head on frozen embeddings.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{
    crop_augment, subsample_anchor, write_atomic, EncodedSample, Label, MIN_CROP_WIDTH,
};
use crate::error::{shape_err, Error, Result};
use crate::loss::{cross_entropy, mine_batch_all, MarginConfig, TripletBatch};
use crate::net::{batch_input, Head, Network, NetworkConfig};
use crate::rng::Streams;
use crate::tensor::{Tape, Tensor};

/// I.i.d. samples from `U[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Domain(format!(
            "xavier fans must be positive, got ({fan_in}, {fan_out})"
        )));
    }
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-b..=b)).collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    /// Optimizer steps (batches), not epochs.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Probability that a sampled curve is crop-augmented.
    pub p_aug: f64,
    /// Cell keep probability for the sub-sampled anchor copy.
    pub keep_prob: f64,
    pub margins: MarginConfig,
    /// Steps of classifier-head training on frozen embeddings.
    pub head_iterations: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn cnn() -> Self {
        Self {
            iterations: 4500,
            batch_size: 128,
            lr_start: 1e-2,
            lr_end: 5e-4,
            p_aug: 0.5,
            keep_prob: 0.5,
            margins: MarginConfig::default(),
            head_iterations: 2000,
            seed: 0,
        }
    }

    pub fn siamese() -> Self {
        Self {
            iterations: 9000,
            ..Self::cnn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return fail("iterations must be positive".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch size {} too small", self.batch_size));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0 && self.lr_start.is_finite()) {
            return fail(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return fail(format!("augmentation probability {}", self.p_aug));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return fail(format!("keep probability {}", self.keep_prob));
        }
        self.margins.validate()
    }
}

/// `lr_start · (lr_end / lr_start)^(step / iterations)`, exact at both
/// ends.
pub fn lr_at(step: usize, plan: &TrainPlan) -> Result<f64> {
    lr_schedule(step, plan.iterations, plan.lr_start, plan.lr_end)
}

fn lr_schedule(step: usize, iterations: usize, start: f64, end: f64) -> Result<f64> {
    if step > iterations || iterations == 0 {
        return Err(Error::Domain(format!(
            "step {step} outside 0..={iterations}"
        )));
    }
    Ok(if step == iterations {
        end
    } else {
        start * (end / start).powf(step as f64 / iterations as f64)
    })
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "adam: {} parameters, {} gradients, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(shape_err!(
                    "adam: parameter {i} has {} values, gradient {}",
                    p.len(),
                    g.len()
                ));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at index {j}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One row of the loss trace; the mining counts are present for Siamese
/// training only.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub useful: Option<(usize, usize)>,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,lr,loss,n_useful,n_useful_prime\n");
    for r in trace {
        let _ = write!(s, "{},{:.17e},{:.17e},", r.step, r.lr, r.loss);
        match r.useful {
            Some((a, b)) => {
                let _ = writeln!(s, "{a},{b}");
            }
            None => s.push_str(",\n"),
        }
    }
    s
}

pub fn save_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    write_atomic(path, trace_csv(trace).as_bytes())
}

fn check_classes(data: &[EncodedSample]) -> Result<()> {
    let ia = data.iter().filter(|s| s.label == Label::Ia).count();
    if ia == 0 || ia == data.len() {
        return Err(Error::Data(format!(
            "training data needs both classes ({ia} Ia of {})",
            data.len()
        )));
    }
    Ok(())
}

/// Cycles through a per-epoch shuffled permutation of `0..n`.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    streams: Streams,
    name: &'static str,
}

impl EpochSampler {
    fn new(items: Vec<usize>, streams: Streams, name: &'static str) -> Self {
        let mut s = Self {
            order: items,
            pos: 0,
            epoch: 0,
            streams,
            name,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order
            .shuffle(&mut self.streams.rng(self.name, &[self.epoch]));
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.reshuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn maybe_augment<R: Rng + ?Sized>(
    s: &EncodedSample,
    p_aug: f64,
    rng: &mut R,
) -> Result<EncodedSample> {
    if s.valid_w >= MIN_CROP_WIDTH && rng.random::<f64>() < p_aug {
        crop_augment(s, rng)
    } else {
        Ok(s.clone())
    }
}

fn collect_grads(tape: &mut Tape, vars: &[crate::tensor::Var], params: &[Tensor]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect()
}

fn finite_loss(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("loss at step {step}")))
    }
}

/// Trains a classifier network end to end on cross-entropy.
///
/// Randomness comes from `streams`: "init" for weights, "shuffle" for
/// the epoch order, "augment" and "dropout" per step.
pub fn train_cnn(
    data: &[EncodedSample],
    config: &NetworkConfig,
    plan: &TrainPlan,
    streams: &Streams,
) -> Result<(Network, Vec<TraceRow>)> {
    plan.validate()?;
    check_classes(data)?;
    if !matches!(config.head, Head::Classifier { .. }) {
        return Err(Error::Config("CNN training needs a classifier head".into()));
    }
    let mut net = Network::build(config.clone(), &mut streams.rng("init", &[]))?;
    let mut adam = Adam::new(net.params());
    let mut sampler = EpochSampler::new((0..data.len()).collect(), *streams, "shuffle");
    let mut trace = Vec::with_capacity(plan.iterations);
    for step in 1..=plan.iterations {
        let lr = lr_at(step, plan)?;
        let mut aug = streams.rng("augment", &[step as u64]);
        let batch = (0..plan.batch_size)
            .map(|_| maybe_augment(&data[sampler.next()], plan.p_aug, &mut aug))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label.class_index()).collect();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true, true);
        let input = batch_input(&mut tape, &batch)?;
        let features = net.trunk(&mut tape, &bound, &input, None)?;
        let probs = net.head(
            &mut tape,
            &bound,
            features,
            true,
            &mut streams.rng("dropout", &[step as u64]),
        )?;
        let loss = cross_entropy(&mut tape, probs, &labels)?;
        let value = finite_loss(tape.value(loss).item(), step)?;
        tape.backward(loss)?;
        let vars: Vec<_> = bound.trunk.iter().chain(&bound.head).copied().collect();
        let grads = collect_grads(&mut tape, &vars, net.params());
        adam.update(net.params_mut(), &grads, lr)?;
        trace.push(TraceRow {
            step,
            lr,
            loss: value,
            useful: None,
        });
        log::debug!("cnn step {step}: lr {lr:.3e} loss {value:.5}");
    }
    Ok((net, trace))
}

/// Draws `batch_size / 2` curves from each class.
struct StratifiedSampler {
    ia: EpochSampler,
    not_ia: EpochSampler,
}

impl StratifiedSampler {
    fn new(data: &[EncodedSample], streams: Streams) -> Self {
        let idx = |l: Label| (0..data.len()).filter(|&i| data[i].label == l).collect();
        Self {
            ia: EpochSampler::new(idx(Label::Ia), streams, "shuffle.ia"),
            not_ia: EpochSampler::new(idx(Label::NotIa), streams, "shuffle.notia"),
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        let half = size / 2;
        let mut out: Vec<usize> = (0..half).map(|_| self.ia.next()).collect();
        out.extend((0..size - half).map(|_| self.not_ia.next()));
        out
    }
}

/// Siamese training of an embedding network: per step, the batch and its
/// sub-sampled copies run through one forward pass over the same bound
/// parameters, and the combined mined triplet loss is minimized.
///
/// Steps whose batch offers no useful triplet leave the parameters
/// unchanged; they are counted and logged.
pub fn train_siamese(
    data: &[EncodedSample],
    config: &NetworkConfig,
    plan: &TrainPlan,
    streams: &Streams,
) -> Result<(Network, Vec<TraceRow>)> {
    plan.validate()?;
    check_classes(data)?;
    if plan.batch_size < 4 {
        return Err(Error::Config(
            "Siamese batches need at least 2 curves per class".into(),
        ));
    }
    let config = config.with_head(Head::Embedding);
    let mut net = Network::build(config, &mut streams.rng("init", &[]))?;
    let mut adam = Adam::new(net.params());
    let mut sampler = StratifiedSampler::new(data, *streams);
    let mut trace = Vec::with_capacity(plan.iterations);
    let mut skipped = 0usize;
    for step in 1..=plan.iterations {
        let lr = lr_at(step, plan)?;
        let mut aug = streams.rng("augment", &[step as u64]);
        let mut sub = streams.rng("subsample", &[step as u64]);
        let picks = sampler.batch(plan.batch_size);
        let mut batch = picks
            .iter()
            .map(|&i| maybe_augment(&data[i], plan.p_aug, &mut aug))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
        let copies = batch
            .iter()
            .map(|s| subsample_anchor(s, plan.keep_prob, &mut sub))
            .collect::<Result<Vec<_>>>()?;
        batch.extend(copies);
        let b = labels.len();

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true, false);
        let input = batch_input(&mut tape, &batch)?;
        let all = net.trunk(&mut tape, &bound, &input, None)?;
        let embeddings = tape.slice(all, 0, 0, b)?;
        let subsampled = tape.slice(all, 0, b, b)?;
        let mined = mine_batch_all(
            &mut tape,
            &TripletBatch {
                embeddings,
                subsampled,
                labels: &labels,
            },
            &plan.margins,
        )?;
        let value = finite_loss(tape.value(mined.loss).item(), step)?;
        if tape.requires_grad(mined.loss) {
            tape.backward(mined.loss)?;
            let grads = collect_grads(&mut tape, &bound.trunk, net.params());
            adam.update(net.params_mut(), &grads, lr)?;
        } else {
            skipped += 1;
            log::info!("siamese step {step}: no useful triplets, step skipped ({skipped} so far)");
        }
        trace.push(TraceRow {
            step,
            lr,
            loss: value,
            useful: Some((mined.n_useful, mined.n_useful_prime)),
        });
        log::debug!(
            "siamese step {step}: lr {lr:.3e} loss {value:.5} useful {} / {}",
            mined.n_useful,
            mined.n_useful_prime
        );
    }
    Ok((net, trace))
}

/// Trains a freshly initialized classifier head on the frozen features of
/// `embedding_net`. The returned network shares the trunk parameters
/// bit-for-bit.
pub fn train_head(
    embedding_net: &Network,
    data: &[EncodedSample],
    hidden: usize,
    dropout: f64,
    plan: &TrainPlan,
    streams: &Streams,
) -> Result<(Network, Vec<TraceRow>)> {
    plan.validate()?;
    check_classes(data)?;
    if plan.head_iterations == 0 {
        return Err(Error::Config("head iterations must be positive".into()));
    }
    let mut net =
        embedding_net.with_classifier_head(hidden, dropout, &mut streams.rng("init.head", &[]))?;
    let features = embedding_net.embed_all(data, 64)?;
    let dim = net.config().embedding_dim();
    let trunk = net.trunk_len();
    let mut adam = Adam::new(&net.params()[trunk..]);
    let mut sampler = EpochSampler::new((0..data.len()).collect(), *streams, "shuffle.head");
    let mut trace = Vec::with_capacity(plan.head_iterations);
    for step in 1..=plan.head_iterations {
        let lr = lr_schedule(step, plan.head_iterations, plan.lr_start, plan.lr_end)?;
        let picks: Vec<usize> = (0..plan.batch_size).map(|_| sampler.next()).collect();
        let rows: Vec<f64> = picks
            .iter()
            .flat_map(|&i| features[i].iter().copied())
            .collect();
        let labels: Vec<usize> = picks.iter().map(|&i| data[i].label.class_index()).collect();
        let mut tape = Tape::new();
        let bound = net.bind_head(&mut tape);
        let x = tape.constant(Tensor::new(&[picks.len(), dim], rows)?);
        let probs = net.head(
            &mut tape,
            &bound,
            x,
            true,
            &mut streams.rng("dropout.head", &[step as u64]),
        )?;
        let loss = cross_entropy(&mut tape, probs, &labels)?;
        let value = finite_loss(tape.value(loss).item(), step)?;
        tape.backward(loss)?;
        let grads = collect_grads(&mut tape, &bound.head, &net.params()[trunk..]);
        adam.update(&mut net.params_mut()[trunk..], &grads, lr)?;
        trace.push(TraceRow {
            step,
            lr,
            loss: value,
            useful: None,
        });
    }
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lr_endpoints_and_midpoint() {
        let plan = TrainPlan::cnn();
        assert_eq!(lr_at(0, &plan).unwrap(), 1e-2);
        assert_eq!(lr_at(plan.iterations, &plan).unwrap(), 5e-4);
        let mid = lr_at(plan.iterations / 2, &plan).unwrap();
        assert!((mid - 1e-2 * 0.05f64.sqrt()).abs() < 1e-15);
        assert!(lr_at(plan.iterations + 1, &plan).is_err());
    }

    #[test]
    fn adam_hand_step() {
        let mut p = vec![Tensor::zeros(&[1])];
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &[vec![1.0]], 0.1).unwrap();
        assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
        let before = p.clone();
        adam = Adam::new(&p);
        adam.update(&mut p, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(p, before);
        assert!(matches!(
            adam.update(&mut p, &[vec![f64::NAN]], 0.1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn xavier_bound() {
        let t = xavier_uniform(4, 4, &[1000], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = 0.75f64.sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        assert!(xavier_uniform(0, 4, &[1], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
