//! Light-curve records, the dense 4×T encoding, a synthetic two-class
//! generator, augmentation, k-fold splitting and JSONL persistence.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Streams;

pub const BANDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "g")]
    Green,
    #[serde(rename = "r")]
    Red,
    #[serde(rename = "nir")]
    NearInfrared,
    #[serde(rename = "ir")]
    Infrared,
}

impl Band {
    pub const ALL: [Band; BANDS] = [Band::Green, Band::Red, Band::NearInfrared, Band::Infrared];

    /// Row of this band in the encoded matrix.
    pub fn row(self) -> usize {
        match self {
            Band::Green => 0,
            Band::Red => 1,
            Band::NearInfrared => 2,
            Band::Infrared => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "Ia")]
    Ia,
    #[serde(rename = "notIa")]
    NotIa,
}

impl Label {
    /// Output column of the classifier; Ia is the positive class (1).
    pub fn class_index(self) -> usize {
        match self {
            Label::Ia => 1,
            Label::NotIa => 0,
        }
    }

    pub fn from_class_index(i: usize) -> Self {
        if i == 1 {
            Label::Ia
        } else {
            Label::NotIa
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Ia => "Ia",
            Label::NotIa => "notIa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub day: u32,
    pub band: Band,
    pub flux: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightCurve {
    pub id: String,
    pub label: Label,
    /// Stored for reference; not a classifier input.
    pub redshift: Option<f64>,
    pub observations: Vec<Observation>,
}

impl LightCurve {
    /// `max(day) - min(day) + 1`, or `None` without observations.
    pub fn duration_days(&self) -> Option<usize> {
        let min = self.observations.iter().map(|o| o.day).min()?;
        let max = self.observations.iter().map(|o| o.day).max()?;
        Some((max - min) as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(o) = self.observations.iter().find(|o| !o.flux.is_finite()) {
            return Err(Error::Data(format!(
                "{}: non-finite flux on day {}",
                self.id, o.day
            )));
        }
        let mut seen = [false; BANDS];
        for o in &self.observations {
            seen[o.band.row()] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::Data(format!(
                "{}: fewer than two observed bands",
                self.id
            )));
        }
        Ok(())
    }
}

/// Dense network input: 4 rows (g, r, nir, ir) by `width` days, row-major,
/// with unobserved cells exactly zero. Columns at or beyond `valid_w` are
/// padding and never influence the network output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub matrix: Vec<f64>,
    pub width: usize,
    pub valid_w: usize,
    pub label: Label,
    pub norm_factor: f64,
}

impl EncodedSample {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.width + col]
    }

    pub fn zero_cells(&self) -> usize {
        self.matrix.iter().filter(|&&v| v == 0.0).count()
    }

    /// Same content followed by `extra` zero padding columns; `valid_w`
    /// is unchanged.
    pub fn padded(&self, extra: usize) -> EncodedSample {
        let nw = self.width + extra;
        let mut matrix = vec![0.0; BANDS * nw];
        for r in 0..BANDS {
            matrix[r * nw..r * nw + self.width]
                .copy_from_slice(&self.matrix[r * self.width..(r + 1) * self.width]);
        }
        EncodedSample {
            matrix,
            width: nw,
            ..self.clone()
        }
    }
}

/// Encodes a curve as a 4×T matrix with day origin at the first
/// observation, scaled by the largest absolute flux.
pub fn encode(curve: &LightCurve) -> Result<EncodedSample> {
    let Some(width) = curve.duration_days() else {
        return Err(Error::Data(format!("{}: no observations", curve.id)));
    };
    let day0 = curve.observations.iter().map(|o| o.day).min().unwrap_or(0);
    let norm_factor = curve
        .observations
        .iter()
        .fold(0.0f64, |m, o| m.max(o.flux.abs()));
    if norm_factor == 0.0 || !norm_factor.is_finite() {
        return Err(Error::Data(format!(
            "{}: flux is identically zero",
            curve.id
        )));
    }
    let mut matrix = vec![0.0; BANDS * width];
    for o in &curve.observations {
        matrix[o.band.row() * width + (o.day - day0) as usize] = o.flux / norm_factor;
    }
    Ok(EncodedSample {
        matrix,
        width,
        valid_w: width,
        label: curve.label,
        norm_factor,
    })
}

pub fn encode_all(curves: &[LightCurve]) -> Result<Vec<EncodedSample>> {
    par::map(curves, encode).into_iter().collect()
}

/// Fraction of zero cells over a set of encoded samples.
pub fn zero_fraction(samples: &[EncodedSample]) -> f64 {
    let zeros: usize = samples.iter().map(EncodedSample::zero_cells).sum();
    let cells: usize = samples.iter().map(|s| s.matrix.len()).sum();
    if cells == 0 {
        0.0
    } else {
        zeros as f64 / cells as f64
    }
}

pub const MIN_CROP_WIDTH: usize = 20;

/// Columns `start..start + width` of `sample`, unchanged. The window
/// must lie inside the valid region.
pub fn crop_window(sample: &EncodedSample, start: usize, width: usize) -> Result<EncodedSample> {
    if width == 0 || start + width > sample.valid_w {
        return Err(Error::Domain(format!(
            "window [{start}, {}) outside valid width {}",
            start + width,
            sample.valid_w
        )));
    }
    let mut matrix = Vec::with_capacity(BANDS * width);
    for r in 0..BANDS {
        let row = &sample.matrix[r * sample.width..(r + 1) * sample.width];
        matrix.extend_from_slice(&row[start..start + width]);
    }
    Ok(EncodedSample {
        matrix,
        width,
        valid_w: width,
        ..sample.clone()
    })
}

/// Random contiguous window covering a fraction in [0.4, 0.8] of the
/// duration, placed uniformly.
pub fn crop_augment<R: Rng + ?Sized>(sample: &EncodedSample, rng: &mut R) -> Result<EncodedSample> {
    let t = sample.valid_w;
    if t < MIN_CROP_WIDTH {
        return Err(Error::Domain(format!(
            "cannot crop width {t} (minimum {MIN_CROP_WIDTH})"
        )));
    }
    let f: f64 = rng.random_range(0.4..=0.8);
    let width = ((f * t as f64).round() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - width);
    crop_window(sample, start, width)
}

/// Keeps each non-zero cell with probability `keep_prob`, zeroing the
/// rest. Draws again if every non-zero cell was dropped.
pub fn subsample_anchor<R: Rng + ?Sized>(
    sample: &EncodedSample,
    keep_prob: f64,
    rng: &mut R,
) -> Result<EncodedSample> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Domain(format!(
            "keep probability {keep_prob} outside (0, 1]"
        )));
    }
    let nonzero = sample.matrix.iter().any(|&v| v != 0.0);
    loop {
        let mut kept = 0usize;
        let matrix: Vec<f64> = sample
            .matrix
            .iter()
            .map(|&v| {
                if v != 0.0 && rng.random::<f64>() < keep_prob {
                    kept += 1;
                    v
                } else {
                    0.0
                }
            })
            .collect();
        if kept > 0 || !nonzero {
            return Ok(EncodedSample {
                matrix,
                ..sample.clone()
            });
        }
    }
}

// ---- synthetic generator -------------------------------------------------

/// Parameters of the synthetic survey. Both classes share the cadence and
/// noise model; they differ in pulse shape and band colors.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_curves: usize,
    /// Fraction of Ia curves.
    pub balance: f64,
    /// Gaussian flux noise as a fraction of the peak amplitude.
    pub noise_sigma: f64,
    /// Probability the survey observes on a given night.
    pub obs_prob: f64,
    /// Probability each band is measured on an observed night.
    pub band_prob: f64,
    /// Nightly probability that a weather gap starts.
    pub gap_prob: f64,
    pub gap_len: (u32, u32),
    pub duration: (u32, u32),
    /// Relative scatter of the Ia band amplitude ratios.
    pub ia_color_scatter: f64,
    /// Probability a non-Ia curve carries a secondary bump or plateau.
    pub secondary_prob: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_curves: 5000,
            balance: 0.5,
            noise_sigma: 0.08,
            obs_prob: 0.35,
            band_prob: 0.6,
            gap_prob: 0.04,
            gap_len: (4, 12),
            duration: (100, 200),
            ia_color_scatter: 0.06,
            secondary_prob: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.balance) {
            return Err(Error::Config(format!(
                "class balance {} outside [0, 1]",
                self.balance
            )));
        }
        if !prob(self.obs_prob)
            || !prob(self.band_prob)
            || !prob(self.gap_prob)
            || !prob(self.secondary_prob)
        {
            return Err(Error::Config(
                "generator probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.obs_prob == 0.0 || self.band_prob == 0.0 {
            return Err(Error::Config(
                "generator would never observe anything".into(),
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma {}", self.noise_sigma)));
        }
        if self.duration.0 < MIN_CROP_WIDTH as u32 || self.duration.0 > self.duration.1 {
            return Err(Error::Config(format!("duration range {:?}", self.duration)));
        }
        if self.gap_len.0 == 0 || self.gap_len.0 > self.gap_len.1 {
            return Err(Error::Config(format!(
                "gap length range {:?}",
                self.gap_len
            )));
        }
        Ok(())
    }

    pub fn n_ia(&self) -> usize {
        (self.n_curves as f64 * self.balance).round() as usize
    }
}

/// Rise/decline pulse with an optional late component.
#[derive(Clone, Debug)]
struct Pulse {
    peak_day: f64,
    rise: f64,
    fall: f64,
    band_amp: [f64; BANDS],
    band_delay: [f64; BANDS],
    late: Late,
}

#[derive(Clone, Debug)]
enum Late {
    None,
    Bump {
        offset: f64,
        width: f64,
        rel_amp: f64,
    },
    Plateau {
        length: f64,
        rel_level: f64,
    },
}

impl Pulse {
    fn flux(&self, band: usize, t: f64) -> f64 {
        let dt = t - self.peak_day - self.band_delay[band];
        let amp = self.band_amp[band];
        // normalised so the curve reaches roughly `amp` near the peak
        let base = (-dt / self.fall).exp() / (1.0 + (-dt / self.rise).exp());
        let late = match self.late {
            Late::None => 0.0,
            Late::Bump {
                offset,
                width,
                rel_amp,
            } => {
                let z = (dt - offset) / width;
                rel_amp * (-0.5 * z * z).exp()
            }
            Late::Plateau { length, rel_level } => {
                if dt > 0.0 {
                    let hold = 1.0 / (1.0 + ((dt - length) / 4.0).exp());
                    rel_level * hold / (1.0 + (-dt / self.rise).exp())
                } else {
                    0.0
                }
            }
        };
        2.0 * amp * (base + late)
    }
}

fn ia_pulse<R: Rng>(rng: &mut R, stretch: f64, scatter: f64, duration: f64) -> Pulse {
    const COLORS: [f64; BANDS] = [1.0, 0.85, 0.6, 0.45];
    const DELAYS: [f64; BANDS] = [0.0, 1.5, 3.0, 4.5];
    let jitter = Normal::new(1.0, scatter).unwrap();
    let mut band_amp = [0.0; BANDS];
    for (a, c) in band_amp.iter_mut().zip(COLORS) {
        *a = c * jitter.sample(rng).max(0.1);
    }
    Pulse {
        peak_day: rng.random_range(0.15..0.45) * duration,
        rise: rng.random_range(1.5..3.5) * stretch,
        fall: rng.random_range(10.0..18.0) * stretch,
        band_amp,
        band_delay: DELAYS.map(|d| d * stretch),
        late: Late::None,
    }
}

fn non_ia_pulse<R: Rng>(rng: &mut R, stretch: f64, secondary_prob: f64, duration: f64) -> Pulse {
    let mut band_amp = [0.0; BANDS];
    let mut band_delay = [0.0; BANDS];
    for b in 0..BANDS {
        band_amp[b] = rng.random_range(0.2..1.4);
        band_delay[b] = rng.random_range(-2.0..8.0) * stretch;
    }
    let late = if rng.random::<f64>() < secondary_prob {
        if rng.random::<bool>() {
            Late::Bump {
                offset: rng.random_range(20.0..50.0) * stretch,
                width: rng.random_range(5.0..15.0) * stretch,
                rel_amp: rng.random_range(0.3..0.8),
            }
        } else {
            Late::Plateau {
                length: rng.random_range(30.0..80.0) * stretch,
                rel_level: rng.random_range(0.3..0.7),
            }
        }
    } else {
        Late::None
    };
    Pulse {
        peak_day: rng.random_range(0.15..0.45) * duration,
        rise: rng.random_range(1.0..10.0) * stretch,
        fall: rng.random_range(25.0..90.0) * stretch,
        band_amp,
        band_delay,
        late,
    }
}

/// Nights (relative to the first) on which each band is measured. The
/// first and last night are always observed so the duration is exact.
fn cadence<R: Rng>(rng: &mut R, cfg: &GeneratorConfig, duration: u32) -> Vec<(u32, usize)> {
    loop {
        let mut out = Vec::new();
        let mut gap_left = 0u32;
        for night in 0..duration {
            let edge = night == 0 || night + 1 == duration;
            if !edge {
                if gap_left > 0 {
                    gap_left -= 1;
                    continue;
                }
                if rng.random::<f64>() < cfg.gap_prob {
                    gap_left = rng.random_range(cfg.gap_len.0..=cfg.gap_len.1) - 1;
                    continue;
                }
                if rng.random::<f64>() >= cfg.obs_prob {
                    continue;
                }
            }
            let mut any = false;
            for b in 0..BANDS {
                if rng.random::<f64>() < cfg.band_prob {
                    out.push((night, b));
                    any = true;
                }
            }
            if edge && !any {
                out.push((night, rng.random_range(0..BANDS)));
            }
        }
        let mut seen = [false; BANDS];
        for &(_, b) in &out {
            seen[b] = true;
        }
        if seen.iter().filter(|&&s| s).count() >= 2 {
            return out;
        }
    }
}

fn generate_one(
    cfg: &GeneratorConfig,
    streams: &Streams,
    index: usize,
    label: Label,
) -> LightCurve {
    let mut rng = streams.rng("generator.curve", &[index as u64]);
    let duration = rng.random_range(cfg.duration.0..=cfg.duration.1);
    let redshift: f64 = rng.random_range(0.05..0.6);
    let stretch = 1.0 + redshift;
    let pulse = match label {
        Label::Ia => ia_pulse(&mut rng, stretch, cfg.ia_color_scatter, duration as f64),
        Label::NotIa => non_ia_pulse(&mut rng, stretch, cfg.secondary_prob, duration as f64),
    };
    let amplitude = 10f64.powf(rng.random_range(1.5..3.0));
    let noise = Normal::new(0.0, cfg.noise_sigma * amplitude).unwrap();
    let first_day = rng.random_range(0..2000u32);
    let observations = cadence(&mut rng, cfg, duration)
        .into_iter()
        .map(|(night, b)| Observation {
            day: first_day + night,
            band: Band::ALL[b],
            flux: amplitude * pulse.flux(b, night as f64) + noise.sample(&mut rng),
        })
        .collect();
    LightCurve {
        id: format!("sn{index:06}"),
        label,
        redshift: Some((redshift * 1e4).round() / 1e4),
        observations,
    }
}

/// Generates `cfg.n_curves` curves, `round(n × balance)` of them Ia, in a
/// seeded random label order. Curve `i` draws from its own stream, so the
/// result does not depend on scheduling.
pub fn synth_generate(cfg: &GeneratorConfig) -> Result<Vec<LightCurve>> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let n_ia = cfg.n_ia();
    let mut labels: Vec<Label> = (0..cfg.n_curves)
        .map(|i| if i < n_ia { Label::Ia } else { Label::NotIa })
        .collect();
    labels.shuffle(&mut streams.rng("generator.labels", &[]));
    Ok(par::map_range(cfg.n_curves, |i| {
        generate_one(cfg, &streams, i, labels[i])
    }))
}

// ---- k-fold --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified random partition into `k` test folds. Each class is shuffled
/// and dealt round-robin, continuing the deal across classes so fold sizes
/// differ by at most one.
pub fn kfold_split(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; need at least 2 folds")));
    }
    if k > labels.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds dataset size {}",
            labels.len()
        )));
    }
    let streams = Streams::new(seed);
    let mut assignment = vec![0usize; labels.len()];
    let mut dealt = 0usize;
    for (ci, class) in [Label::Ia, Label::NotIa].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut streams.rng("kfold", &[ci as u64]));
        for i in idx {
            assignment[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train) = (0..labels.len()).partition(|&i| assignment[i] == f);
            Fold { train, test }
        })
        .collect())
}

// ---- JSONL -----------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: Label,
    redshift: Option<f64>,
    obs: Vec<(u32, Band, f64)>,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn to_jsonl(curves: &[LightCurve]) -> String {
    let mut out = String::new();
    for c in curves {
        let rec = Record {
            id: c.id.clone(),
            label: c.label,
            redshift: c.redshift,
            obs: c
                .observations
                .iter()
                .map(|o| (o.day, o.band, o.flux))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<LightCurve>> {
    let mut curves = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        curves.push(LightCurve {
            id: rec.id,
            label: rec.label,
            redshift: rec.redshift,
            observations: rec
                .obs
                .into_iter()
                .map(|(day, band, flux)| Observation { day, band, flux })
                .collect(),
        });
    }
    Ok(curves)
}

pub fn save_jsonl(curves: &[LightCurve], path: &Path) -> Result<()> {
    write_atomic(path, to_jsonl(curves).as_bytes())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<LightCurve>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}
