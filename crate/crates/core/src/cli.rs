//! Run configuration and the `gen`, `train`, `eval` and `predict`
//! commands.
//!
//! Configuration is flat `key=value` text. Every key has a default; a
//! config file overrides defaults and command-line overrides win over the
//! file. Unknown keys are rejected. All randomness flows from the single
//! `seed` key through named streams.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    encode_all, kfold_split, load_jsonl, save_jsonl, synth_generate, write_atomic, zero_fraction,
    EncodedSample, GeneratorConfig, Label,
};
use crate::error::{Error, Result};
use crate::loss::MarginConfig;
use crate::metrics::{evaluate_fold, roc_csv, Aggregate, Evaluation, DECISION_THRESHOLD};
use crate::net::{ChannelPlan, Head, Network, NetworkConfig};
use crate::rng::Streams;
use crate::train::{save_trace, train_cnn, train_head, train_siamese, TrainPlan};

/// Every recognized key with its default, in echo order. `auto` values
/// are resolved from other keys.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.path", "data.jsonl"),
    ("data.n_curves", "5000"),
    ("data.balance", "0.5"),
    ("data.noise_sigma", "0.08"),
    ("data.obs_prob", "0.35"),
    ("data.band_prob", "0.6"),
    ("data.gap_prob", "0.04"),
    ("data.gap_min", "4"),
    ("data.gap_max", "12"),
    ("data.duration_min", "100"),
    ("data.duration_max", "200"),
    ("data.ia_color_scatter", "0.06"),
    ("data.secondary_prob", "0.5"),
    ("net.plan", "default"),
    ("net.stem", "auto"),
    ("net.stem_kernels", "auto"),
    ("net.pre", "auto"),
    ("net.color", "auto"),
    ("net.post", "auto"),
    ("net.hidden", "auto"),
    ("net.dropout", "auto"),
    ("train.mode", "cnn"),
    ("train.iterations", "auto"),
    ("train.batch_size", "128"),
    ("train.lr_start", "0.01"),
    ("train.lr_end", "0.0005"),
    ("train.p_aug", "0.5"),
    ("train.keep_prob", "0.5"),
    ("train.margin", "1"),
    ("train.margin_prime", "1"),
    ("train.head_iterations", "2000"),
    ("eval.k", "4"),
    ("eval.seed", "auto"),
    ("io.out", "out"),
    ("io.checkpoint", "auto"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Cnn,
    Siamese,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Mode::Cnn),
            "siamese" => Ok(Mode::Siamese),
            _ => Err(Error::Config(format!(
                "mode {s:?}; expected cnn or siamese"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<(String, String)>,
    /// Keys set explicitly by a file or override.
    explicit: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            explicit: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected key=value, got {line:?}"),
                });
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        slot.1 = value.to_string();
        if !self.explicit.iter().any(|k| k == key) {
            self.explicit.push(key.to_string());
        }
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .expect("key is in the table")
    }

    fn is_auto(&self, key: &str) -> bool {
        self.get(key) == "auto"
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}={v} has the wrong type")))
    }

    fn list<const N: usize>(&self, key: &str) -> Result<[usize; N]> {
        let v = self.get(key);
        let items = v
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("{key}={v} is not a list of counts")))?;
        items
            .try_into()
            .map_err(|_| Error::Config(format!("{key} needs exactly {N} comma-separated counts")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn mode(&self) -> Result<Mode> {
        self.get("train.mode").parse()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("io.out"))
    }

    pub fn data_path(&self) -> PathBuf {
        PathBuf::from(self.get("data.path"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.is_auto("io.checkpoint") {
            self.out_dir().join("model.ckpt")
        } else {
            PathBuf::from(self.get("io.checkpoint"))
        }
    }

    pub fn eval_seed(&self) -> Result<u64> {
        if self.is_auto("eval.seed") {
            self.seed()
        } else {
            self.parse("eval.seed")
        }
    }

    pub fn k(&self) -> Result<usize> {
        self.parse("eval.k")
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let cfg = GeneratorConfig {
            n_curves: self.parse("data.n_curves")?,
            balance: self.parse("data.balance")?,
            noise_sigma: self.parse("data.noise_sigma")?,
            obs_prob: self.parse("data.obs_prob")?,
            band_prob: self.parse("data.band_prob")?,
            gap_prob: self.parse("data.gap_prob")?,
            gap_len: (self.parse("data.gap_min")?, self.parse("data.gap_max")?),
            duration: (
                self.parse("data.duration_min")?,
                self.parse("data.duration_max")?,
            ),
            ia_color_scatter: self.parse("data.ia_color_scatter")?,
            secondary_prob: self.parse("data.secondary_prob")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn channel_plan(&self) -> Result<ChannelPlan> {
        let mut p = match self.get("net.plan") {
            "default" => ChannelPlan::default(),
            "desk" => ChannelPlan::desk(),
            other => {
                return Err(Error::Config(format!(
                    "net.plan={other}; expected default or desk"
                )))
            }
        };
        if !self.is_auto("net.stem") {
            p.stem = self.parse("net.stem")?;
        }
        if !self.is_auto("net.stem_kernels") {
            p.stem_kernels = self.list("net.stem_kernels")?;
        }
        if !self.is_auto("net.pre") {
            p.pre = self.list("net.pre")?;
        }
        if !self.is_auto("net.color") {
            p.color = self.parse("net.color")?;
        }
        if !self.is_auto("net.post") {
            p.post = self.list("net.post")?;
        }
        if !self.is_auto("net.hidden") {
            p.hidden = self.parse("net.hidden")?;
        }
        if !self.is_auto("net.dropout") {
            p.dropout = self.parse("net.dropout")?;
        }
        Ok(p)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig::from_plan(&self.channel_plan()?, true);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_plan(&self) -> Result<TrainPlan> {
        let base = match self.mode()? {
            Mode::Cnn => TrainPlan::cnn(),
            Mode::Siamese => TrainPlan::siamese(),
        };
        let plan = TrainPlan {
            iterations: if self.is_auto("train.iterations") {
                base.iterations
            } else {
                self.parse("train.iterations")?
            },
            batch_size: self.parse("train.batch_size")?,
            lr_start: self.parse("train.lr_start")?,
            lr_end: self.parse("train.lr_end")?,
            p_aug: self.parse("train.p_aug")?,
            keep_prob: self.parse("train.keep_prob")?,
            margins: MarginConfig {
                margin: self.parse("train.margin")?,
                margin_prime: self.parse("train.margin_prime")?,
            },
            head_iterations: self.parse("train.head_iterations")?,
            seed: self.seed()?,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Whether any `net.*` key was set explicitly.
    pub fn net_is_explicit(&self) -> bool {
        self.explicit.iter().any(|k| k.starts_with("net."))
    }

    /// Every key with `auto` values filled in, one `key=value` per line.
    pub fn resolved_text(&self) -> Result<String> {
        let mut r = self.clone();
        let p = self.channel_plan()?;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        r.force("net.stem", p.stem.to_string());
        r.force("net.stem_kernels", join(&p.stem_kernels));
        r.force("net.pre", join(&p.pre));
        r.force("net.color", p.color.to_string());
        r.force("net.post", join(&p.post));
        r.force("net.hidden", p.hidden.to_string());
        r.force("net.dropout", p.dropout.to_string());
        r.force(
            "train.iterations",
            self.train_plan()?.iterations.to_string(),
        );
        r.force("eval.seed", self.eval_seed()?.to_string());
        r.force(
            "io.checkpoint",
            self.checkpoint_path().display().to_string(),
        );
        let mut s = String::new();
        for (k, v) in &r.values {
            let _ = writeln!(s, "{k}={v}");
        }
        Ok(s)
    }

    fn force(&mut self, key: &str, value: String) {
        if let Some(slot) = self.values.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

fn header(cmd: &str, cfg: &RunConfig) -> Result<String> {
    let mut s = format!("# lcnet {cmd}\n# resolved configuration\n");
    for line in cfg.resolved_text()?.lines() {
        let _ = writeln!(s, "#   {line}");
    }
    Ok(s)
}

/// Generates the synthetic dataset and writes it as JSONL.
pub fn cmd_gen(cfg: &RunConfig) -> Result<String> {
    let gen = cfg.generator()?;
    let mut report = header("gen", cfg)?;
    let path = cfg.data_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let curves = synth_generate(&gen)?;
    let samples = encode_all(&curves)?;
    save_jsonl(&curves, &path)?;
    let ia = curves.iter().filter(|c| c.label == Label::Ia).count();
    let _ = writeln!(report, "curves: {}", curves.len());
    let _ = writeln!(report, "balance (Ia/notIa): {ia}/{}", curves.len() - ia);
    let _ = writeln!(
        report,
        "zero cells: {:.2}%",
        100.0 * zero_fraction(&samples)
    );
    let _ = writeln!(report, "written: {}", path.display());
    Ok(report)
}

fn load_samples(cfg: &RunConfig) -> Result<(Vec<String>, Vec<EncodedSample>)> {
    let path = cfg.data_path();
    require_file(&path)?;
    let curves = load_jsonl(&path)?;
    if curves.is_empty() {
        return Err(Error::Data(format!("{} holds no curves", path.display())));
    }
    for c in &curves {
        c.validate()?;
    }
    let ids = curves.iter().map(|c| c.id.clone()).collect();
    Ok((ids, encode_all(&curves)?))
}

/// Trains one model on `train` and returns it with its loss traces
/// (embedding trace first for Siamese mode).
pub fn fit(
    train: &[EncodedSample],
    net: &NetworkConfig,
    plan: &TrainPlan,
    mode: Mode,
    streams: &Streams,
) -> Result<(Network, Vec<Vec<crate::train::TraceRow>>)> {
    match mode {
        Mode::Cnn => {
            let (n, t) = train_cnn(train, net, plan, streams)?;
            Ok((n, vec![t]))
        }
        Mode::Siamese => {
            let (emb, t) = train_siamese(train, net, plan, streams)?;
            let Head::Classifier { hidden, dropout } = net.head else {
                return Err(Error::Config(
                    "Siamese mode needs classifier head settings".into(),
                ));
            };
            let (n, h) = train_head(&emb, train, hidden, dropout, plan, streams)?;
            Ok((n, vec![t, h]))
        }
    }
}

/// Trains on the whole dataset; writes the checkpoint and loss traces.
pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let (net_cfg, plan, mode) = (cfg.network()?, cfg.train_plan()?, cfg.mode()?);
    let (_, samples) = load_samples(cfg)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let ckpt = cfg.checkpoint_path();
    let mut report = header("train", cfg)?;
    let streams = Streams::new(cfg.seed()?).child("train", &[]);
    let (net, traces) = fit(&samples, &net_cfg, &plan, mode, &streams)?;
    net.save(&ckpt)?;
    let names = ["trace.csv", "head_trace.csv"];
    for (t, name) in traces.iter().zip(names) {
        save_trace(t, &out.join(name))?;
        let last = t.last().map_or(f64::NAN, |r| r.loss);
        let _ = writeln!(report, "{name}: {} steps, final loss {last:.6}", t.len());
    }
    let _ = writeln!(report, "parameters: {}", net.config().param_count());
    let _ = writeln!(report, "checkpoint: {}", ckpt.display());
    Ok(report)
}

/// One cross-validation fold's outcome.
#[derive(Clone, Debug)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub eval: Evaluation,
}

/// The k-fold protocol on encoded samples: per fold, train on the other
/// folds and evaluate on the held-out one.
pub fn cross_validate(
    samples: &[EncodedSample],
    net: &NetworkConfig,
    plan: &TrainPlan,
    mode: Mode,
    k: usize,
    split_seed: u64,
    streams: &Streams,
) -> Result<Vec<FoldReport>> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let folds = kfold_split(&labels, k, split_seed)?;
    let mut reports = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let train: Vec<EncodedSample> = fold.train.iter().map(|&i| samples[i].clone()).collect();
        let test: Vec<EncodedSample> = fold.test.iter().map(|&i| samples[i].clone()).collect();
        let (model, _) = fit(&train, net, plan, mode, &streams.child("fold", &[f as u64]))?;
        let eval = evaluate_fold(&model, &test)?;
        log::info!(
            "fold {f}: accuracy {:.4} auc {:.4}",
            eval.accuracy,
            eval.auc
        );
        reports.push(FoldReport {
            fold: f,
            n_train: train.len(),
            n_test: test.len(),
            eval,
        });
    }
    Ok(reports)
}

/// Runs k-fold cross-validation; writes per-fold ROC CSVs and a report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let (net_cfg, plan, mode, k) = (cfg.network()?, cfg.train_plan()?, cfg.mode()?, cfg.k()?);
    let (_, samples) = load_samples(cfg)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let mut report = header("eval", cfg)?;
    let streams = Streams::new(cfg.seed()?).child("eval", &[]);
    let folds = cross_validate(
        &samples,
        &net_cfg,
        &plan,
        mode,
        k,
        cfg.eval_seed()?,
        &streams,
    )?;
    let _ = writeln!(
        report,
        "positive class: Ia; accuracy threshold {DECISION_THRESHOLD}"
    );
    for r in &folds {
        write_atomic(
            &out.join(format!("roc_fold{}.csv", r.fold)),
            roc_csv(&r.eval.roc).as_bytes(),
        )?;
        let _ = writeln!(
            report,
            "fold {}: train {} test {} accuracy {:.6} auc {:.6}",
            r.fold, r.n_train, r.n_test, r.eval.accuracy, r.eval.auc
        );
    }
    let auc = Aggregate::of(&folds.iter().map(|r| r.eval.auc).collect::<Vec<_>>());
    let acc = Aggregate::of(&folds.iter().map(|r| r.eval.accuracy).collect::<Vec<_>>());
    let _ = writeln!(report, "AUC {auc}");
    let _ = writeln!(report, "accuracy {acc}");
    write_atomic(&out.join("eval_report.txt"), report.as_bytes())?;
    Ok(report)
}

/// Scores every curve with a checkpoint; writes `predictions.csv`.
pub fn cmd_predict(cfg: &RunConfig) -> Result<String> {
    let ckpt = cfg.checkpoint_path();
    require_file(&ckpt)?;
    let net = if cfg.net_is_explicit() {
        Network::load_expecting(&ckpt, &cfg.network()?)?
    } else {
        Network::load(&ckpt)?
    };
    let (ids, samples) = load_samples(cfg)?;
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let scores = net.predict_scores(&samples, 64)?;
    let mut csv = String::from("id,score_Ia,predicted_label\n");
    for (id, s) in ids.iter().zip(&scores) {
        let label = if *s >= DECISION_THRESHOLD {
            Label::Ia
        } else {
            Label::NotIa
        };
        let _ = writeln!(csv, "{id},{s:.17e},{}", label.as_str());
    }
    let path = out.join("predictions.csv");
    write_atomic(&path, csv.as_bytes())?;
    let mut report = header("predict", cfg)?;
    let _ = writeln!(report, "scored: {}", scores.len());
    let _ = writeln!(report, "written: {}", path.display());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 5 # comment\n\ntrain.mode=siamese\n")
            .unwrap();
        assert_eq!(c.seed().unwrap(), 5);
        assert_eq!(c.train_plan().unwrap().iterations, 9000);
        assert!(matches!(c.set("train.lr", "1"), Err(Error::Config(_))));
        assert!(matches!(
            c.apply_text("novalue"),
            Err(Error::Parse { line: 1, .. })
        ));
        c.set_pair("net.plan=desk").unwrap();
        assert!(c.net_is_explicit());
        let text = c.resolved_text().unwrap();
        assert!(text.contains("net.pre=16,16,24,24,32\n"));
        assert!(text.contains("eval.seed=5\n"));
    }
}
