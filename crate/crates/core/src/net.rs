//! The eleven-stage 1D inception network, its embedding-only variant,
//! parameter storage, and the binary checkpoint format.
//!
//! Stage layout: a stem of three parallel temporal convolutions
//! (depth-concatenated), five inception blocks, the color stage (1×1 then
//! 4×1 valid), four inception blocks, and global max pooling. The
//! classifier head adds dense → ReLU → dropout → dense → softmax.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_atomic, EncodedSample, BANDS};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, ActivationMap, ConvParams, ConvSpec, InceptionSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::xavier_uniform;

/// Narrowest input accepted: four stride-2 stages leave one column.
pub const MIN_INPUT_WIDTH: usize = 8;

const MAGIC: &[u8; 7] = b"SNNET1\n";
const BRANCHES: [&str; 6] = ["b1", "b3r", "b3", "b5r", "b5", "pp"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    /// dense(`hidden`) → ReLU → dropout(`dropout`) → dense(2) → softmax
    Classifier { hidden: usize, dropout: f64 },
    /// Output is the global-max-pooled feature vector.
    Embedding,
}

/// Channel widths from which a [`NetworkConfig`] is derived.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPlan {
    /// Channels of each stem branch.
    pub stem: usize,
    pub stem_kernels: [usize; 3],
    pub pre: [usize; 5],
    pub color: usize,
    pub post: [usize; 4],
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ChannelPlan {
    /// 48 → 64 → 64 → 96 → 96 → 128 | 128 → 128 | 160 → 192 → 224 → 256.
    fn default() -> Self {
        Self {
            stem: 16,
            stem_kernels: [1, 3, 5],
            pre: [64, 64, 96, 96, 128],
            color: 128,
            post: [160, 192, 224, 256],
            hidden: 1024,
            dropout: 0.4,
        }
    }
}

impl ChannelPlan {
    /// A narrower plan (same topology) sized for single-core runs.
    pub fn desk() -> Self {
        Self {
            stem: 4,
            stem_kernels: [1, 3, 5],
            pre: [16, 16, 24, 24, 32],
            color: 32,
            post: [32, 40, 48, 64],
            hidden: 128,
            dropout: 0.4,
        }
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stem: Vec<ConvSpec>,
    pub blocks_pre: Vec<InceptionSpec>,
    pub color: Vec<ConvSpec>,
    pub blocks_post: Vec<InceptionSpec>,
    pub head: Head,
}

/// Stride-2 positions inside each inception group (layers 2, 5, 9, 10 of
/// the full numbering).
pub const PRE_STRIDED: [usize; 2] = [0, 3];
pub const POST_STRIDED: [usize; 2] = [1, 2];

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::from_plan(&ChannelPlan::default(), true)
    }
}

impl NetworkConfig {
    pub fn from_plan(plan: &ChannelPlan, classifier: bool) -> Self {
        let stem: Vec<ConvSpec> = plan
            .stem_kernels
            .iter()
            .map(|&k| ConvSpec::temporal(1, plan.stem, k, 1))
            .collect();
        let mut c = plan.stem * stem.len();
        let mut blocks_pre = Vec::new();
        for (i, &out) in plan.pre.iter().enumerate() {
            let s = if PRE_STRIDED.contains(&i) { 2 } else { 1 };
            blocks_pre.push(InceptionSpec::balanced(c, out, s));
            c = blocks_pre[i].out_channels();
        }
        let color = vec![
            ConvSpec::temporal(c, plan.color, 1, 1),
            ConvSpec::color(plan.color, plan.color),
        ];
        c = plan.color;
        let mut blocks_post = Vec::new();
        for (i, &out) in plan.post.iter().enumerate() {
            let s = if POST_STRIDED.contains(&i) { 2 } else { 1 };
            blocks_post.push(InceptionSpec::balanced(c, out, s));
            c = blocks_post[i].out_channels();
        }
        let head = if classifier {
            Head::Classifier {
                hidden: plan.hidden,
                dropout: plan.dropout,
            }
        } else {
            Head::Embedding
        };
        Self {
            stem,
            blocks_pre,
            color,
            blocks_post,
            head,
        }
    }

    pub fn stem_channels(&self) -> usize {
        self.stem.iter().map(|s| s.out_channels).sum()
    }

    /// Length of the global-max-pooled feature vector.
    pub fn embedding_dim(&self) -> usize {
        self.blocks_post
            .last()
            .map(|b| b.out_channels())
            .unwrap_or_else(|| self.color.last().map_or(0, |c| c.out_channels))
    }

    /// Parameterized stages before the head.
    pub fn stage_count(&self) -> usize {
        1 + self.blocks_pre.len() + 1 + self.blocks_post.len()
    }

    pub fn with_head(&self, head: Head) -> Self {
        Self {
            head,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stem.len() != 3
            || self.blocks_pre.len() != 5
            || self.color.len() != 2
            || self.blocks_post.len() != 4
        {
            return cfg(format!(
                "expected 3 stem convs, 5 + 4 inception blocks and 2 color convs, got {} / {} / {} / {}",
                self.stem.len(),
                self.blocks_pre.len(),
                self.blocks_post.len(),
                self.color.len()
            ));
        }
        for s in &self.stem {
            s.validate()?;
            if s.in_channels != 1 || s.kernel_h != 1 || s.stride_w != 1 {
                return cfg(format!(
                    "stem convolution {s:?} must be 1-channel, 1×k, stride 1"
                ));
            }
        }
        let mut c = self.stem_channels();
        for (group, blocks) in [("pre", &self.blocks_pre), ("post", &self.blocks_post)] {
            if group == "post" {
                let (a, b) = (&self.color[0], &self.color[1]);
                a.validate()?;
                b.validate()?;
                if a.kernel_h != 1 || a.kernel_w != 1 || a.stride_w != 1 || b.kernel_h != 4 {
                    return cfg("color stage must be a 1×1 convolution then a 4×1 valid one".into());
                }
                if a.in_channels != c || b.in_channels != a.out_channels {
                    return cfg(format!("color stage channels do not chain from {c}"));
                }
                c = b.out_channels;
            }
            let strided = blocks.iter().filter(|b| b.stride_w == 2).count();
            if strided != 2 {
                return cfg(format!(
                    "{group} group has {strided} stride-2 blocks; exactly 2 required"
                ));
            }
            for (i, b) in blocks.iter().enumerate() {
                b.validate()?;
                if b.in_channels != c {
                    return cfg(format!(
                        "{group} block {i} expects {} channels, receives {c}",
                        b.in_channels
                    ));
                }
                c = b.out_channels();
            }
        }
        if let Head::Classifier { hidden, dropout } = self.head {
            if hidden == 0 || !(0.0..1.0).contains(&dropout) {
                return cfg(format!("classifier head hidden={hidden} dropout={dropout}"));
            }
        }
        Ok(())
    }

    /// Parameter names, shapes and Xavier fans in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut conv = |name: String, s: &ConvSpec| {
            let (fan_in, fan_out) = s.fans();
            out.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: s.weight_shape().to_vec(),
                fans: Some((fan_in, fan_out)),
            });
            out.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![s.out_channels],
                fans: None,
            });
        };
        for (i, s) in self.stem.iter().enumerate() {
            conv(format!("stem.{i}"), s);
        }
        for (i, b) in self.blocks_pre.iter().enumerate() {
            for (s, br) in b.convs().iter().zip(BRANCHES) {
                conv(format!("pre.{i}.{br}"), s);
            }
        }
        for (i, s) in self.color.iter().enumerate() {
            conv(format!("color.{i}"), s);
        }
        for (i, b) in self.blocks_post.iter().enumerate() {
            for (s, br) in b.convs().iter().zip(BRANCHES) {
                conv(format!("post.{i}.{br}"), s);
            }
        }
        if let Head::Classifier { hidden, .. } = self.head {
            out.extend(head_specs(self.embedding_dim(), hidden));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Flat `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.stem.iter().enumerate() {
            let _ = writeln!(
                s,
                "stem.{i}.out={}\nstem.{i}.kernel={}",
                c.out_channels, c.kernel_w
            );
        }
        let block = |s: &mut String, g: &str, i: usize, b: &InceptionSpec| {
            let _ = writeln!(
                s,
                "{g}.{i}.b1={}\n{g}.{i}.b3r={}\n{g}.{i}.b3={}\n{g}.{i}.b5r={}\n{g}.{i}.b5={}\n{g}.{i}.pp={}\n{g}.{i}.stride={}",
                b.b1, b.b3r, b.b3, b.b5r, b.b5, b.pp, b.stride_w
            );
        };
        for (i, b) in self.blocks_pre.iter().enumerate() {
            block(&mut s, "pre", i, b);
        }
        let _ = writeln!(
            s,
            "color.0.out={}\ncolor.1.out={}",
            self.color[0].out_channels, self.color[1].out_channels
        );
        for (i, b) in self.blocks_post.iter().enumerate() {
            block(&mut s, "post", i, b);
        }
        match self.head {
            Head::Classifier { hidden, dropout } => {
                let _ = writeln!(
                    s,
                    "head=classifier\nhead.hidden={hidden}\nhead.dropout={dropout}"
                );
            }
            Head::Embedding => s.push_str("head=embedding\n"),
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut stem = Vec::new();
        for i in 0..3 {
            let out = kv.num(&format!("stem.{i}.out"))?;
            let kw = kv.num(&format!("stem.{i}.kernel"))?;
            stem.push(ConvSpec::temporal(1, out, kw, 1));
        }
        let mut c: usize = stem.iter().map(|s| s.out_channels).sum();
        let blocks_pre = kv.blocks("pre", 5, &mut c)?;
        let c0 = kv.num("color.0.out")?;
        let c1 = kv.num("color.1.out")?;
        let color = vec![ConvSpec::temporal(c, c0, 1, 1), ConvSpec::color(c0, c1)];
        c = c1;
        let blocks_post = kv.blocks("post", 4, &mut c)?;
        let head = match kv.take("head")?.as_str() {
            "classifier" => Head::Classifier {
                hidden: kv.num("head.hidden")?,
                dropout: kv.num("head.dropout")?,
            },
            "embedding" => Head::Embedding,
            other => return Err(Error::Config(format!("unknown head {other:?}"))),
        };
        kv.finish()?;
        let cfg = Self {
            stem,
            blocks_pre,
            color,
            blocks_post,
            head,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parsed `key=value` lines that are consumed key by key.
struct KeyValues(std::collections::BTreeMap<String, String>);

impl KeyValues {
    fn parse(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    fn take(&mut self, key: &str) -> Result<String> {
        self.0
            .remove(key)
            .ok_or_else(|| Error::Config(format!("network config lacks {key}")))
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("network config {key}={v} is not a number")))
    }

    fn blocks(&mut self, group: &str, n: usize, c: &mut usize) -> Result<Vec<InceptionSpec>> {
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let b = InceptionSpec {
                in_channels: *c,
                b1: self.num(&format!("{group}.{i}.b1"))?,
                b3r: self.num(&format!("{group}.{i}.b3r"))?,
                b3: self.num(&format!("{group}.{i}.b3"))?,
                b5r: self.num(&format!("{group}.{i}.b5r"))?,
                b5: self.num(&format!("{group}.{i}.b5"))?,
                pp: self.num(&format!("{group}.{i}.pp"))?,
                stride_w: self.num(&format!("{group}.{i}.stride"))?,
            };
            *c = b.out_channels();
            v.push(b);
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown network config key {k}"))),
            None => Ok(()),
        }
    }
}

fn head_specs(embedding_dim: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec {
            name: "head.hidden.weight".into(),
            shape: vec![embedding_dim, hidden],
            fans: Some((embedding_dim, hidden)),
        },
        ParamSpec {
            name: "head.hidden.bias".into(),
            shape: vec![hidden],
            fans: None,
        },
        ParamSpec {
            name: "head.out.weight".into(),
            shape: vec![hidden, 2],
            fans: Some((hidden, 2)),
        },
        ParamSpec {
            name: "head.out.bias".into(),
            shape: vec![2],
            fans: None,
        },
    ]
}

/// Name, shape and Xavier fans (`None` for zero-initialized biases).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fans: Option<(usize, usize)>,
}

fn init_params<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Vec<Tensor>> {
    specs
        .iter()
        .map(|s| match s.fans {
            Some((fi, fo)) => xavier_uniform(fi, fo, &s.shape, rng),
            None => Ok(Tensor::zeros(&s.shape)),
        })
        .collect()
}

/// Parameters bound as tape variables in declaration order. `head` is
/// empty for embedding networks; `trunk` is empty after
/// [`Network::bind_head`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub trunk: Vec<Var>,
    pub head: Vec<Var>,
}

/// Per-stage `(name, channels, height, width)` of the first example.
pub type ShapeTrace = Vec<(String, usize, usize, usize)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Tensor>,
}

impl Network {
    /// Xavier-uniform weights and zero biases, drawn in declaration order.
    pub fn build<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.param_specs(), rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(shape_err!(
                "{} parameters for a config declaring {}",
                params.len(),
                specs.len()
            ));
        }
        for (s, p) in specs.iter().zip(&params) {
            if p.shape() != s.shape.as_slice() {
                return Err(shape_err!(
                    "{}: shape {:?}, config expects {:?}",
                    s.name,
                    p.shape(),
                    s.shape
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Number of trunk (non-head) parameter tensors.
    pub fn trunk_len(&self) -> usize {
        self.config.with_head(Head::Embedding).param_specs().len()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config
            .param_specs()
            .into_iter()
            .map(|s| s.name)
            .collect()
    }

    /// The trunk alone, as an embedding network.
    pub fn embedding_network(&self) -> Network {
        Network {
            config: self.config.with_head(Head::Embedding),
            params: self.params[..self.trunk_len()].to_vec(),
        }
    }

    /// Replaces any head by a freshly initialized classifier head.
    pub fn with_classifier_head<R: Rng + ?Sized>(
        &self,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Network> {
        let config = self.config.with_head(Head::Classifier { hidden, dropout });
        config.validate()?;
        let mut params = self.params[..self.trunk_len()].to_vec();
        params.extend(init_params(
            &head_specs(config.embedding_dim(), hidden),
            rng,
        )?);
        Ok(Network { config, params })
    }

    /// Records every parameter as a tape leaf. Trunk and head can be
    /// trainable independently; frozen parts are plain constants.
    pub fn bind(&self, tape: &mut Tape, train_trunk: bool, train_head: bool) -> Bound {
        let (t, h) = self.params.split_at(self.trunk_len());
        Bound {
            trunk: t
                .iter()
                .map(|p| tape.leaf(p.clone(), train_trunk))
                .collect(),
            head: h.iter().map(|p| tape.leaf(p.clone(), train_head)).collect(),
        }
    }

    /// Binds only the head (trainable), for training on precomputed
    /// features.
    pub fn bind_head(&self, tape: &mut Tape) -> Bound {
        Bound {
            trunk: Vec::new(),
            head: self.params[self.trunk_len()..]
                .iter()
                .map(|p| tape.leaf(p.clone(), true))
                .collect(),
        }
    }

    /// Global-max-pooled features `[batch × embedding_dim]`.
    pub fn trunk(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &ActivationMap,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut record = |tape: &Tape, name: String, m: &ActivationMap| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name, m.channels(tape), m.height(tape), m.width(tape)));
            }
        };
        record(tape, "input".into(), input);
        let conv_params = |k: usize| ConvParams {
            weight: bound.trunk[2 * k],
            bias: bound.trunk[2 * k + 1],
        };
        let mut k = 0;
        let mut branches = Vec::new();
        for s in &cfg.stem {
            let pre = nn::conv_temporal(tape, input, s, conv_params(k))?;
            k += 1;
            branches.push(tape.relu(pre.data));
        }
        let data = tape.concat(&branches, 1)?;
        let mut x = ActivationMap::new(tape, data, input.valid_w.clone())?;
        record(tape, "stem".into(), &x);
        let block_params =
            |k: usize| -> [ConvParams; 6] { std::array::from_fn(|j| conv_params(k + j)) };
        for (i, b) in cfg.blocks_pre.iter().enumerate() {
            x = nn::inception_forward(tape, &x, b, &block_params(k))?;
            k += 6;
            record(tape, format!("pre.{i}"), &x);
        }
        for s in &cfg.color {
            let pre = if s.kernel_h == 4 {
                nn::conv_color(tape, &x, s, conv_params(k))?
            } else {
                nn::conv_temporal(tape, &x, s, conv_params(k))?
            };
            k += 1;
            x = ActivationMap {
                data: tape.relu(pre.data),
                valid_w: pre.valid_w,
            };
        }
        record(tape, "color".into(), &x);
        for (i, b) in cfg.blocks_post.iter().enumerate() {
            x = nn::inception_forward(tape, &x, b, &block_params(k))?;
            k += 6;
            record(tape, format!("post.{i}"), &x);
        }
        nn::global_max_pool(tape, &x)
    }

    /// Class probabilities `[batch × 2]` from trunk features.
    pub fn head<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let Head::Classifier { dropout, .. } = self.config.head else {
            return Err(Error::Config("network has no classifier head".into()));
        };
        let [w1, b1, w2, b2] = bound.head[..] else {
            return Err(shape_err!(
                "head binding holds {} variables",
                bound.head.len()
            ));
        };
        let h = nn::dense(tape, features, w1, b1)?;
        let h = tape.relu(h);
        let h = nn::dropout(tape, h, dropout, training, rng)?;
        let logits = nn::dense(tape, h, w2, b2)?;
        nn::softmax(tape, logits)
    }

    /// Pre-head features of `batch` (inference).
    pub fn forward_embedding(&self, batch: &[EncodedSample]) -> Result<Tensor> {
        self.forward_embedding_traced(batch).map(|(t, _)| t)
    }

    pub fn forward_embedding_traced(
        &self,
        batch: &[EncodedSample],
    ) -> Result<(Tensor, ShapeTrace)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let input = batch_input(&mut tape, batch)?;
        let mut trace = ShapeTrace::new();
        let f = self.trunk(&mut tape, &bound, &input, Some(&mut trace))?;
        Ok((tape.value(f).clone(), trace))
    }

    /// Class probabilities of `batch` (inference; dropout off). Column 1
    /// is the Ia probability.
    pub fn forward_classifier(&self, batch: &[EncodedSample]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false, false);
        let input = batch_input(&mut tape, batch)?;
        let f = self.trunk(&mut tape, &bound, &input, None)?;
        let p = self.head(
            &mut tape,
            &bound,
            f,
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        Ok(tape.value(p).clone())
    }

    /// Ia probabilities for any number of samples, `chunk` at a time.
    pub fn predict_scores(&self, samples: &[EncodedSample], chunk: usize) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let p = self.forward_classifier(part)?;
            scores.extend(p.data().chunks(2).map(|r| r[1]));
        }
        Ok(scores)
    }

    /// Features for any number of samples, row-major `[n × dim]`.
    pub fn embed_all(&self, samples: &[EncodedSample], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let dim = self.config.embedding_dim();
        let mut rows = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let e = self.forward_embedding(part)?;
            rows.extend(e.data().chunks(dim).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }

    // ---- checkpoint -----------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let text = self.config.to_text();
        out.extend((text.len() as u32).to_le_bytes());
        out.extend(text.as_bytes());
        for (spec, p) in self.config.param_specs().iter().zip(&self.params) {
            out.extend((spec.name.len() as u32).to_le_bytes());
            out.extend(spec.name.as_bytes());
            out.extend((p.rank() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in p.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Version("missing SNNET1 header".into()));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Version("config block is not UTF-8".into()))?;
        let config = NetworkConfig::from_text(text)?;
        let specs = config.param_specs();
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let n = r.u32()? as usize;
            let name = r.take(n)?;
            if name != spec.name.as_bytes() {
                return Err(shape_err!(
                    "expected parameter {}, found {}",
                    spec.name,
                    String::from_utf8_lossy(name)
                ));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != spec.shape {
                return Err(shape_err!(
                    "{}: stored shape {shape:?}, config expects {:?}",
                    spec.name,
                    spec.shape
                ));
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Version(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint that must match `expected` exactly.
    pub fn load_expecting(path: &Path, expected: &NetworkConfig) -> Result<Self> {
        let net = Self::load(path)?;
        if &net.config != expected {
            let (a, b) = (expected.param_specs(), net.config.param_specs());
            let first = a.iter().zip(&b).find(|(x, y)| x != y);
            return Err(match first {
                Some((x, y)) => shape_err!(
                    "{}: checkpoint has {:?}, config expects {:?}",
                    x.name,
                    y.shape,
                    x.shape
                ),
                None => shape_err!(
                    "checkpoint has {} parameters, config expects {}",
                    b.len(),
                    a.len()
                ),
            });
        }
        Ok(net)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Stacks samples into `[batch × 1 × 4 × max_width]`, zero-padding each
/// on the right and recording its own valid width.
pub fn batch_input(tape: &mut Tape, batch: &[EncodedSample]) -> Result<ActivationMap> {
    if batch.is_empty() {
        return Err(shape_err!("empty batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.valid_w < MIN_INPUT_WIDTH) {
        return Err(shape_err!(
            "input width {} below minimum {MIN_INPUT_WIDTH}",
            s.valid_w
        ));
    }
    let w = batch.iter().map(|s| s.width).max().unwrap_or(0);
    let mut data = vec![0.0; batch.len() * BANDS * w];
    for (b, s) in batch.iter().enumerate() {
        if s.matrix.len() != BANDS * s.width || s.valid_w > s.width {
            return Err(shape_err!(
                "sample matrix holds {} cells for width {} (valid {})",
                s.matrix.len(),
                s.width,
                s.valid_w
            ));
        }
        for r in 0..BANDS {
            let dst = (b * BANDS + r) * w;
            data[dst..dst + s.width].copy_from_slice(&s.matrix[r * s.width..(r + 1) * s.width]);
        }
    }
    let x = tape.constant(Tensor::new(&[batch.len(), 1, BANDS, w], data)?);
    ActivationMap::new(tape, x, batch.iter().map(|s| s.valid_w).collect())
}
