//! The alternating G/D training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::aiw::{aiw_weights, distance_stats, AiwConfig, WeightReport};
use crate::error::{Error, Result};
use crate::models::{
    pretrain_embedding, Architecture, BoundDiscriminator, BoundGenerator, Discriminator, Embedding, Generator,
    PretrainConfig,
};
use crate::mst::{data_loss, mst_generator_loss, rollout, GeneratorObjective, HopTrace};
use crate::numerics::{AdamConfig, AdamState, Checkpoint, Graph, Scalar, StepOutcome, Tensor, Var};
use crate::rng::{stream_rng, Stream};
use crate::synthdata::{
    attribute_tensor, draw_intermediate_attributes, draw_target_attributes, make_domain_spec, oracle_translate,
    sample_batch, AttributeVector, Batch, DomainSpec,
};

pub const MAX_HOPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub batch_size: usize,
    pub hops: usize,
    pub aiw: bool,
    pub mst: bool,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub logit_clamp: f64,
    pub self_normalize: bool,
    pub paired_l1: bool,
    pub l1_lambda: f64,
    pub nonsaturating: bool,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub embed_steps: usize,
    pub embed_lr: f64,
    pub eval_samples: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 3,
            d: 8,
            sigma: 0.1,
            batch_size: 16,
            hops: 2,
            aiw: true,
            mst: true,
            steps: 20_000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            logit_clamp: 4.0,
            self_normalize: true,
            paired_l1: false,
            l1_lambda: 10.0,
            nonsaturating: false,
            seed: 0,
            checkpoint_every: 5000,
            embed_steps: 2000,
            embed_lr: 1e-3,
            eval_samples: 5000,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "n",
    "d",
    "sigma",
    "batch_size",
    "hops",
    "aiw",
    "mst",
    "steps",
    "lr_g",
    "lr_d",
    "beta1",
    "beta2",
    "logit_clamp",
    "self_normalize",
    "paired_l1",
    "l1_lambda",
    "nonsaturating",
    "seed",
    "checkpoint_every",
    "embed_steps",
    "embed_lr",
    "eval_samples",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Hops actually rolled out: `hops` with MST on, otherwise 1.
    pub fn effective_hops(&self) -> usize {
        if self.mst {
            self.hops
        } else {
            1
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "n" => self.n = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "hops" => self.hops = parse(key, v)?,
            "aiw" => self.aiw = parse_bool(key, v)?,
            "mst" => self.mst = parse_bool(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr_g" => self.lr_g = parse(key, v)?,
            "lr_d" => self.lr_d = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "logit_clamp" => self.logit_clamp = parse(key, v)?,
            "self_normalize" => self.self_normalize = parse_bool(key, v)?,
            "paired_l1" => self.paired_l1 = parse_bool(key, v)?,
            "l1_lambda" => self.l1_lambda = parse(key, v)?,
            "nonsaturating" => self.nonsaturating = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "embed_steps" => self.embed_steps = parse(key, v)?,
            "embed_lr" => self.embed_lr = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_config(e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let val = &v[key];
            let s = match val {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {s}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 1 || self.d < self.n {
            return bad(format!("need d >= n >= 1 (n={}, d={})", self.n, self.d));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(1..=MAX_HOPS).contains(&self.hops) {
            return bad(format!("hops must be in 1..={MAX_HOPS}, got {}", self.hops));
        }
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("logit_clamp", self.logit_clamp),
            ("l1_lambda", self.l1_lambda),
            ("embed_lr", self.embed_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.eval_samples < 1 {
            return bad("eval_samples must be >= 1".into());
        }
        Ok(())
    }

    pub fn aiw_config(&self) -> AiwConfig {
        AiwConfig {
            logit_clamp: self.logit_clamp,
            self_normalize: self.self_normalize,
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Per-step metrics row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: u64,
    #[serde(rename = "L_data")]
    pub l_data: f64,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    pub dl_p: f64,
    pub dl_n: f64,
    pub dl: f64,
    pub scale: f64,
    pub w_min: f64,
    pub w_mean: f64,
    pub w_max: f64,
    pub hop_logits: Vec<f64>,
    #[serde(rename = "L_l1", skip_serializing_if = "Option::is_none")]
    pub l_l1: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub g_skipped: bool,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub d_skipped: bool,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub spec: DomainSpec,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub embedding: Embedding<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    /// Completed steps.
    pub step: u64,
}

const META_STEP: &str = "meta.step";

/// Stores an integer losslessly as four 16-bit chunks.
fn u64_tensor(v: u64) -> Tensor<f32> {
    Tensor::matrix(1, 4, (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect()).expect("shape")
}

fn tensor_u64(t: &Tensor<f32>) -> Result<u64> {
    if t.numel() != 4
        || t.data()
            .iter()
            .any(|&c| !(0.0..65536.0).contains(&c) || c.fract() != 0.0)
    {
        return Err(Error::Checkpoint("malformed integer field".into()));
    }
    Ok(t.data().iter().enumerate().map(|(i, &c)| (c as u64) << (16 * i)).sum())
}

fn save_adam(ckpt: &mut Checkpoint, prefix: &str, adam: &AdamState<f32>) {
    for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        ckpt.push(format!("{prefix}.m.{i}"), m.clone());
        ckpt.push(format!("{prefix}.v.{i}"), v.clone());
    }
    ckpt.push(format!("{prefix}.t"), u64_tensor(adam.t));
}

fn load_adam(ckpt: &Checkpoint, prefix: &str, adam: &mut AdamState<f32>) -> Result<()> {
    for i in 0..adam.m.len() {
        for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let t = ckpt.require(&format!("{prefix}.{kind}.{i}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("{prefix}.{kind}.{i}: shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
    }
    adam.t = tensor_u64(ckpt.require(&format!("{prefix}.t"))?)?;
    Ok(())
}

impl TrainState {
    /// Builds the data model, pretrains and freezes the embedding, and
    /// initialises G and D.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = make_domain_spec(config.n, config.d, config.sigma, config.seed)?;
        let arch = Architecture::default();
        let embedding = pretrain_embedding(
            &spec,
            &arch,
            &PretrainConfig {
                steps: config.embed_steps,
                lr: config.embed_lr,
                batch_size: 64,
                seed: config.seed,
            },
        )?;
        Self::with_embedding(config, spec, embedding)
    }

    /// Like [`TrainState::init`] but around an already trained embedding.
    pub fn with_embedding(config: TrainConfig, spec: DomainSpec, embedding: Embedding<f32>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::default();
        let generator = Generator::new(
            config.d,
            config.n,
            &arch,
            &mut stream_rng(config.seed, Stream::InitGenerator, 0),
        );
        let discriminator = Discriminator::new(
            config.d,
            config.n,
            &arch,
            &mut stream_rng(config.seed, Stream::InitDiscriminator, 0),
        );
        let adam_g = AdamState::new(config.adam(config.lr_g), generator.net.tensors());
        let adam_d = AdamState::new(config.adam(config.lr_d), discriminator.net.tensors());
        Ok(Self {
            config,
            spec,
            generator,
            discriminator,
            embedding,
            adam_g,
            adam_d,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.push(META_STEP, u64_tensor(self.step));
        self.generator.save_into(&mut ckpt, "g");
        self.discriminator.save_into(&mut ckpt, "d");
        self.embedding.save_into(&mut ckpt, "phi");
        save_adam(&mut ckpt, "adam_g", &self.adam_g);
        save_adam(&mut ckpt, "adam_d", &self.adam_d);
        ckpt
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`] under the
    /// same configuration.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let spec = make_domain_spec(config.n, config.d, config.sigma, config.seed)?;
        let arch = Architecture::default();
        let mut embedding = Embedding::new(
            config.d,
            config.n,
            &arch,
            &mut stream_rng(config.seed, Stream::InitEmbedding, 0),
        )?;
        embedding.load_from(ckpt, "phi")?;
        let mut state = Self::with_embedding(config, spec, embedding)?;
        state.generator.load_from(ckpt, "g")?;
        state.discriminator.load_from(ckpt, "d")?;
        load_adam(ckpt, "adam_g", &mut state.adam_g)?;
        load_adam(ckpt, "adam_d", &mut state.adam_d)?;
        state.step = tensor_u64(ckpt.require(META_STEP)?)?;
        Ok(state)
    }
}

/// Per-step random inputs, derived from `(seed, step)` only.
struct StepInputs {
    batch: Batch,
    targets: Vec<AttributeVector>,
    /// `hop_attrs[n - 1]` holds the `n` attribute tensors of the `n`-hop trace.
    hop_attrs: Vec<Vec<Tensor<f32>>>,
}

fn draw_inputs(state: &TrainState) -> Result<StepInputs> {
    let cfg = &state.config;
    let s = state.step;
    let batch = sample_batch(&state.spec, cfg.batch_size, &mut stream_rng(cfg.seed, Stream::Data, s))?;
    let mut rng = stream_rng(cfg.seed, Stream::Targets, s);
    let targets: Vec<AttributeVector> = (0..cfg.batch_size)
        .map(|_| draw_target_attributes(&mut rng, cfg.n))
        .collect();
    let target_t = attribute_tensor(&targets);
    let mut rng = stream_rng(cfg.seed, Stream::Intermediates, s);
    let mut hop_attrs = vec![vec![target_t]];
    for hops in 2..=cfg.effective_hops() {
        let seqs = targets
            .iter()
            .map(|t| draw_intermediate_attributes(&mut rng, cfg.n, hops, t))
            .collect::<Result<Vec<_>>>()?;
        let per_hop = (0..hops)
            .map(|i| attribute_tensor(&seqs.iter().map(|s| s[i].clone()).collect::<Vec<_>>()))
            .collect();
        hop_attrs.push(per_hop);
    }
    Ok(StepInputs {
        batch,
        targets,
        hop_attrs,
    })
}

fn build_traces<T: Scalar>(
    g: &mut Graph<T>,
    gen: &BoundGenerator,
    source: Var,
    hop_attrs: &[Vec<Tensor<T>>],
) -> Result<Vec<HopTrace>> {
    hop_attrs
        .iter()
        .map(|attrs| {
            let vars = attrs
                .iter()
                .map(|a| g.constant(a.clone()))
                .collect::<Result<Vec<_>>>()?;
            rollout(g, gen, source, &vars)
        })
        .collect()
}

/// Everything one loss evaluation consumes besides the parameters.
#[derive(Clone, Debug)]
pub struct LossInputs<T: Scalar> {
    pub features: Tensor<T>,
    pub source_attrs: Tensor<T>,
    /// `hop_attrs[n - 1]` holds the `n` attribute tensors of the `n`-hop trace.
    pub hop_attrs: Vec<Vec<Tensor<T>>>,
    /// `[k, 1]`, treated as constants.
    pub weights: Tensor<T>,
    /// Oracle translations for the paired L1 term.
    pub l1_truth: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub l_data: Var,
    pub l_g: Var,
    pub l1: Option<Var>,
    pub hop_mean_logits: Vec<f64>,
}

/// Forward pass of every loss term for one batch.
pub fn build_losses<T: Scalar>(
    g: &mut Graph<T>,
    gen: &BoundGenerator,
    disc: &BoundDiscriminator,
    inputs: &LossInputs<T>,
    objective: GeneratorObjective,
) -> Result<LossParts> {
    let x = g.constant(inputs.features.clone())?;
    let a_s = g.constant(inputs.source_attrs.clone())?;
    let traces = build_traces(g, gen, x, &inputs.hop_attrs)?;
    let l_data = data_loss(g, disc, x, a_s)?;
    let w = g.constant(inputs.weights.clone())?;
    let mst = mst_generator_loss(g, disc, &traces, w, objective)?;
    let l1 = match &inputs.l1_truth {
        Some(truth) => {
            let truth = g.constant(truth.clone())?;
            let diff = g.sub(traces[0].last(), truth)?;
            let abs = g.abs(diff)?;
            Some(g.mean(abs)?)
        }
        None => None,
    };
    Ok(LossParts {
        l_data,
        l_g: mst.loss,
        l1,
        hop_mean_logits: mst.hop_mean_logits,
    })
}

/// What G minimizes: `L_g (+ lambda L1)`. `L_data` does not depend on G.
pub fn generator_objective<T: Scalar>(g: &mut Graph<T>, parts: &LossParts, l1_lambda: f64) -> Result<Var> {
    match parts.l1 {
        Some(l1) => {
            let scaled = g.scale(l1, T::lit(l1_lambda))?;
            g.add(parts.l_g, scaled)
        }
        None => Ok(parts.l_g),
    }
}

/// What D minimizes: `-(L_data + L_g)`.
pub fn discriminator_objective<T: Scalar>(g: &mut Graph<T>, parts: &LossParts) -> Result<Var> {
    let total = g.add(parts.l_data, parts.l_g)?;
    g.neg(total)
}

fn finite(step: u64, what: &str, v: f32) -> Result<f64> {
    if v.is_finite() {
        Ok(v as f64)
    } else {
        Err(Error::Divergence {
            step,
            reason: format!("{what} is {v}"),
            last_checkpoint: None,
        })
    }
}

fn divergence(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            reason: format!("non-finite value in {op}"),
            last_checkpoint: None,
        },
        other => other,
    }
}

/// Importance weights for the batch, from the 1-hop outputs at the current
/// parameters. With AIW off the weights are all 1 but the statistics are
/// still reported.
pub fn step_weights(
    state: &TrainState,
    source: &Tensor<f32>,
    one_hop: &Tensor<f32>,
    targets: &Tensor<f32>,
) -> Result<WeightReport> {
    let e_src = state.embedding.embed(source)?;
    let e_gen = state.embedding.embed(one_hop)?;
    let stats = distance_stats(&e_src, &e_gen, state.embedding.radius())?;
    let logits: Vec<f64> = state
        .discriminator
        .logits(one_hop, targets)?
        .into_iter()
        .map(|v| v as f64)
        .collect();
    let mut report = aiw_weights(&logits, stats, &state.config.aiw_config())?;
    if !state.config.aiw {
        report.weights.iter_mut().for_each(|w| *w = 1.0);
        report.normalization = None;
    }
    Ok(report)
}

/// One G update followed by one D update.
pub fn train_step(state: &mut TrainState) -> Result<StepDiagnostics> {
    let step = state.step;
    train_step_inner(state).map_err(|e| divergence(step, e))
}

fn train_step_inner(state: &mut TrainState) -> Result<StepDiagnostics> {
    let step = state.step;
    let drawn = draw_inputs(state)?;
    let cfg = state.config.clone();
    let objective = if cfg.nonsaturating {
        GeneratorObjective::NonSaturating
    } else {
        GeneratorObjective::Minimax
    };
    let targets = &drawn.hop_attrs[0][0];
    let one_hop = state.generator.apply(&drawn.batch.features, targets)?;
    let report = step_weights(state, &drawn.batch.features, &one_hop, targets)?;
    let l1_truth = if cfg.paired_l1 {
        let rows = drawn
            .batch
            .features
            .rows_f64()
            .iter()
            .zip(&drawn.batch.attributes)
            .zip(&drawn.targets)
            .map(|((x, s), t)| oracle_translate(&state.spec, x, s, t))
            .collect::<Result<Vec<_>>>()?;
        let truth: Vec<f32> = rows.into_iter().flatten().map(|v| v as f32).collect();
        Some(Tensor::matrix(cfg.batch_size, cfg.d, truth)?)
    } else {
        None
    };
    let inputs = LossInputs {
        source_attrs: drawn.batch.attribute_tensor(),
        features: drawn.batch.features,
        hop_attrs: drawn.hop_attrs,
        weights: report.column::<f32>(),
        l1_truth,
    };

    // Generator step.
    let mut g = Graph::<f32>::new();
    let bg = state.generator.bind(&mut g, true)?;
    let bd = state.discriminator.bind(&mut g, false)?;
    let parts = build_losses(&mut g, &bg, &bd, &inputs, objective)?;
    let l_data = finite(step, "L_data", g.scalar(parts.l_data).unwrap_or(f32::NAN))?;
    let l_g = finite(step, "L_g", g.scalar(parts.l_g).unwrap_or(f32::NAN))?;
    let l_l1 = match parts.l1 {
        Some(v) => Some(finite(step, "L1", g.scalar(v).unwrap_or(f32::NAN))?),
        None => None,
    };
    let g_loss = generator_objective(&mut g, &parts, cfg.l1_lambda)?;
    let mut grads = g.backward(g_loss)?;
    let grads = grads.collect(&g, bg.net.vars());
    let g_skipped = state.adam_g.step(&mut state.generator.net.tensors_mut(), &grads)? == StepOutcome::Skipped;
    drop(g);

    // Discriminator step on a fresh forward through the updated G, same
    // attributes and weights.
    let mut g = Graph::<f32>::new();
    let bg = state.generator.bind(&mut g, false)?;
    let bd = state.discriminator.bind(&mut g, true)?;
    let parts_d = build_losses(&mut g, &bg, &bd, &inputs, GeneratorObjective::Minimax)?;
    let d_loss = discriminator_objective(&mut g, &parts_d)?;
    finite(step, "discriminator loss", g.scalar(d_loss).unwrap_or(f32::NAN))?;
    let mut grads = g.backward(d_loss)?;
    let grads = grads.collect(&g, bd.net.vars());
    let d_skipped = state.adam_d.step(&mut state.discriminator.net.tensors_mut(), &grads)? == StepOutcome::Skipped;

    state.step += 1;
    Ok(StepDiagnostics {
        step: state.step,
        l_data,
        l_g,
        dl_p: report.stats.dl_p,
        dl_n: report.stats.dl_n,
        dl: report.stats.dl,
        scale: report.scale,
        w_min: report.min(),
        w_mean: report.mean(),
        w_max: report.max(),
        hop_logits: parts.hop_mean_logits,
        l_l1,
        g_skipped,
        d_skipped,
    })
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step}.ckpt"))
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepDiagnostics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `state` up to `config.steps`. With `out` set, writes
/// `metrics.jsonl` (appending when resuming) and `step_<k>.ckpt` files.
pub fn run(mut state: TrainState, out: Option<&Path>) -> Result<TrainOutcome> {
    let total = state.config.steps;
    let every = state.config.checkpoint_every;
    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let mut history = Vec::with_capacity((total.saturating_sub(state.step)) as usize);
    let mut checkpoints = Vec::new();
    while state.step < total {
        let diag = match train_step(&mut state) {
            Ok(d) => d,
            Err(Error::Divergence { step, reason, .. }) => {
                if let Some((_, w)) = metrics.as_mut() {
                    let _ = w.flush();
                }
                return Err(Error::Divergence {
                    step,
                    reason,
                    last_checkpoint: checkpoints.last().cloned(),
                });
            }
            Err(e) => return Err(e),
        };
        if let Some((path, w)) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &diag)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if diag.step % 1000 == 0 {
            log::info!(
                "step {}: L_data {:.4} L_g {:.4} dl {:.3} w [{:.3}, {:.3}]",
                diag.step,
                diag.l_data,
                diag.l_g,
                diag.dl,
                diag.w_min,
                diag.w_max
            );
        }
        history.push(diag);
        if let Some(dir) = out {
            let s = state.step;
            if s == total || (every > 0 && s.is_multiple_of(every)) {
                let path = checkpoint_path(dir, s);
                state.to_checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some((path, mut w)) = metrics {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        state,
        history,
        checkpoints,
    })
}

pub fn train(config: TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    run(TrainState::init(config)?, out)
}

/// Continues from a saved checkpoint to `config.steps`.
pub fn resume(config: TrainConfig, checkpoint: &Path, out: Option<&Path>) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    run(TrainState::from_checkpoint(config, &ckpt)?, out)
}

/// Writes the resolved config as `config.cfg` in `dir`.
pub fn write_resolved_config(config: &TrainConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.cfg");
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(config.to_text().as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
