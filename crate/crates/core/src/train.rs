//! Training loop, evaluation, checkpoints and routing export.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::KeyValues;
use crate::data::{self, NliExample, SyntheticSpec};
use crate::encoder::{self, SentencePair};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::model::{Model, ModelConfig, Variant};
use crate::objective::{LossBreakdown, MarginMode, ObjectiveConfig};
use crate::params::{ParamGrads, ParamStore};
use crate::rng::RngStream;
use crate::routing::{RoutingTrace, RoutingVariant};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// What the lr schedule compares the current dev loss against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateauReference {
    /// Lowest dev loss seen so far.
    Best,
    /// Dev loss of the previous epoch.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub d_high: usize,
    pub iterations: usize,
    pub orphan: bool,
    pub dropout: f64,
    pub objective: ObjectiveConfig,
    pub lr: f64,
    pub lr_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    pub plateau_reference: PlateauReference,
    pub l2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once training accuracy reaches this value (checked each epoch).
    pub target_train_accuracy: Option<f64>,
    /// Evaluate the training set after every epoch.
    pub eval_train: bool,
    pub seed: u64,
    pub min_count: usize,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    /// Used when no `train_path` is given.
    pub synthetic: SyntheticSpec,
    /// Share of the synthetic corpus held out as the dev split.
    pub dev_fraction: f64,
    pub embeddings_path: Option<PathBuf>,
    pub freeze_embeddings: bool,
    /// Directory for `steps.csv`, `epochs.csv` and `model.ckpt`.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small dimensions and synthetic data; finishes in minutes on one core.
    pub fn desk() -> Self {
        TrainConfig {
            variant: Variant::Vanilla,
            embedding_dim: 32,
            hidden: 32,
            d_high: 16,
            iterations: 3,
            orphan: false,
            dropout: 0.1,
            // With differentiable norm weights every capsule norm collapses
            // to zero at this scale.
            objective: ObjectiveConfig {
                detach_norms: true,
                ..ObjectiveConfig::default()
            },
            lr: 2e-3,
            lr_patience: 3,
            lr_decay: 0.5,
            min_lr: 1e-5,
            plateau_reference: PlateauReference::Best,
            l2: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 20,
            target_train_accuracy: None,
            eval_train: true,
            seed: 7,
            min_count: 1,
            train_path: None,
            dev_path: None,
            synthetic: SyntheticSpec {
                examples: 600,
                ..SyntheticSpec::default()
            },
            dev_fraction: 0.2,
            embeddings_path: None,
            freeze_embeddings: false,
            out_dir: None,
        }
    }

    /// Optimization recipe and sizes of the original full-scale setup.
    pub fn full() -> Self {
        TrainConfig {
            embedding_dim: 300,
            hidden: 300,
            d_high: 300,
            dropout: 0.4,
            objective: ObjectiveConfig::default(),
            lr: 2e-4,
            batch_size: 32,
            max_epochs: 30,
            eval_train: false,
            ..TrainConfig::desk()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            vocab_size,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden,
            d_high: self.d_high,
            iterations: self.iterations,
            orphan: self.orphan,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.objective.validate()?;
        if !(self.lr > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.lr {
            return bad(format!("need 0 < min_lr <= lr (lr={}, min_lr={})", self.lr, self.min_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay must be in (0, 1), got {}", self.lr_decay));
        }
        if self.lr_patience == 0 {
            return bad("lr_patience must be at least 1".into());
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 must be non-negative, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(1..=5).contains(&self.iterations) {
            return bad(format!("routing iterations must be in 1..=5, got {}", self.iterations));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad(format!("dev_fraction must be in [0, 1), got {}", self.dev_fraction));
        }
        if self.dev_path.is_some() && self.train_path.is_none() {
            return bad("dev_path given without train_path".into());
        }
        self.model_config(3).validate()
    }

    /// Reads a `key = value` file. A `profile` key (desk or full) picks the
    /// starting point; other keys override it. `MPI_SEED` overrides `seed`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        let mut cfg = Self::from_key_values(&kv)?;
        if let Some(parent) = path.parent() {
            for p in [&mut cfg.train_path, &mut cfg.dev_path, &mut cfg.embeddings_path, &mut cfg.out_dir]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = parent.join(&*p);
                }
            }
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = match kv.entries.iter().rev().find(|e| e.key == "profile") {
            None => TrainConfig::desk(),
            Some(e) => match e.value.as_str() {
                "desk" => TrainConfig::desk(),
                "full" => TrainConfig::full(),
                other => return Err(kv.error(e, format!("unknown profile `{other}` (desk or full)"))),
            },
        };
        let opt_path = |v: &str| (!v.is_empty() && v != "none").then(|| PathBuf::from(v));
        for e in &kv.entries {
            let o = &mut cfg.objective;
            match e.key.as_str() {
                "profile" => {}
                "variant" => cfg.variant = kv.value(e)?,
                "embedding_dim" => cfg.embedding_dim = kv.value(e)?,
                "hidden" => cfg.hidden = kv.value(e)?,
                "d_high" => cfg.d_high = kv.value(e)?,
                "iterations" => cfg.iterations = kv.value(e)?,
                "orphan" => cfg.orphan = kv.value(e)?,
                "dropout" => cfg.dropout = kv.value(e)?,
                "beta" => o.beta = kv.value(e)?,
                "m_plus" => o.m_plus = kv.value(e)?,
                "m_minus" => o.m_minus = kv.value(e)?,
                "lambda" => o.lambda = kv.value(e)?,
                "margin_mode" => {
                    o.margin_mode = match e.value.as_str() {
                        "gold" | "gold_present" => MarginMode::GoldPresent,
                        "all" | "all_present" => MarginMode::AllPresent,
                        other => return Err(kv.error(e, format!("unknown margin_mode `{other}`"))),
                    }
                }
                "use_ce" => o.use_ce = kv.value(e)?,
                "use_margin" => o.use_margin = kv.value(e)?,
                "detach_norms" => o.detach_norms = kv.value(e)?,
                "lr" => cfg.lr = kv.value(e)?,
                "lr_patience" => cfg.lr_patience = kv.value(e)?,
                "lr_decay" => cfg.lr_decay = kv.value(e)?,
                "min_lr" => cfg.min_lr = kv.value(e)?,
                "plateau_reference" => {
                    cfg.plateau_reference = match e.value.as_str() {
                        "best" => PlateauReference::Best,
                        "previous" => PlateauReference::Previous,
                        other => return Err(kv.error(e, format!("unknown plateau_reference `{other}`"))),
                    }
                }
                "l2" => cfg.l2 = kv.value(e)?,
                "adam_beta1" => cfg.adam_beta1 = kv.value(e)?,
                "adam_beta2" => cfg.adam_beta2 = kv.value(e)?,
                "adam_eps" => cfg.adam_eps = kv.value(e)?,
                "batch_size" => cfg.batch_size = kv.value(e)?,
                "max_epochs" => cfg.max_epochs = kv.value(e)?,
                "target_train_accuracy" => cfg.target_train_accuracy = Some(kv.value(e)?),
                "eval_train" => cfg.eval_train = kv.value(e)?,
                "seed" => cfg.seed = kv.value(e)?,
                "min_count" => cfg.min_count = kv.value(e)?,
                "train_path" => cfg.train_path = opt_path(&e.value),
                "dev_path" => cfg.dev_path = opt_path(&e.value),
                "dev_fraction" => cfg.dev_fraction = kv.value(e)?,
                "embeddings_path" => cfg.embeddings_path = opt_path(&e.value),
                "freeze_embeddings" => cfg.freeze_embeddings = kv.value(e)?,
                "out_dir" => cfg.out_dir = opt_path(&e.value),
                k if k.starts_with("synth.") => {}
                _ => return Err(kv.error(e, format!("unknown key `{}`", e.key))),
            }
        }
        cfg.synthetic.apply(kv, "synth.")?;
        Ok(cfg)
    }

    /// Applies the `MPI_SEED` environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("MPI_SEED") {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("MPI_SEED must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }
}

/// Examples with their index encodings under one vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<NliExample>,
    pub pairs: Vec<SentencePair>,
}

impl Dataset {
    pub fn new(examples: Vec<NliExample>, vocab: &Vocabulary) -> Result<Self> {
        let pairs = examples.iter().map(|e| e.encode(vocab)).collect::<Result<_>>()?;
        Ok(Dataset { examples, pairs })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.examples.iter().map(|e| e.label)
    }
}

/// Adam with L2 regularization added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub t: u64,
    m: ParamGrads,
    v: ParamGrads,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, l2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            l2,
            t: 0,
            m: ParamGrads::zeros_like(store),
            v: ParamGrads::zeros_like(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let w = store.get_mut(id).value.data_mut();
            for k in 0..w.len() {
                let gk = g[k] + self.l2 * w[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Halves the learning rate after `patience` epochs without dev-loss
/// improvement, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub min_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub reference: PlateauReference,
    best: Option<f64>,
    previous: Option<f64>,
    stale: usize,
}

impl LrSchedule {
    pub fn new(lr: f64, min_lr: f64, factor: f64, patience: usize, reference: PlateauReference) -> Self {
        LrSchedule {
            lr,
            min_lr,
            factor,
            patience,
            reference,
            best: None,
            previous: None,
            stale: 0,
        }
    }

    /// Records one epoch's dev loss and returns the rate for the next epoch.
    pub fn observe(&mut self, dev_loss: f64) -> f64 {
        let anchor = match self.reference {
            PlateauReference::Best => self.best,
            PlateauReference::Previous => self.previous,
        };
        match anchor {
            Some(a) if dev_loss >= a => self.stale += 1,
            _ => self.stale = 0,
        }
        self.best = Some(self.best.map_or(dev_loss, |b| b.min(dev_loss)));
        self.previous = Some(dev_loss);
        if self.stale >= self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.stale = 0;
        }
        self.lr
    }
}

/// Evaluation-mode metrics over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub examples: usize,
    pub accuracy: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; 3]; 3],
    /// Fraction of (example, perspective) pairs whose own head predicts the
    /// perspective's label; `None` for the baseline.
    pub aux_accuracy: Option<f64>,
    /// Mean training objective (dropout off).
    pub loss: LossBreakdown,
    pub predictions: Vec<Label>,
}

pub fn evaluate(model: &Model, data: &Dataset, obj: &ObjectiveConfig) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let n = data.len();
    let mut confusion = [[0usize; 3]; 3];
    let mut aux_hits = 0usize;
    let mut loss = LossBreakdown::default();
    let mut predictions = Vec::with_capacity(n);
    for (pair, gold) in data.pairs.iter().zip(data.labels()) {
        let g = Graph::new();
        let scored = model.score(&g, &model.params, pair, gold, obj)?;
        let pred = Label::from_index(scored.forward.logits.value().argmax()).expect("three logits");
        confusion[gold.index()][pred.index()] += 1;
        predictions.push(pred);
        loss.accumulate(&scored.breakdown, n);
        if let (Some(routed), Some(head)) = (&scored.forward.routed, model.prediction_head()) {
            aux_hits += crate::objective::aux_correct(&g, &model.params, &routed.perspectives, head)?;
        }
    }
    let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        examples: n,
        accuracy: correct as f64 / n as f64,
        confusion,
        aux_accuracy: model.router().map(|_| aux_hits as f64 / (3 * n) as f64),
        loss,
        predictions,
    })
}

/// Model weights together with everything needed to reuse them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    /// Dev accuracy at `epoch`.
    pub best_metric: f64,
    pub model: Model,
}

const MAGIC: &[u8; 8] = b"MPINLI\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: TrainConfig,
    vocab: Vocabulary,
    epoch: usize,
    best_metric: f64,
    parameters: Vec<String>,
}

/// Path of the JSON metadata written next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes the binary weights to `path` and the metadata to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.model.params.len() as u64).to_le_bytes());
        for (_, p) in self.model.params.iter() {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(p.trainable as u8);
            buf.extend_from_slice(&(p.value.shape().len() as u64).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
        let side = Sidecar {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            best_metric: self.best_metric,
            parameters: self.model.params.iter().map(|(_, p)| p.name.clone()).collect(),
        };
        let sp = sidecar_path(path);
        let file = std::fs::File::create(&sp).map_err(|e| Error::io(&sp, e))?;
        serde_json::to_writer_pretty(file, &side)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sp = sidecar_path(path);
        let side: Sidecar = serde_json::from_reader(std::fs::File::open(&sp).map_err(|e| Error::io(&sp, e))?)?;
        if side.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "metadata version {} is not supported (expected {CHECKPOINT_VERSION})",
                side.format_version
            )));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut model = Model::new(side.config.model_config(side.vocab.len()), side.config.seed)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("binary version {version} is not supported")));
        }
        let count = r.u64()? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} parameters, model expects {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let id = model
                .params
                .id(&name)
                .map_err(|_| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if model.params.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {shape:?}, model expects {:?}",
                    model.params.value(id).shape()
                )));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            model.params.get_mut(id).value = Tensor::new(shape, data)?;
            model.params.set_trainable(id, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last parameter".into()));
        }
        Ok(Checkpoint {
            config: side.config,
            vocab: side.vocab,
            epoch: side.epoch,
            best_metric: side.best_metric,
            model,
        })
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
            .ok_or_else(|| Error::Checkpoint("checkpoint file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub main: f64,
    pub aux_ce: f64,
    pub aux_margin: f64,
    pub total: f64,
    pub norm_en: f64,
    pub norm_ne: f64,
    pub norm_con: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub main: f64,
    pub aux_ce: f64,
    pub aux_margin: f64,
    pub total: f64,
    pub norm_en: f64,
    pub norm_ne: f64,
    pub norm_con: f64,
    pub train_accuracy: Option<f64>,
    pub dev_loss: Option<f64>,
    pub dev_accuracy: Option<f64>,
    pub dev_aux_accuracy: Option<f64>,
}

/// Outcome of [`train`]: the best-dev checkpoint, the final weights and logs.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn step_record(epoch: usize, step: usize, lr: f64, b: &LossBreakdown) -> StepRecord {
    StepRecord {
        epoch,
        step,
        lr,
        main: b.main,
        aux_ce: b.aux_ce,
        aux_margin: b.aux_margin,
        total: b.total,
        norm_en: b.norms[0],
        norm_ne: b.norms[1],
        norm_con: b.norms[2],
    }
}

/// Loads or generates the corpus described by `cfg` and returns
/// `(vocab, train, dev)`. The vocabulary is built from the training split.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Vocabulary, Vec<NliExample>, Vec<NliExample>)> {
    let (train, dev) = match &cfg.train_path {
        Some(p) => {
            let train = data::load_jsonl(p)?.examples;
            let dev = match &cfg.dev_path {
                Some(d) => data::load_jsonl(d)?.examples,
                None => Vec::new(),
            };
            (train, dev)
        }
        None => {
            let mut all = data::gen_synthetic(&cfg.synthetic)?;
            let n_dev = (all.len() as f64 * cfg.dev_fraction).round() as usize;
            let dev = all.split_off(all.len() - n_dev);
            (all, dev)
        }
    };
    let vocab = data::build_vocab(&train, cfg.min_count)?;
    Ok((vocab, train, dev))
}

/// Full pipeline: data, training, and (with `out_dir`) logs and checkpoint.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let (vocab, train_ex, dev_ex) = prepare_data(cfg)?;
    let run = train_on(cfg, vocab, train_ex, dev_ex)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_logs(dir, &run)?;
        run.best.save(&dir.join("model.ckpt"))?;
    }
    Ok(run)
}

pub fn write_logs(dir: &Path, run: &TrainRun) -> Result<()> {
    let create = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p).map_err(|e| Error::io(&p, e))
    };
    data::write_csv(create("steps.csv")?, &run.steps)?;
    data::write_csv(create("epochs.csv")?, &run.epochs)
}

/// Trains on pre-split examples. When `dev` is empty the training set
/// doubles as the dev set for scheduling and model selection.
pub fn train_on(cfg: &TrainConfig, vocab: Vocabulary, train: Vec<NliExample>, dev: Vec<NliExample>) -> Result<TrainRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let train = Dataset::new(train, &vocab)?;
    let dev = if dev.is_empty() { None } else { Some(Dataset::new(dev, &vocab)?) };

    let mut model = Model::new(cfg.model_config(vocab.len()), cfg.seed)?;
    if let Some(p) = &cfg.embeddings_path {
        encoder::load_pretrained(p, &vocab, &mut model.params, model.encoder.embedding, cfg.freeze_embeddings)?;
    }
    let obj = &cfg.objective;
    let root = RngStream::new(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.l2);
    let mut schedule = LrSchedule::new(cfg.lr, cfg.min_lr, cfg.lr_decay, cfg.lr_patience, cfg.plateau_reference);
    let snapshot = |model: &Model, epoch: usize, metric: f64| Checkpoint {
        config: cfg.clone(),
        vocab: vocab.clone(),
        epoch,
        best_metric: metric,
        model: model.clone(),
    };
    let mut best = snapshot(&model, 0, f64::NEG_INFINITY);
    let mut best_loss = f64::INFINITY;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut grads = ParamGrads::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr;
        root.fork(1).fork(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            global_step += 1;
            grads.scale(0.0);
            let mut batch_loss = LossBreakdown::default();
            for (k, &i) in batch.iter().enumerate() {
                let rng = root.fork(2).fork(global_step as u64).fork(k as u64);
                let g = Graph::training(rng);
                let diverged = |reason: String| Error::Diverged {
                    epoch,
                    step: global_step,
                    reason,
                    last_good: Box::new(best.clone()),
                };
                let scored = match model.score(&g, &model.params, &train.pairs[i], train.examples[i].label, obj) {
                    Ok(s) => s,
                    Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in `{op}`"))),
                    Err(e) => return Err(e),
                };
                if !scored.breakdown.is_finite() {
                    return Err(diverged("non-finite loss".into()));
                }
                batch_loss.accumulate(&scored.breakdown, batch.len());
                g.backward(scored.loss)?
                    .accumulate_params(&model.params, &mut grads, 1.0 / batch.len() as f64);
            }
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: global_step,
                    reason: "non-finite gradient".into(),
                    last_good: Box::new(best.clone()),
                });
            }
            adam.step(&mut model.params, &grads, lr);
            epoch_loss.accumulate(&batch_loss, order.len().div_ceil(cfg.batch_size));
            steps.push(step_record(epoch, b + 1, lr, &batch_loss));
        }

        let train_eval = if cfg.eval_train || cfg.target_train_accuracy.is_some() {
            Some(evaluate(&model, &train, obj)?)
        } else {
            None
        };
        let dev_eval = match &dev {
            Some(d) => Some(evaluate(&model, d, obj)?),
            None => None,
        };
        let select = dev_eval.as_ref().or(train_eval.as_ref());
        let rec = step_record(epoch, 0, lr, &epoch_loss);
        epochs.push(EpochRecord {
            epoch,
            lr,
            main: rec.main,
            aux_ce: rec.aux_ce,
            aux_margin: rec.aux_margin,
            total: rec.total,
            norm_en: rec.norm_en,
            norm_ne: rec.norm_ne,
            norm_con: rec.norm_con,
            train_accuracy: train_eval.as_ref().map(|e| e.accuracy),
            dev_loss: dev_eval.as_ref().map(|e| e.loss.total),
            dev_accuracy: dev_eval.as_ref().map(|e| e.accuracy),
            dev_aux_accuracy: dev_eval.as_ref().and_then(|e| e.aux_accuracy),
        });

        let (metric, sched_loss) = match select {
            Some(e) => (e.accuracy, e.loss.total),
            None => (-epoch_loss.total, epoch_loss.total),
        };
        if metric > best.best_metric || (metric == best.best_metric && sched_loss < best_loss) {
            best = snapshot(&model, epoch, metric);
            best_loss = sched_loss;
        }
        schedule.observe(sched_loss);
        if let (Some(target), Some(e)) = (cfg.target_train_accuracy, &train_eval) {
            if e.accuracy >= target {
                break;
            }
        }
    }
    let last_epoch = epochs.last().map_or(0, |e| e.epoch);
    let last_metric = epochs
        .last()
        .and_then(|e| e.dev_accuracy.or(e.train_accuracy))
        .unwrap_or(f64::NAN);
    Ok(TrainRun {
        last: snapshot(&model, last_epoch, last_metric),
        best,
        steps,
        epochs,
    })
}

/// Routing record for one sentence pair, ready for heat-map rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingExport {
    pub variant: RoutingVariant,
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub prediction: Label,
    pub probabilities: Vec<f64>,
    pub traces: Vec<RoutingTrace>,
}

pub fn export_routing(ckpt: &Checkpoint, premise: &[String], hypothesis: &[String]) -> Result<RoutingExport> {
    let model = &ckpt.model;
    let variant = model.config.variant.routing().ok_or(Error::NoRouting)?;
    let pair = SentencePair::new(ckpt.vocab.encode(premise), ckpt.vocab.encode(hypothesis), ckpt.vocab.len())?;
    let g = Graph::new();
    let f = model.forward(&g, &pair)?;
    let probs = f.logits.value().softmax(1)?;
    let mut traces = f.routed.ok_or(Error::NoRouting)?.traces;
    for t in &mut traces {
        t.tokens = if t.side == "premise" { premise.to_vec() } else { hypothesis.to_vec() };
    }
    Ok(RoutingExport {
        variant,
        premise: premise.to_vec(),
        hypothesis: hypothesis.to_vec(),
        prediction: Label::from_index(probs.argmax()).expect("three logits"),
        probabilities: probs.data().to_vec(),
        traces,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    writeln!(file).map_err(|e| Error::io(path, e))
}
