//! Adam, the warmup schedule, the adversarial training step, target
//! fine-tuning, evaluation and the four adaptation protocols.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibration_report, PredictionSet};
use crate::caption_metrics::{score_corpus, ScoreReport};
use crate::data::{caption_words, select_adaptation_set, AdaptMode, Sample};
use crate::decoding::{generate, Generated};
use crate::domain_head::{domain_logits, DomainHeadConfig, SOURCE_DOMAIN, TARGET_DOMAIN};
use crate::error::{Error, Result};
use crate::losses::{caption_loss_scaled, ce_ls, total_loss, LossBreakdown};
use crate::model::{decode, encode, encoder_summary, Dropout, ModelConfig, ModelParams};
use crate::params::{Checkpoint, ParamStore};
use crate::tensor::{Tape, Var};
use crate::text::{normalize_tokenize, Vocab, PAD_ID};

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for ((w, (mi, vi)), gi) in store.data_mut(id).iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SourceOnly,
    Adversarial,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::SourceOnly => "source_only",
            TrainMode::Adversarial => "adversarial",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" | "source-only" => Ok(TrainMode::SourceOnly),
            "adversarial" => Ok(TrainMode::Adversarial),
            other => Err(Error::invalid(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_memory_slots: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_caption_len: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub use_ls: bool,
    pub use_grl: bool,
    pub grl_lambda: f64,
    pub n_domain_classes: usize,
    pub mode: TrainMode,
    pub adapt: AdaptMode,
    /// Keep the domain losses on while fine-tuning on target captions.
    pub finetune_domain_loss: bool,
    pub beam_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 3,
            n_memory_slots: 8,
            d_ff: 256,
            dropout: 0.1,
            max_caption_len: 16,
            epochs: 50,
            finetune_epochs: 10,
            batch_size: 8,
            warmup: 200,
            lr_factor: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            seed: 1,
            epsilon: 0.1,
            use_ls: true,
            use_grl: true,
            grl_lambda: 1.0,
            n_domain_classes: 3,
            mode: TrainMode::Adversarial,
            adapt: AdaptMode::Uda,
            finetune_domain_loss: false,
            beam_size: 5,
        }
    }

    /// Full-size schedule: 50 epochs, batch 50, 10000 warmup steps, with a
    /// 512-wide, 8-head model and 40 memory slots.
    pub fn paper_scale() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_memory_slots: 40,
            d_ff: 2048,
            batch_size: 50,
            warmup: 10000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.warmup == 0 || self.beam_size == 0 {
            return Err(Error::invalid("epochs, batch_size, warmup and beam_size must be positive"));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::invalid("lr_factor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        self.model_config(1, 4).validate()?;
        self.head_config().validate()
    }

    /// Caption smoothing actually applied.
    pub fn effective_epsilon(&self) -> f64 {
        if self.use_ls {
            self.epsilon
        } else {
            0.0
        }
    }

    /// Whether the domain head and the target forward pass are part of a step.
    pub fn domain_loss_active(&self) -> bool {
        self.mode == TrainMode::Adversarial && self.use_grl
    }

    pub fn model_config(&self, feature_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            n_memory_slots: self.n_memory_slots,
            d_ff: self.d_ff,
            feature_dim,
            max_caption_len: self.max_caption_len,
            vocab_size,
            dropout: self.dropout,
            ln_eps: 1e-5,
        }
    }

    pub fn head_config(&self) -> DomainHeadConfig {
        DomainHeadConfig {
            input_dim: self.d_model,
            hidden: [64, 32],
            n_classes: self.n_domain_classes,
            grl_lambda: self.grl_lambda,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
        }
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_memory_slots" => self.n_memory_slots = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "max_caption_len" => self.max_caption_len = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "use_ls" => self.use_ls = parse(key, value)?,
            "use_grl" => self.use_grl = parse(key, value)?,
            "grl_lambda" => self.grl_lambda = parse(key, value)?,
            "n_domain_classes" => self.n_domain_classes = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "adapt" => self.adapt = value.parse()?,
            "finetune_domain_loss" => self.finetune_domain_loss = parse(key, value)?,
            "beam_size" => self.beam_size = parse(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_kv_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (key, value, line) in parse_kv(&text).map_err(|(line, message)| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        })? {
            self.set(&key, &value).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// `(key, value, line)` triples from `key = value` text.
pub fn parse_kv(text: &str) -> std::result::Result<Vec<(String, String, usize)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| (i + 1, format!("expected key=value, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// One JSON-lines training log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_y")]
    pub caption: f64,
    #[serde(rename = "L_S")]
    pub source_domain: f64,
    #[serde(rename = "L_T")]
    pub target_domain: f64,
}

/// Teacher-forcing inputs and targets: `bos w1..wn` predicts `w1..wn eos`.
pub fn caption_io(vocab: &Vocab, caption: &str, max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let words = normalize_tokenize(caption);
    let mut ids = vocab.encode(&words, max_len)?;
    ids.truncate(words.len() + 2);
    Ok((ids[..ids.len() - 1].to_vec(), ids[1..].to_vec()))
}

/// Owns the parameters and optimiser state for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
    pub history: Vec<StepLog>,
    adam: Adam,
    step: usize,
    dropout_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocab, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::new(cfg.model_config(feature_dim, vocab.len()), cfg.head_config(), &mut init_rng)?;
        Ok(Self::from_params(cfg, vocab, params))
    }

    pub fn from_params(cfg: TrainConfig, vocab: Vocab, params: ModelParams) -> Self {
        let adam = Adam::new(&params.store, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(1);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(2);
        Self {
            cfg,
            params,
            vocab,
            history: Vec::new(),
            adam,
            step: 0,
            dropout_rng,
            shuffle_rng,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Continues the learning-rate schedule from `step` after a restart.
    /// Optimiser moments start from zero.
    pub fn resume_at(&mut self, step: usize) {
        self.step = step;
    }

    /// Builds the loss for one step on a fresh tape. Returns the tape, the
    /// parameter bindings, the loss node and its breakdown.
    fn forward(
        &mut self,
        captioned: &[&Sample],
        unlabeled: &[&Sample],
        with_domain: bool,
    ) -> Result<(Tape, crate::params::Bindings, Var, LossBreakdown)> {
        if captioned.is_empty() {
            return Err(Error::invalid("train_step needs at least one captioned sample"));
        }
        let params = &self.params;
        let eps = self.cfg.effective_epsilon();
        let max_len = params.config.max_caption_len;
        let ios = captioned
            .iter()
            .map(|s| {
                let c = s
                    .caption
                    .as_deref()
                    .ok_or_else(|| Error::invalid(format!("sample {} has no caption", s.id)))?;
                caption_io(&self.vocab, c, max_len)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_tokens: usize = ios.iter().map(|(_, t)| t.iter().filter(|&&x| x != PAD_ID).count()).sum();

        let mut tape = Tape::new();
        let b = params.store.bind(&mut tape)?;
        let mut drop = Dropout::train(params.config.dropout, &mut self.dropout_rng);
        let mut caption: Option<Var> = None;
        let mut summaries: Vec<(Var, usize)> = Vec::new();
        for (s, (inputs, targets)) in captioned.iter().zip(&ios) {
            let x = tape.leaf_rows(&s.regions)?;
            let enc = encode(&mut tape, &b, params, x, &mut drop)?;
            let logits = decode(&mut tape, &b, params, inputs, &enc, &mut drop)?;
            let (l, _) = caption_loss_scaled(&mut tape, logits, targets, eps, PAD_ID, 1.0 / n_tokens as f64)?;
            caption = Some(match caption {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
            if with_domain {
                summaries.push((encoder_summary(&mut tape, &enc)?, s.domain));
            }
        }
        if with_domain {
            for s in unlabeled {
                let x = tape.leaf_rows(&s.regions)?;
                let enc = encode(&mut tape, &b, params, x, &mut drop)?;
                summaries.push((encoder_summary(&mut tape, &enc)?, s.domain));
            }
        }
        let caption = caption.expect("captioned is non-empty");

        let (source, target) = if with_domain {
            let mut terms = [None, None];
            for (label, slot) in [SOURCE_DOMAIN, TARGET_DOMAIN].into_iter().zip(terms.iter_mut()) {
                let group: Vec<Var> = summaries.iter().filter(|(_, d)| *d == label).map(|(v, _)| *v).collect();
                if group.is_empty() {
                    return Err(Error::invalid(
                        "adversarial step needs both source and target samples",
                    ));
                }
                let mut acc: Option<Var> = None;
                for v in &group {
                    let logits = domain_logits(&mut tape, &b, &params.head_config, &params.head, *v)?;
                    let ce = ce_ls(&mut tape, logits, label, 0.0)?;
                    let ce = tape.scale(ce, 1.0 / group.len() as f64);
                    acc = Some(match acc {
                        None => ce,
                        Some(a) => tape.add(a, ce)?,
                    });
                }
                *slot = acc;
            }
            (terms[0], terms[1])
        } else {
            (None, None)
        };
        let (loss, breakdown) = total_loss(&mut tape, caption, source, target)?;
        Ok((tape, b, loss, breakdown))
    }

    /// Loss and parameter gradients for a step without updating anything.
    pub fn loss_and_grads(
        &mut self,
        captioned: &[&Sample],
        unlabeled: &[&Sample],
        with_domain: bool,
    ) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let (mut tape, b, loss, breakdown) = self.forward(captioned, unlabeled, with_domain)?;
        tape.backward(loss)?;
        Ok((breakdown, self.params.store.grads(&tape, &b)))
    }

    /// One optimiser step on `L = L_y + L_S + L_T`. Caption loss is the
    /// mean over every non-pad target token of `captioned`. With
    /// `with_domain`, every sample in both slices also contributes its
    /// encoder summary to the domain loss of its own domain label.
    pub fn train_step(&mut self, captioned: &[&Sample], unlabeled: &[&Sample], with_domain: bool) -> Result<LossBreakdown> {
        let (mut tape, b, loss, breakdown) = self.forward(captioned, unlabeled, with_domain)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                total: breakdown.total,
                caption: breakdown.caption,
                source_domain: breakdown.source_domain,
                target_domain: breakdown.target_domain,
            });
        }
        tape.backward(loss)?;
        let grads = self.params.store.grads(&tape, &b);
        self.step += 1;
        let lr = self.cfg.lr_factor * lr_schedule(self.step, self.cfg.d_model, self.cfg.warmup);
        self.adam.step(&mut self.params.store, &grads, lr);
        self.history.push(StepLog {
            step: self.step,
            lr,
            total: breakdown.total,
            caption: breakdown.caption,
            source_domain: breakdown.source_domain,
            target_domain: breakdown.target_domain,
        });
        Ok(breakdown)
    }

    /// `cfg.epochs` passes over the captioned source set. In adversarial
    /// mode each source batch is paired with an equally sized batch of
    /// target frames whose captions are never read.
    pub fn fit(&mut self, source: &[Sample], target: &[Sample]) -> Result<()> {
        let with_domain = self.cfg.domain_loss_active();
        if with_domain && target.is_empty() {
            return Err(Error::invalid("adversarial training needs target samples"));
        }
        let bs = self.cfg.batch_size;
        let mut target_order: Vec<usize> = (0..target.len()).collect();
        target_order.shuffle(&mut self.shuffle_rng);
        let mut cursor = 0;
        for _ in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..source.len()).collect();
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(bs) {
                let captioned: Vec<&Sample> = chunk.iter().map(|&i| &source[i]).collect();
                let mut unlabeled = Vec::new();
                if with_domain {
                    for _ in 0..chunk.len() {
                        if cursor == target_order.len() {
                            target_order.shuffle(&mut self.shuffle_rng);
                            cursor = 0;
                        }
                        unlabeled.push(&target[target_order[cursor]]);
                        cursor += 1;
                    }
                }
                self.train_step(&captioned, &unlabeled, with_domain)?;
            }
        }
        Ok(())
    }

    /// `cfg.finetune_epochs` passes over captioned target frames. Caption
    /// loss only, unless `finetune_domain_loss` pairs each batch with source
    /// frames for the domain terms.
    pub fn fine_tune(&mut self, subset: &[&Sample], source: &[Sample]) -> Result<()> {
        if subset.is_empty() {
            return Ok(());
        }
        let with_domain = self.cfg.finetune_domain_loss && self.cfg.domain_loss_active();
        let bs = self.cfg.batch_size;
        let mut cursor = 0;
        for _ in 0..self.cfg.finetune_epochs {
            let mut order: Vec<usize> = (0..subset.len()).collect();
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(bs) {
                let captioned: Vec<&Sample> = chunk.iter().map(|&i| subset[i]).collect();
                let mut unlabeled = Vec::new();
                if with_domain {
                    for _ in 0..chunk.len() {
                        unlabeled.push(&source[cursor % source.len()]);
                        cursor += 1;
                    }
                }
                self.train_step(&captioned, &unlabeled, with_domain)?;
            }
        }
        Ok(())
    }
}

fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Beam-search captions for every frame, in input order.
pub fn generate_captions(
    params: &ModelParams,
    vocab: &Vocab,
    samples: &[Sample],
    beam_size: usize,
) -> Result<Vec<(Generated, String)>> {
    parallel_map(samples, |s| {
        let g = generate(params, &s.regions, beam_size, params.config.max_caption_len)?;
        let text = vocab.decode(&g.tokens);
        Ok((g, text))
    })
}

/// Per-token predicted distributions under teacher forcing, one row per
/// non-pad target position.
pub fn teacher_forced_predictions(params: &ModelParams, vocab: &Vocab, samples: &[Sample]) -> Result<PredictionSet> {
    let parts = parallel_map(samples, |s| {
        let c = s
            .caption
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no caption", s.id)))?;
        let (inputs, targets) = caption_io(vocab, c, params.config.max_caption_len)?;
        let mut tape = Tape::new();
        let b = params.store.bind(&mut tape)?;
        let x = tape.leaf_rows(&s.regions)?;
        let enc = encode(&mut tape, &b, params, x, &mut Dropout::eval())?;
        let logits = decode(&mut tape, &b, params, &inputs, &enc, &mut Dropout::eval())?;
        let p = tape.softmax(logits, 1)?;
        let k = params.config.vocab_size;
        let rows: Vec<(Vec<f64>, usize)> = targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD_ID)
            .map(|(i, &t)| (tape.value(p)[i * k..(i + 1) * k].to_vec(), t))
            .collect();
        Ok(rows)
    })?;
    let (probs, labels) = parts.into_iter().flatten().unzip();
    PredictionSet::new(probs, labels)
}

/// Caption metrics from beam search plus token-level calibration.
pub fn evaluate(params: &ModelParams, vocab: &Vocab, samples: &[Sample], beam_size: usize) -> Result<ScoreReport> {
    let generated = generate_captions(params, vocab, samples, beam_size)?;
    let hyps: Vec<Vec<String>> = generated.iter().map(|(_, t)| normalize_tokenize(t)).collect();
    let refs: Vec<Vec<String>> = samples
        .iter()
        .map(|s| {
            s.caption
                .as_deref()
                .map(normalize_tokenize)
                .ok_or_else(|| Error::invalid(format!("sample {} has no caption", s.id)))
        })
        .collect::<Result<_>>()?;
    let mut report = score_corpus(&hyps, &refs)?;
    report.calibration = Some(calibration_report(&teacher_forced_predictions(params, vocab, samples)?)?);
    Ok(report)
}

/// Train/validation splits of both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_val: Vec<Sample>,
}

impl From<crate::data::SynthData> for Datasets {
    fn from(d: crate::data::SynthData) -> Self {
        Self {
            source_train: d.source_train,
            source_val: d.source_val,
            target_train: d.target_train,
            target_val: d.target_val,
        }
    }
}

impl Datasets {
    pub fn feature_dim(&self) -> Result<usize> {
        self.source_train
            .first()
            .and_then(|s| s.regions.first())
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("source training set is empty"))
    }
}

/// Everything a protocol run produces.
pub struct ProtocolOutcome {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub target_report: ScoreReport,
    pub source_report: ScoreReport,
    /// Ids of the target frames used for fine-tuning.
    pub adaptation_ids: Vec<String>,
    pub fingerprint_before_adaptation: String,
    pub fingerprint_after_adaptation: String,
    pub history: Vec<StepLog>,
}

/// Trains on the source domain (adversarially unless `cfg.mode` says
/// otherwise) and then fine-tunes on the target subset picked by `mode`.
/// Both validation sets are scored with the final weights.
pub fn run_protocol(mode: AdaptMode, data: &Datasets, vocab: Vocab, cfg: &TrainConfig) -> Result<ProtocolOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), vocab, data.feature_dim()?)?;
    trainer.fit(&data.source_train, &data.target_train)?;
    let (ids, before, after) = adapt(&mut trainer, mode, data)?;
    let target_report = evaluate(&trainer.params, &trainer.vocab, &data.target_val, cfg.beam_size)?;
    let source_report = evaluate(&trainer.params, &trainer.vocab, &data.source_val, cfg.beam_size)?;
    Ok(ProtocolOutcome {
        params: trainer.params,
        vocab: trainer.vocab,
        target_report,
        source_report,
        adaptation_ids: ids,
        fingerprint_before_adaptation: before,
        fingerprint_after_adaptation: after,
        history: trainer.history,
    })
}

/// The adaptation phase alone. Returns the selected ids and the parameter
/// fingerprints before and after.
pub fn adapt(trainer: &mut Trainer, mode: AdaptMode, data: &Datasets) -> Result<(Vec<String>, String, String)> {
    let before = trainer.params.store.fingerprint();
    let universe = if mode == AdaptMode::Uda {
        Default::default()
    } else {
        caption_words(&data.target_train)
    };
    let picked = select_adaptation_set(&data.target_train, &universe, mode)?;
    let subset: Vec<&Sample> = picked.iter().map(|&i| &data.target_train[i]).collect();
    trainer.fine_tune(&subset, &data.source_train)?;
    let after = trainer.params.store.fingerprint();
    Ok((subset.iter().map(|s| s.id.clone()).collect(), before, after))
}

/// Checkpoint payload besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub head: DomainHeadConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    /// Optimiser steps taken before the checkpoint was written.
    #[serde(default)]
    pub steps: usize,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub train: TrainConfig,
    pub steps: usize,
}

impl LoadedCheckpoint {
    /// A trainer that picks up where the saved run stopped.
    pub fn into_trainer(self) -> Trainer {
        let mut t = Trainer::from_params(self.train, self.vocab, self.params);
        t.resume_at(self.steps);
        t
    }
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, vocab: &Vocab, cfg: &TrainConfig, steps: usize) -> Result<()> {
    let meta = CheckpointConfig {
        model: params.config.clone(),
        head: params.head_config.clone(),
        train: cfg.clone(),
        vocab: vocab.tokens().to_vec(),
        steps,
    };
    Checkpoint::save(meta, &params.store, path)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (meta, store): (CheckpointConfig, _) = Checkpoint::load(path)?;
    Ok(LoadedCheckpoint {
        params: ModelParams::from_store(meta.model, meta.head, &store)?,
        vocab: Vocab::from_tokens(meta.vocab)?,
        train: meta.train,
        steps: meta.steps,
    })
}
