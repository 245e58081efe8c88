//! Training loop: NAG with a cosine learning-rate schedule, gradient-norm
//! clipping and early stopping on validation perplexity.
//!
//! The optimizer uses the look-ahead reformulation of Nesterov momentum:
//! stored parameters are always the look-ahead point `p + mu v`, so the
//! gradient computed at the stored parameters is the Nesterov gradient.
//! One step is
//!
//! ```text
//! p <- p + mu^2 v - (1 + mu) lr g
//! v <- mu v - lr g
//! ```
//!
//! which is algebraically the classic `v <- mu v - lr g(x + mu v); x <- x + v`
//! tracked at `x + mu v`.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedRecord, Vocabulary};
use crate::neural::{ModelConfig, NeuralError, NeuralLm, Variant};
use crate::tensor::{Graph, ParamStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("optimizer state does not match parameter `{0}`")]
    StateMismatch(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("empty training set")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] NeuralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Cache interpolation weight, used when `variant` is `cache`.
    pub beta: f64,
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip: f64,
    pub init_scale: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Lstm,
            beta: 0.1,
            layers: 2,
            hidden: 64,
            dropout: 0.1,
            lr: 0.001,
            min_lr: 0.0,
            momentum: 0.99,
            epochs: 10,
            batch_size: 16,
            seed: 1,
            clip: 5.0,
            init_scale: crate::neural::INIT_SCALE,
            patience: 3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| TrainError::Config(format!("bad value for {key}: `{value}`")))
}

impl TrainConfig {
    /// Sets one field from its textual form. `beta` may come before or
    /// after `variant`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => {
                self.variant = Variant::parse(value.trim(), self.beta)
                    .ok_or_else(|| TrainError::Config(format!("unknown variant `{value}`")))?;
            }
            "beta" => {
                self.beta = parse_num(key, value)?;
                if let Variant::Cache { .. } = self.variant {
                    self.variant = Variant::Cache { beta: self.beta };
                }
            }
            "layers" => self.layers = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "min_lr" => self.min_lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "clip" => self.clip = parse_num(key, value)?,
            "init_scale" => self.init_scale = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file on top of `self`. `#` starts a
    /// comment; blank lines are ignored.
    pub fn overlay_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant.tag());
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "min_lr = {}", self.min_lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "clip = {}", self.clip);
        let _ = writeln!(s, "init_scale = {}", self.init_scale);
        let _ = writeln!(s, "patience = {}", self.patience);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("layers, hidden, epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return bad("need 0 <= min_lr <= lr and lr > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.clip > 0.0) || !(self.init_scale > 0.0) {
            return bad("clip and init_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must be in [0, 1]");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            layers: self.layers,
            hidden: self.hidden,
            vocab_size: vocab.len(),
            vocab_hash: vocab.hash(),
        }
    }
}

/// `min_lr + (lr0 - min_lr) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, initial_lr: f64, min_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(TrainError::StepOutOfRange { step, total: total_steps });
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (initial_lr - min_lr) * (1.0 + phase.cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        OptimizerState {
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            momentum,
            step: 0,
        }
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }
}

/// One NAG update from the accumulated gradients, which are then cleared.
/// Parameters with no gradient are treated as having a zero gradient.
pub fn nag_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(TrainError::StateMismatch(format!("{} tensors", params.len())));
    }
    let mu = state.momentum;
    let ids: Vec<_> = params.ids().collect();
    for (id, v) in ids.into_iter().zip(state.velocity.iter_mut()) {
        let t = params.get_mut(id);
        if v.len() != t.values.len() {
            return Err(TrainError::StateMismatch(format!("#{}", id.0)));
        }
        let grad = t.grad.take();
        for (i, (p, vel)) in t.values.iter_mut().zip(v.iter_mut()).enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            if mu != 0.0 {
                *p += mu * mu * *vel;
            }
            *p -= (1.0 + mu) * lr * g;
            *vel = mu * *vel - lr * g;
        }
    }
    state.step += 1;
    Ok(())
}

/// Summed NLL and number of predicted tokens (`</s>` included).
pub fn corpus_nll(model: &NeuralLm, records: &[EncodedRecord]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for r in records {
        let lp = model.token_log_probs(r)?;
        nll -= lp.iter().sum::<f64>();
        tokens += lp.len();
    }
    Ok((nll, tokens))
}

/// Mean per-token negative log-likelihood over `batch`.
pub fn nll_loss(model: &NeuralLm, batch: &[EncodedRecord]) -> Result<f64> {
    let (nll, tokens) = corpus_nll(model, batch)?;
    Ok(if tokens == 0 { 0.0 } else { nll / tokens as f64 })
}

/// Accumulates gradients of the batch's mean per-token NLL into the model's
/// parameters. Returns the summed NLL and token count.
pub fn accumulate_batch(
    model: &mut NeuralLm,
    batch: &[EncodedRecord],
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for r in batch {
        let grads = {
            let mut g = Graph::new(model.params());
            let drop = (dropout > 0.0).then_some((dropout, &mut *rng));
            let nodes = model.nll_nodes(&mut g, r, drop)?;
            nll += g.scalar(nodes.loss);
            tokens += nodes.tokens;
            g.backward(nodes.loss).map_err(NeuralError::from)?
        };
        model.params_mut().accumulate(&grads);
    }
    if tokens > 0 {
        model.params_mut().scale_grads(1.0 / tokens as f64);
    }
    Ok((nll, tokens))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub valid_ppl: f64,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.4}",
            self.epoch, self.step, self.lr, self.train_nll, self.valid_ppl
        )
    }
}

pub struct TrainResult {
    /// Parameters from the epoch with the lowest validation perplexity.
    pub model: NeuralLm,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
}

/// Optional file outputs of [`train`].
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub metrics_log: Option<&'a Path>,
}

pub fn perplexity_of(model: &NeuralLm, records: &[EncodedRecord]) -> Result<f64> {
    let (nll, tokens) = corpus_nll(model, records)?;
    Ok(if tokens == 0 { 1.0 } else { (nll / tokens as f64).exp() })
}

pub fn train(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[EncodedRecord],
    valid_set: &[EncodedRecord],
    outputs: TrainOutputs<'_>,
) -> Result<TrainResult> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut model = NeuralLm::with_init_scale(config.model_config(vocab), config.seed, config.init_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut opt = OptimizerState::new(model.params(), config.momentum);
    let batches = train_set.len().div_ceil(config.batch_size);
    let total_steps = batches * config.epochs;

    let mut log: Option<File> = match outputs.metrics_log {
        Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut lr = config.lr;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_nll, mut epoch_tokens) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedRecord> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (nll, tokens) = accumulate_batch(&mut model, &batch, config.dropout, &mut rng)?;
            if !nll.is_finite() {
                return Err(TrainError::Diverged { epoch, step: opt.step, loss: nll });
            }
            epoch_nll += nll;
            epoch_tokens += tokens;
            model.params_mut().clip_grad_norm(config.clip);
            lr = cosine_lr(opt.step, total_steps, config.lr, config.min_lr)?;
            nag_step(model.params_mut(), &mut opt, lr)?;
        }
        let train_nll = epoch_nll / epoch_tokens.max(1) as f64;
        let valid_ppl = perplexity_of(&model, valid_set)?;
        if !valid_ppl.is_finite() {
            return Err(TrainError::Diverged { epoch, step: opt.step, loss: valid_ppl.ln() });
        }
        let m = EpochMetrics { epoch, step: opt.step, lr, train_nll, valid_ppl };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.to_line())?;
        }
        metrics.push(m);

        if best.as_ref().is_none_or(|(ppl, _, _)| valid_ppl < *ppl) {
            best = Some((valid_ppl, epoch, model.params().clone()));
            stale = 0;
            if let Some(path) = outputs.checkpoint {
                model.save(path)?;
            }
        } else {
            stale += 1;
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }

    let (best_valid_ppl, best_epoch, params) = best.expect("at least one epoch ran");
    let model = NeuralLm::from_params(model.config().clone(), params)?;
    Ok(TrainResult { model, metrics, best_epoch, best_valid_ppl })
}
