//! Recurrent language models conditioned on utterance metadata.
//!
//! Four variants share one decoder (a multi-layer LSTM over the transcript,
//! starting from a zero state and fed `<s>` first):
//!
//! * [`Variant::Lstm`]: `softmax(W2 (W1 z_t + b1) + b2)`.
//! * [`Variant::Cache`]: the LSTM distribution interpolated with the
//!   unigram distribution of the utterance's metadata tokens.
//! * [`Variant::Attention`]: a metadata encoder LSTM (sharing the word
//!   embeddings) produces states `h^i`; the decoder attends with scores
//!   `(W_z z_t + b_z) . h^i` and the context vector `c_t` is concatenated to
//!   `z_t` before the two output layers.
//! * [`Variant::Pointer`]: the attention model's distribution mixed with the
//!   attention weights scattered onto metadata words, under the switch
//!   `p_gen = sigmoid(w_gen . [c_t; z_t; e(y_t)] + b_gen)`.
//!
//! Training and inference run the same graph code: training feeds the whole
//! transcript as a `T x d` block, inference feeds one row per step.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{EncodedRecord, Vocabulary, BOS, EOS, NO_META};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, vocabulary {vocabulary}")]
    VocabMismatch { checkpoint: String, vocabulary: String },
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    Lstm,
    Cache { beta: f64 },
    Attention,
    Pointer,
}

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Cache { .. } => "cache",
            Variant::Attention => "attention",
            Variant::Pointer => "pointer",
        }
    }

    /// Parses `lstm`, `cache`, `attention` or `pointer`; `beta` is used only
    /// for the cache variant.
    pub fn parse(tag: &str, beta: f64) -> Option<Self> {
        match tag {
            "lstm" => Some(Variant::Lstm),
            "cache" => Some(Variant::Cache { beta }),
            "attention" => Some(Variant::Attention),
            "pointer" => Some(Variant::Pointer),
            _ => None,
        }
    }

    pub fn uses_encoder(&self) -> bool {
        matches!(self, Variant::Attention | Variant::Pointer)
    }

    pub fn label(&self) -> String {
        match self {
            Variant::Cache { beta } => format!("cache({beta})"),
            v => v.tag().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub vocab_hash: String,
}

/// Per-vocabulary probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution(pub Vec<f64>);

impl TokenDistribution {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn prob(&self, w: usize) -> f64 {
        self.0[w]
    }

    pub fn log_prob(&self, w: usize) -> f64 {
        self.0[w].ln()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Copy distribution: `sum of alpha[i]` over positions whose token is `w`.
pub fn copy_distribution(alpha: &[f64], metadata: &[usize], vocab_size: usize) -> Vec<f64> {
    let mut out = vec![0.0; vocab_size];
    for (&a, &w) in alpha.iter().zip(metadata) {
        out[w] += a;
    }
    out
}

/// `p_gen * P_vocab(w) + (1 - p_gen) * sum_{i: x_i = w} alpha_i`.
pub fn pointer_mixture(
    p_vocab: &TokenDistribution,
    alpha: &[f64],
    metadata: &[usize],
    p_gen: f64,
) -> TokenDistribution {
    let copy = copy_distribution(alpha, metadata, p_vocab.len());
    TokenDistribution(
        p_vocab
            .0
            .iter()
            .zip(&copy)
            .map(|(p, c)| p_gen * p + (1.0 - p_gen) * c)
            .collect(),
    )
}

/// Relative frequency of each word among the metadata tokens, ignoring the
/// `<nometa>` sentinel. `None` when nothing is left.
pub fn metadata_unigram(metadata: &[usize], vocab_size: usize) -> Option<Vec<f64>> {
    let tokens: Vec<usize> = metadata.iter().copied().filter(|&w| w != NO_META).collect();
    if tokens.is_empty() {
        return None;
    }
    let mut u = vec![0.0; vocab_size];
    let share = 1.0 / tokens.len() as f64;
    for w in tokens {
        u[w] += share;
    }
    Some(u)
}

/// `(1 - beta) * P(w) + beta * unigram_meta(w)`; identity when the metadata
/// holds only `<nometa>`.
pub fn cache_interpolate(p: &TokenDistribution, metadata: &[usize], beta: f64) -> TokenDistribution {
    match metadata_unigram(metadata, p.len()) {
        None => p.clone(),
        Some(u) => {
            let keep = 1.0 - beta;
            TokenDistribution(p.0.iter().zip(&u).map(|(a, b)| keep * a + (1.0 - keep) * b).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

/// Top-layer encoder states, one row per metadata token.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub hidden: Vec<f64>,
    pub dim: usize,
    pub tokens: Vec<usize>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-utterance conditioning shared by all hypotheses of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaContext {
    pub tokens: Vec<usize>,
    pub encoder: Option<EncoderStates>,
}

/// Decoder state after consuming `last_token`. Cloning gives an independent
/// copy.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
    pub last_token: usize,
    pub context: Arc<MetaContext>,
}

impl LmState {
    pub fn top(&self) -> &[f64] {
        self.hidden.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    embed: ParamId,
    decoder: Vec<LstmIds>,
    encoder: Vec<LstmIds>,
    attn_w: Option<ParamId>,
    attn_b: Option<ParamId>,
    out_w1: ParamId,
    out_b1: ParamId,
    out_w2: ParamId,
    out_b2: ParamId,
    gen_w: Option<ParamId>,
    gen_b: Option<ParamId>,
}

impl ParamIds {
    fn resolve(params: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let lstm = |prefix: &str| -> Result<Vec<LstmIds>> {
            (0..config.layers)
                .map(|l| {
                    Ok(LstmIds {
                        w_ih: params.id(&format!("{prefix}.{l}.w_ih"))?,
                        w_hh: params.id(&format!("{prefix}.{l}.w_hh"))?,
                        bias: params.id(&format!("{prefix}.{l}.b"))?,
                    })
                })
                .collect()
        };
        let ctx = config.variant.uses_encoder();
        let opt = |name: &str, wanted: bool| -> Result<Option<ParamId>> {
            if wanted {
                Ok(Some(params.id(name)?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            embed: params.id("embed")?,
            decoder: lstm("dec")?,
            encoder: if ctx { lstm("enc")? } else { Vec::new() },
            attn_w: opt("attn.w", ctx)?,
            attn_b: opt("attn.b", ctx)?,
            out_w1: params.id("out.w1")?,
            out_b1: params.id("out.b1")?,
            out_w2: params.id("out.w2")?,
            out_b2: params.id("out.b2")?,
            gen_w: opt("gen.w", config.variant == Variant::Pointer)?,
            gen_b: opt("gen.b", config.variant == Variant::Pointer)?,
        })
    }
}

/// Graph nodes produced by the output head for `T` decoder steps.
#[derive(Clone, Debug)]
pub struct HeadNodes {
    pub alpha: Option<NodeId>,
    pub context: Option<NodeId>,
    pub p_vocab: Option<NodeId>,
    pub p_gen: Option<NodeId>,
    /// Row-wise log-probabilities (softmax variants) ...
    pub log_probs: Option<NodeId>,
    /// ... or row-wise probabilities (mixture variants).
    pub probs: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct NllNodes {
    /// Summed negative log-likelihood (`1 x 1`).
    pub loss: NodeId,
    /// Log-probability of each target (`T x 1`).
    pub token_log_probs: NodeId,
    pub tokens: usize,
}

/// Everything computed for one next-word prediction.
#[derive(Clone, Debug)]
pub struct StepDetails {
    pub attention: Option<AttentionResult>,
    pub p_vocab: TokenDistribution,
    pub p_gen: Option<f64>,
    pub distribution: TokenDistribution,
}

pub const INIT_SCALE: f64 = 0.08;

#[derive(Clone, Debug)]
pub struct NeuralLm {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
}

impl NeuralLm {
    /// Fresh model with every parameter uniform in `[-0.08, 0.08]`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init_scale(config, seed, INIT_SCALE)
    }

    pub fn with_init_scale(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.vocab_size <= NO_META {
            return Err(NeuralError::Config(format!(
                "layers={} hidden={} vocab={}",
                config.layers, config.hidden, config.vocab_size
            )));
        }
        if let Variant::Cache { beta } = config.variant {
            if !(0.0..=1.0).contains(&beta) {
                return Err(NeuralError::Config(format!("cache beta {beta} outside [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, v) = (config.hidden, config.vocab_size);
        let mut p = ParamStore::new();
        p.insert_uniform("embed", vec![v, h], scale, &mut rng)?;
        let lstm = |p: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| -> Result<()> {
            for l in 0..config.layers {
                p.insert_uniform(format!("{prefix}.{l}.w_ih"), vec![h, 4 * h], scale, rng)?;
                p.insert_uniform(format!("{prefix}.{l}.w_hh"), vec![h, 4 * h], scale, rng)?;
                p.insert_uniform(format!("{prefix}.{l}.b"), vec![1, 4 * h], scale, rng)?;
            }
            Ok(())
        };
        lstm(&mut p, "dec", &mut rng)?;
        if config.variant.uses_encoder() {
            lstm(&mut p, "enc", &mut rng)?;
            p.insert_uniform("attn.w", vec![h, h], scale, &mut rng)?;
            p.insert_uniform("attn.b", vec![1, h], scale, &mut rng)?;
        }
        let head_in = if config.variant.uses_encoder() { 2 * h } else { h };
        p.insert_uniform("out.w1", vec![head_in, h], scale, &mut rng)?;
        p.insert_uniform("out.b1", vec![1, h], scale, &mut rng)?;
        p.insert_uniform("out.w2", vec![h, v], scale, &mut rng)?;
        p.insert_uniform("out.b2", vec![1, v], scale, &mut rng)?;
        if config.variant == Variant::Pointer {
            p.insert_uniform("gen.w", vec![3 * h, 1], scale, &mut rng)?;
            p.insert_uniform("gen.b", vec![1, 1], scale, &mut rng)?;
        }
        Self::from_params(config, p)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let ids = ParamIds::resolve(&params, &config)?;
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Re-labels an LSTM as a cache-LSTM (or back). Other variants have
    /// different parameter sets and cannot be converted.
    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        let same_layout = |v: Variant| matches!(v, Variant::Lstm | Variant::Cache { .. });
        if !(same_layout(variant) && same_layout(self.config.variant)) && variant != self.config.variant {
            return Err(NeuralError::Config(format!(
                "cannot convert {} to {}",
                self.config.variant.tag(),
                variant.tag()
            )));
        }
        let mut config = self.config.clone();
        config.variant = variant;
        Self::from_params(config, self.params.clone())
    }

    // ---- graph building blocks ------------------------------------------

    fn lstm_layer(
        &self,
        g: &mut Graph<'_>,
        ids: &LstmIds,
        inputs: NodeId,
        mut h: NodeId,
        mut c: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let hs = self.config.hidden;
        let w_ih = g.param(ids.w_ih);
        let w_hh = g.param(ids.w_hh);
        let b = g.param(ids.bias);
        let xw = g.matmul(inputs, w_ih)?;
        let xw = g.add_row(xw, b)?;
        let steps = g.shape(inputs).0;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = if steps == 1 { xw } else { g.slice_rows(xw, t, 1)? };
            let rec = g.matmul(h, w_hh)?;
            let gates = g.add(x_t, rec)?;
            let i = g.slice_cols(gates, 0, hs)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, hs, hs)?;
            let f = g.sigmoid(f);
            let cand = g.slice_cols(gates, 2 * hs, hs)?;
            let cand = g.tanh(cand);
            let o = g.slice_cols(gates, 3 * hs, hs)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let squashed = g.tanh(c);
            h = g.mul(o, squashed)?;
            outputs.push(h);
        }
        let stacked = if steps == 1 { outputs[0] } else { g.concat_rows(&outputs)? };
        Ok((stacked, h, c))
    }

    fn dropout<R: Rng>(&self, g: &mut Graph<'_>, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..r * c).map(|_| if rng.gen_bool(rate) { 0.0 } else { keep }).collect();
        let mask = g.constant(r, c, mask)?;
        Ok(g.mul(x, mask)?)
    }

    /// Runs a stack of LSTM layers over `inputs` (`T x d`) from the given
    /// initial states; returns the top-layer outputs and final states.
    fn run_stack<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        layers: &[LstmIds],
        inputs: NodeId,
        init: &[(NodeId, NodeId)],
        dropout: &mut Option<(f64, &mut R)>,
    ) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        let mut x = inputs;
        let mut finals = Vec::with_capacity(layers.len());
        for (ids, &(h0, c0)) in layers.iter().zip(init) {
            let (out, h, c) = self.lstm_layer(g, ids, x, h0, c0)?;
            finals.push((h, c));
            x = match dropout {
                Some((rate, rng)) => self.dropout(g, out, *rate, *rng)?,
                None => out,
            };
        }
        Ok((x, finals))
    }

    fn zero_init(&self, g: &mut Graph<'_>) -> Result<Vec<(NodeId, NodeId)>> {
        let h = self.config.hidden;
        (0..self.config.layers)
            .map(|_| Ok((g.row(vec![0.0; h])?, g.row(vec![0.0; h])?)))
            .collect()
    }

    /// Encoder outputs for `metadata` (`M x hidden`).
    pub fn encoder_nodes<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        metadata: &[usize],
        dropout: &mut Option<(f64, &mut R)>,
    ) -> Result<NodeId> {
        let embed = g.param(self.ids.embed);
        let x = g.row_select(embed, metadata)?;
        let init = self.zero_init(g)?;
        let (top, _) = self.run_stack(g, &self.ids.encoder, x, &init, dropout)?;
        Ok(top)
    }

    /// Attention weights (`T x M`) and context vectors (`T x hidden`).
    pub fn attention_nodes(&self, g: &mut Graph<'_>, z: NodeId, enc: NodeId) -> Result<(NodeId, NodeId)> {
        let (w, b) = match (self.ids.attn_w, self.ids.attn_b) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(NeuralError::Config("variant has no attention".into())),
        };
        let w = g.param(w);
        let b = g.param(b);
        let q = g.matmul(z, w)?;
        let q = g.add_row(q, b)?;
        let scores = g.matmul_t(q, enc)?;
        let alpha = g.softmax(scores);
        let ctx = g.matmul(alpha, enc)?;
        Ok((alpha, ctx))
    }

    /// Vocabulary logits from `z` (and the context vector, when present).
    pub fn logit_nodes(&self, g: &mut Graph<'_>, z: NodeId, ctx: Option<NodeId>) -> Result<NodeId> {
        let input = match ctx {
            Some(c) => g.concat_cols(&[z, c])?,
            None => z,
        };
        let w1 = g.param(self.ids.out_w1);
        let b1 = g.param(self.ids.out_b1);
        let w2 = g.param(self.ids.out_w2);
        let b2 = g.param(self.ids.out_b2);
        let hid = g.matmul(input, w1)?;
        let hid = g.add_row(hid, b1)?;
        let logits = g.matmul(hid, w2)?;
        Ok(g.add_row(logits, b2)?)
    }

    /// Switch values (`T x 1`) from `[c_t; z_t; e(y_t)]`.
    pub fn gen_switch_nodes(&self, g: &mut Graph<'_>, ctx: NodeId, z: NodeId, y_emb: NodeId) -> Result<NodeId> {
        let (w, b) = match (self.ids.gen_w, self.ids.gen_b) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(NeuralError::Config("variant has no generation switch".into())),
        };
        let input = g.concat_cols(&[ctx, z, y_emb])?;
        let w = g.param(w);
        let b = g.param(b);
        let pre = g.matmul(input, w)?;
        let pre = g.add_row(pre, b)?;
        Ok(g.sigmoid(pre))
    }

    /// Output head over `T` decoder steps. `z` is `T x hidden`, `y_emb` the
    /// embeddings of the inputs that produced `z`, `enc` the encoder outputs
    /// and `metadata` the encoded metadata ids.
    pub fn head_nodes(
        &self,
        g: &mut Graph<'_>,
        z: NodeId,
        y_emb: NodeId,
        enc: Option<NodeId>,
        metadata: &[usize],
    ) -> Result<HeadNodes> {
        let steps = g.shape(z).0;
        let v = self.config.vocab_size;
        let mut out = HeadNodes {
            alpha: None,
            context: None,
            p_vocab: None,
            p_gen: None,
            log_probs: None,
            probs: None,
        };
        match self.config.variant {
            Variant::Lstm => {
                let logits = self.logit_nodes(g, z, None)?;
                out.log_probs = Some(g.log_softmax(logits));
            }
            Variant::Cache { beta } => {
                let logits = self.logit_nodes(g, z, None)?;
                match metadata_unigram(metadata, v) {
                    None => out.log_probs = Some(g.log_softmax(logits)),
                    Some(u) => {
                        let p = g.softmax(logits);
                        out.p_vocab = Some(p);
                        let rows: Vec<f64> = (0..steps).flat_map(|_| u.iter().copied()).collect();
                        let u = g.constant(steps, v, rows)?;
                        let gate = g.constant(steps, 1, vec![1.0 - beta; steps])?;
                        out.probs = Some(g.mix(gate, p, u)?);
                    }
                }
            }
            Variant::Attention | Variant::Pointer => {
                let enc = enc.ok_or_else(|| NeuralError::Config("encoder states required".into()))?;
                let (alpha, ctx) = self.attention_nodes(g, z, enc)?;
                out.alpha = Some(alpha);
                out.context = Some(ctx);
                let logits = self.logit_nodes(g, z, Some(ctx))?;
                if self.config.variant == Variant::Attention {
                    out.log_probs = Some(g.log_softmax(logits));
                } else {
                    let p = g.softmax(logits);
                    out.p_vocab = Some(p);
                    let p_gen = self.gen_switch_nodes(g, ctx, z, y_emb)?;
                    out.p_gen = Some(p_gen);
                    let copy = g.scatter(alpha, metadata, v)?;
                    out.probs = Some(g.mix(p_gen, p, copy)?);
                }
            }
        }
        Ok(out)
    }

    /// Negative log-likelihood of `record` with targets `y_1..y_N, </s>`.
    pub fn nll_nodes<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        record: &EncodedRecord,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<NllNodes> {
        let mut inputs = Vec::with_capacity(record.transcript.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&record.transcript);
        let mut targets = record.transcript.clone();
        targets.push(EOS);

        let enc = if self.config.variant.uses_encoder() {
            Some(self.encoder_nodes(g, &record.metadata, &mut dropout)?)
        } else {
            None
        };
        let embed = g.param(self.ids.embed);
        let x = g.row_select(embed, &inputs)?;
        let init = self.zero_init(g)?;
        let (z, _) = self.run_stack(g, &self.ids.decoder, x, &init, &mut dropout)?;
        let head = self.head_nodes(g, z, x, enc, &record.metadata)?;
        let picked = match (head.log_probs, head.probs) {
            (Some(lp), _) => g.pick(lp, &targets)?,
            (None, Some(p)) => {
                let p = g.pick(p, &targets)?;
                g.log(p)
            }
            (None, None) => unreachable!("head always yields a distribution"),
        };
        let total = g.sum(picked);
        Ok(NllNodes {
            loss: g.scale(total, -1.0),
            token_log_probs: picked,
            tokens: targets.len(),
        })
    }

    /// Natural-log probability of each target (`y_1..y_N, </s>`).
    pub fn token_log_probs(&self, record: &EncodedRecord) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let nodes = self.nll_nodes::<ChaCha8Rng>(&mut g, record, None)?;
        Ok(g.value(nodes.token_log_probs).to_vec())
    }

    // ---- incremental inference ------------------------------------------

    /// Prepares per-utterance conditioning; runs the encoder when the
    /// variant has one. `metadata` must be encoded (never empty).
    pub fn prepare(&self, metadata: &[usize]) -> Result<Arc<MetaContext>> {
        let encoder = if self.config.variant.uses_encoder() {
            Some(self.encode_metadata(metadata)?)
        } else {
            None
        };
        Ok(Arc::new(MetaContext {
            tokens: metadata.to_vec(),
            encoder,
        }))
    }

    pub fn encode_metadata(&self, metadata: &[usize]) -> Result<EncoderStates> {
        if metadata.is_empty() {
            return Err(NeuralError::Config("metadata must hold at least one token".into()));
        }
        if self.ids.encoder.is_empty() {
            return Err(NeuralError::Config("variant has no encoder".into()));
        }
        let mut g = Graph::new(&self.params);
        let top = self.encoder_nodes::<ChaCha8Rng>(&mut g, metadata, &mut None)?;
        Ok(EncoderStates {
            hidden: g.value(top).to_vec(),
            dim: self.config.hidden,
            tokens: metadata.to_vec(),
        })
    }

    /// State after consuming `<s>`.
    pub fn start(&self, context: Arc<MetaContext>) -> Result<LmState> {
        let h = self.config.hidden;
        let zero = LmState {
            hidden: vec![vec![0.0; h]; self.config.layers],
            cell: vec![vec![0.0; h]; self.config.layers],
            last_token: BOS,
            context,
        };
        self.advance(&zero, BOS)
    }

    /// Consumes `word`, returning the successor state.
    pub fn advance(&self, state: &LmState, word: usize) -> Result<LmState> {
        let mut g = Graph::new(&self.params);
        let embed = g.param(self.ids.embed);
        let x = g.row_select(embed, &[word])?;
        let init = state
            .hidden
            .iter()
            .zip(&state.cell)
            .map(|(h, c)| Ok((g.row(h.clone())?, g.row(c.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let (_, finals) = self.run_stack::<ChaCha8Rng>(&mut g, &self.ids.decoder, x, &init, &mut None)?;
        Ok(LmState {
            hidden: finals.iter().map(|&(h, _)| g.value(h).to_vec()).collect(),
            cell: finals.iter().map(|&(_, c)| g.value(c).to_vec()).collect(),
            last_token: word,
            context: Arc::clone(&state.context),
        })
    }

    /// Full breakdown of the next-word prediction from `state`.
    pub fn step_details(&self, state: &LmState) -> Result<StepDetails> {
        let mut g = Graph::new(&self.params);
        let z = g.row(state.top().to_vec())?;
        let embed = g.param(self.ids.embed);
        let y_emb = g.row_select(embed, &[state.last_token])?;
        let enc = match &state.context.encoder {
            Some(e) if self.config.variant.uses_encoder() => Some(g.constant(e.len(), e.dim, e.hidden.clone())?),
            _ => None,
        };
        let head = self.head_nodes(&mut g, z, y_emb, enc, &state.context.tokens)?;
        let distribution = match (head.log_probs, head.probs) {
            (Some(lp), _) => TokenDistribution(g.value(lp).iter().map(|x| x.exp()).collect()),
            (None, Some(p)) => TokenDistribution(g.value(p).to_vec()),
            (None, None) => unreachable!("head always yields a distribution"),
        };
        let p_vocab = match head.p_vocab {
            Some(p) => TokenDistribution(g.value(p).to_vec()),
            None => distribution.clone(),
        };
        let attention = match (head.alpha, head.context) {
            (Some(a), Some(c)) => Some(AttentionResult {
                weights: g.value(a).to_vec(),
                context: g.value(c).to_vec(),
            }),
            _ => None,
        };
        Ok(StepDetails {
            attention,
            p_vocab,
            p_gen: head.p_gen.map(|p| g.scalar(p)),
            distribution,
        })
    }

    pub fn distribution(&self, state: &LmState) -> Result<TokenDistribution> {
        Ok(self.step_details(state)?.distribution)
    }

    /// Log-probabilities of every next word from `state`.
    pub fn log_distribution(&self, state: &LmState) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let z = g.row(state.top().to_vec())?;
        let embed = g.param(self.ids.embed);
        let y_emb = g.row_select(embed, &[state.last_token])?;
        let enc = match &state.context.encoder {
            Some(e) if self.config.variant.uses_encoder() => Some(g.constant(e.len(), e.dim, e.hidden.clone())?),
            _ => None,
        };
        let head = self.head_nodes(&mut g, z, y_emb, enc, &state.context.tokens)?;
        Ok(match (head.log_probs, head.probs) {
            (Some(lp), _) => g.value(lp).to_vec(),
            (None, Some(p)) => g.value(p).iter().map(|x| x.ln()).collect(),
            (None, None) => unreachable!("head always yields a distribution"),
        })
    }

    /// `(log P(word | state), state after word)`.
    pub fn score_next(&self, state: &LmState, word: usize) -> Result<(f64, LmState)> {
        let lp = self.log_distribution(state)?[word];
        Ok((lp, self.advance(state, word)?))
    }

    /// Attention of `state` over `enc` (top-layer `z_t`).
    pub fn attend(&self, state: &LmState, enc: &EncoderStates) -> Result<AttentionResult> {
        if enc.dim != self.config.hidden || state.top().len() != self.config.hidden {
            return Err(NeuralError::Tensor(TensorError::ShapeMismatch {
                op: "attend",
                left: vec![1, state.top().len()],
                right: vec![enc.len(), enc.dim],
            }));
        }
        let mut g = Graph::new(&self.params);
        let z = g.row(state.top().to_vec())?;
        let h = g.constant(enc.len(), enc.dim, enc.hidden.clone())?;
        let (a, c) = self.attention_nodes(&mut g, z, h)?;
        Ok(AttentionResult {
            weights: g.value(a).to_vec(),
            context: g.value(c).to_vec(),
        })
    }

    /// Two-layer softmax output; `attention` is ignored by the LSTM variants.
    pub fn vocab_distribution(&self, state: &LmState, attention: Option<&AttentionResult>) -> Result<TokenDistribution> {
        let mut g = Graph::new(&self.params);
        let z = g.row(state.top().to_vec())?;
        let ctx = match attention {
            Some(a) if self.config.variant.uses_encoder() => Some(g.row(a.context.clone())?),
            _ => None,
        };
        let logits = self.logit_nodes(&mut g, z, ctx)?;
        let p = g.softmax(logits);
        Ok(TokenDistribution(g.value(p).to_vec()))
    }

    pub fn gen_switch(&self, state: &LmState, attention: &AttentionResult) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let z = g.row(state.top().to_vec())?;
        let c = g.row(attention.context.clone())?;
        let embed = g.param(self.ids.embed);
        let y = g.row_select(embed, &[state.last_token])?;
        let p = self.gen_switch_nodes(&mut g, c, z, y)?;
        Ok(g.scalar(p))
    }

    /// Sum of log-probabilities of `record` via repeated [`Self::score_next`].
    pub fn incremental_log_prob(&self, record: &EncodedRecord) -> Result<f64> {
        let ctx = self.prepare(&record.metadata)?;
        let mut state = self.start(ctx)?;
        let mut total = 0.0;
        for &w in record.transcript.iter().chain(std::iter::once(&EOS)) {
            let (lp, next) = self.score_next(&state, w)?;
            total += lp;
            state = next;
        }
        Ok(total)
    }

    // ---- persistence ------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.config).map_err(|e| NeuralError::Header(e.to_string()))?;
        checkpoint::save(path, &header, &self.params)?;
        Ok(())
    }

    /// Loads a checkpoint and checks it was trained on `vocab`.
    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let (header, params) = checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_str(&header).map_err(|e| NeuralError::Header(e.to_string()))?;
        if config.vocab_hash != vocab.hash() || config.vocab_size != vocab.len() {
            return Err(NeuralError::VocabMismatch {
                checkpoint: config.vocab_hash,
                vocabulary: vocab.hash(),
            });
        }
        Self::from_params(config, params)
    }
}

#[cfg(test)]
mod tests;
