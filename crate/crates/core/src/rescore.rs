//! Lattice rescoring with a neural LM interpolated with an n-gram LM.
//!
//! States are expanded in topological order. Each state holds hypotheses
//! keyed by their last `K` words; when two hypotheses collide the
//! higher-scoring one survives together with its neural state. Each state
//! then keeps at most `beam` hypotheses. An arc contributes
//! `acoustic_scale * am + lambda * neural + (1 - lambda) * ngram`, and
//! reaching a final state adds the same interpolation for `</s>`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc as Shared;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Vocabulary, BOS, EOS};
use crate::lattice::{Arc, Lattice, LatticeError, LatticePath};
use crate::neural::{LmState, NeuralError, NeuralLm};
use crate::ngram::NgramModel;

#[derive(Debug, Error)]
pub enum RescoreError {
    #[error("invalid rescoring config: {0}")]
    Config(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("lattice `{0}` has no complete path")]
    NoPath(String),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, RescoreError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescoreConfig {
    /// Weight of the neural LM.
    pub lambda: f64,
    /// Merge hypotheses sharing this many trailing words; `None` never
    /// merges.
    pub history: Option<usize>,
    /// Hypotheses kept per lattice state; `None` keeps all.
    pub beam: Option<usize>,
    pub acoustic_scale: f64,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig { lambda: 0.6, history: Some(5), beam: Some(32), acoustic_scale: 1.0 }
    }
}

impl RescoreConfig {
    /// No merging and no beam: exact search over every path.
    pub fn exhaustive(lambda: f64) -> Self {
        RescoreConfig { lambda, history: None, beam: None, acoustic_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RescoreError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.history == Some(0) || self.beam == Some(0) {
            return Err(RescoreError::Config("history length and beam must be at least 1".into()));
        }
        if !self.acoustic_scale.is_finite() {
            return Err(RescoreError::Config("acoustic scale must be finite".into()));
        }
        Ok(())
    }
}

/// The last `min(k, len)` words, left-padded with `<s>` to length `k`.
pub fn history_key(words: &[usize], k: usize) -> Vec<usize> {
    let tail = &words[words.len().saturating_sub(k)..];
    let mut key = vec![BOS; k - tail.len()];
    key.extend_from_slice(tail);
    key
}

/// `lambda * neural + (1 - lambda) * ngram`, exact at both endpoints.
pub fn combined_word_score(neural: f64, ngram: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        neural
    } else if lambda == 0.0 {
        ngram
    } else {
        lambda * neural + (1.0 - lambda) * ngram
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescoreResult {
    pub id: String,
    /// The best path; its `lm` is the summed interpolated LM score of the
    /// words (without `</s>`).
    pub path: LatticePath,
    /// Interpolated LM score of each word on the path.
    pub word_scores: Vec<f64>,
    pub eos_score: f64,
    /// Total combined score including acoustics and `</s>`.
    pub score: f64,
}

impl RescoreResult {
    pub fn words(&self) -> &[usize] {
        &self.path.words
    }

    /// `id<TAB>best words<TAB>combined score`.
    pub fn to_line(&self, vocab: &Vocabulary) -> String {
        format!("{}\t{}\t{}", self.id, vocab.decode(&self.path.words).join(" "), self.score)
    }

    /// The best path as a chain lattice whose `lm` fields hold the
    /// interpolated scores, `</s>` folded into the last arc.
    pub fn to_lattice(&self, lattice: &Lattice) -> Result<Lattice> {
        let n = self.path.arcs.len();
        let arcs: Vec<Arc> = self
            .path
            .arcs
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let src = lattice.arc(a);
                let eos = if i + 1 == n { self.eos_score } else { 0.0 };
                Arc { src: i, dst: i + 1, word: src.word, am: src.am, lm: self.word_scores[i] + eos }
            })
            .collect();
        Ok(Lattice::from_parts(self.id.clone(), n + 1, arcs, &[n])?)
    }
}

#[derive(Clone)]
struct Hyp {
    score: f64,
    states: Vec<usize>,
    arcs: Vec<usize>,
    words: Vec<usize>,
    word_scores: Vec<f64>,
    /// Neural state before the last word; advanced lazily so pruned
    /// hypotheses never pay for it.
    parent: Option<Shared<LmState>>,
}

fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    match b.score.partial_cmp(&a.score) {
        Some(Ordering::Equal) | None => (&a.states, &a.arcs).cmp(&(&b.states, &b.arcs)),
        Some(o) => o,
    }
}

struct Scorer<'a> {
    ngram: &'a NgramModel,
    config: RescoreConfig,
}

impl Scorer<'_> {
    fn uses_neural(&self) -> bool {
        self.config.lambda != 0.0
    }

    fn uses_ngram(&self) -> bool {
        self.config.lambda != 1.0
    }

    fn word_score(&self, neural: Option<&[f64]>, history: &[usize], word: usize) -> f64 {
        let n = neural.map_or(0.0, |d| d[word]);
        let g = if self.uses_ngram() { self.ngram.score(history, word) } else { 0.0 };
        combined_word_score(n, g, self.config.lambda)
    }
}

/// Rescores one lattice. `metadata` is the utterance's encoded metadata.
pub fn rescore(
    lattice: &Lattice,
    metadata: &[usize],
    neural: &NeuralLm,
    ngram: &NgramModel,
    config: &RescoreConfig,
) -> Result<RescoreResult> {
    config.validate()?;
    let scorer = Scorer { ngram, config: *config };
    let mut pending: Vec<HashMap<Vec<usize>, Hyp>> = vec![HashMap::new(); lattice.num_states()];
    let root = if scorer.uses_neural() {
        Some(Shared::new(neural.start(neural.prepare(metadata)?)?))
    } else {
        None
    };
    pending[0].insert(
        Vec::new(),
        Hyp { score: 0.0, states: vec![0], arcs: Vec::new(), words: Vec::new(), word_scores: Vec::new(), parent: root },
    );
    let mut best: Option<Hyp> = None;

    for &s in lattice.topo_order() {
        let mut hyps: Vec<Hyp> = std::mem::take(&mut pending[s]).into_values().collect();
        hyps.sort_by(rank);
        if let Some(b) = config.beam {
            hyps.truncate(b);
        }
        for hyp in hyps {
            let state = match (&hyp.parent, hyp.words.last()) {
                (Some(p), Some(&w)) => Some(Shared::new(neural.advance(p, w)?)),
                (Some(p), None) => Some(p.clone()),
                (None, _) => None,
            };
            let dist = match &state {
                Some(st) => Some(neural.log_distribution(st)?),
                None => None,
            };
            if lattice.is_final(s) {
                let eos = scorer.word_score(dist.as_deref(), &hyp.words, EOS);
                let mut done = hyp.clone();
                done.score += eos;
                done.word_scores.push(eos);
                if best.as_ref().is_none_or(|b| rank(&done, b) == Ordering::Less) {
                    best = Some(done);
                }
            }
            for &a in lattice.out_arcs(s) {
                let arc = lattice.arc(a);
                let ws = scorer.word_score(dist.as_deref(), &hyp.words, arc.word);
                let mut next = Hyp {
                    score: hyp.score + (config.acoustic_scale * arc.am + ws),
                    states: hyp.states.clone(),
                    arcs: hyp.arcs.clone(),
                    words: hyp.words.clone(),
                    word_scores: hyp.word_scores.clone(),
                    parent: state.clone(),
                };
                next.states.push(arc.dst);
                next.arcs.push(a);
                next.words.push(arc.word);
                next.word_scores.push(ws);
                let key = match config.history {
                    Some(k) => history_key(&next.words, k),
                    None => next.arcs.clone(),
                };
                let slot = &mut pending[arc.dst];
                match slot.get(&key) {
                    Some(old) if rank(&next, old) != Ordering::Less => {}
                    _ => {
                        slot.insert(key, next);
                    }
                }
            }
        }
    }

    let mut hyp = best.ok_or_else(|| RescoreError::NoPath(lattice.id.clone()))?;
    let eos_score = hyp.word_scores.pop().expect("eos score appended");
    let am = hyp.arcs.iter().map(|&a| lattice.arc(a).am).sum();
    let lm = hyp.word_scores.iter().sum();
    Ok(RescoreResult {
        id: lattice.id.clone(),
        path: LatticePath { arcs: hyp.arcs, states: hyp.states, words: hyp.words, am, lm },
        word_scores: hyp.word_scores,
        eos_score,
        score: hyp.score,
    })
}

/// Rescores `jobs` (lattice, metadata) on `workers` threads. Results come
/// back in input order.
pub fn rescore_all(
    jobs: &[(Lattice, Vec<usize>)],
    neural: &NeuralLm,
    ngram: &NgramModel,
    config: &RescoreConfig,
    workers: usize,
) -> Result<Vec<RescoreResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RescoreError::Pool(e.to_string()))?;
    pool.install(|| jobs.par_iter().map(|(l, m)| rescore(l, m, neural, ngram, config)).collect())
}
