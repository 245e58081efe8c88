//! Perplexity, word error rate and the co-occurrence WERR analysis.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{EncodedRecord, Vocabulary, NUM_RESERVED};
use crate::neural::{NeuralError, NeuralLm};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("utterance `{id}` missing from {source_name}")]
    MissingOutput { id: String, source_name: String },
    #[error("{source_name} has output for unknown utterance `{id}`")]
    ExtraOutput { id: String, source_name: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `exp(total NLL / predicted tokens)`, with `</s>` predicted and OOVs
/// scored as `<unk>`. Records are scored on `workers` threads; the sum is
/// taken in record order so the result does not depend on `workers`.
pub fn perplexity(model: &NeuralLm, records: &[EncodedRecord], workers: usize) -> Result<f64> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let per_record: Vec<(f64, usize)> = pool.install(|| {
        records
            .par_iter()
            .map(|r| model.token_log_probs(r).map(|lp| (lp.iter().sum::<f64>(), lp.len())))
            .collect::<std::result::Result<_, _>>()
    })?;
    let (mut nll, mut tokens) = (0.0, 0usize);
    for (lp, n) in per_record {
        nll -= lp;
        tokens += n;
    }
    Ok(if tokens == 0 { 1.0 } else { (nll / tokens as f64).exp() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// An empty reference with a non-empty hypothesis has no defined WER.
    pub fn is_undefined(&self) -> bool {
        self.ref_len == 0 && self.errors() > 0
    }

    /// `(S + I + D) / N`; `+inf` when undefined, 0 for two empty sequences.
    pub fn wer(&self) -> f64 {
        match (self.errors(), self.ref_len) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }
}

/// Levenshtein alignment with unit costs. Among optimal alignments the
/// breakdown prefers substitutions, then insertions, then deletions.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> WerBreakdown {
    let (n, m) = (reference.len(), hypothesis.len());
    // d[i][j]: distance between reference[..i] and hypothesis[..j]
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let mut out = WerBreakdown { ref_len: n, ..Default::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                if !same {
                    out.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            out.insertions += 1;
            j -= 1;
        } else {
            out.deletions += 1;
            i -= 1;
        }
    }
    out
}

/// Corpus-level WER accumulator; undefined utterances are counted apart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerTotals {
    pub errors: usize,
    pub ref_words: usize,
    pub utterances: usize,
    pub excluded: usize,
}

impl WerTotals {
    pub fn add(&mut self, b: &WerBreakdown) {
        if b.is_undefined() {
            self.excluded += 1;
        } else {
            self.errors += b.errors();
            self.ref_words += b.ref_len;
            self.utterances += 1;
        }
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors as f64 / self.ref_words as f64
        }
    }
}

/// The `top_n` most frequent training words (by [`Vocabulary::frequency_ranked`]).
#[derive(Clone, Debug)]
pub struct FrequentWords {
    excluded: HashSet<usize>,
}

impl FrequentWords {
    pub fn new(vocab: &Vocabulary, top_n: usize) -> Self {
        let excluded = vocab
            .frequency_ranked()
            .into_iter()
            .filter(|&w| w >= NUM_RESERVED)
            .take(top_n)
            .collect();
        FrequentWords { excluded }
    }

    pub fn contains(&self, word: usize) -> bool {
        self.excluded.contains(&word)
    }
}

/// Distinct words present in both `transcript` and `metadata`, minus
/// sentinels and the frequent words.
pub fn cooccurring_words(transcript: &[usize], metadata: &[usize], frequent: &FrequentWords) -> BTreeSet<usize> {
    let meta: HashSet<usize> = metadata.iter().copied().collect();
    transcript
        .iter()
        .copied()
        .filter(|&w| w >= NUM_RESERVED && meta.contains(&w) && !frequent.contains(w))
        .collect()
}

/// Hypothesis word sequences keyed by utterance id.
pub type Outputs = HashMap<String, Vec<usize>>;

/// One record of the test set as seen by the analysis.
#[derive(Clone, Debug)]
pub struct TestUtterance {
    pub id: String,
    pub record: EncodedRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBucketScore {
    pub model: String,
    pub wer: f64,
    pub werr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceBucket {
    pub k: usize,
    pub members: Vec<String>,
    pub wer_firstpass: f64,
    pub models: Vec<ModelBucketScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WerrReport {
    pub buckets: Vec<CooccurrenceBucket>,
    /// One line per omitted bucket.
    pub notices: Vec<String>,
}

/// Relative WER reduction against the first pass.
pub fn werr(wer_firstpass: f64, wer_model: f64) -> f64 {
    if wer_firstpass == 0.0 {
        if wer_model == 0.0 { 0.0 } else { f64::NEG_INFINITY }
    } else {
        (wer_firstpass - wer_model) / wer_firstpass
    }
}

fn check_ids(test: &[TestUtterance], outputs: &Outputs, name: &str) -> Result<()> {
    let ids: HashSet<&str> = test.iter().map(|t| t.id.as_str()).collect();
    if let Some(t) = test.iter().find(|t| !outputs.contains_key(&t.id)) {
        return Err(EvalError::MissingOutput { id: t.id.clone(), source_name: name.to_string() });
    }
    let mut extra: Vec<&String> = outputs.keys().filter(|k| !ids.contains(k.as_str())).collect();
    extra.sort();
    if let Some(id) = extra.first() {
        return Err(EvalError::ExtraOutput { id: id.to_string(), source_name: name.to_string() });
    }
    Ok(())
}

fn bucket_wer(members: &[&TestUtterance], outputs: &Outputs) -> f64 {
    let mut totals = WerTotals::default();
    for t in members {
        totals.add(&wer(&outputs[&t.id], &t.record.transcript));
    }
    totals.wer()
}

/// Groups test utterances by their number of co-occurring words and
/// reports first-pass and per-model WER and WERR for each `k` in `ks`.
/// Buckets with fewer than `min_size` members are omitted with a notice.
pub fn werr_report(
    test: &[TestUtterance],
    first_pass: &Outputs,
    models: &[(String, Outputs)],
    frequent: &FrequentWords,
    ks: &[usize],
    min_size: usize,
) -> Result<WerrReport> {
    check_ids(test, first_pass, "first-pass outputs")?;
    for (name, out) in models {
        check_ids(test, out, name)?;
    }
    let mut by_k: BTreeMap<usize, Vec<&TestUtterance>> = BTreeMap::new();
    for t in test {
        let k = cooccurring_words(&t.record.transcript, &t.record.metadata, frequent).len();
        by_k.entry(k).or_default().push(t);
    }
    let mut report = WerrReport { buckets: Vec::new(), notices: Vec::new() };
    for &k in ks {
        let members = by_k.get(&k).map_or(&[][..], Vec::as_slice);
        if members.len() < min_size {
            report.notices.push(format!("bucket k={k} omitted: {} utterances < minimum {min_size}", members.len()));
            continue;
        }
        let fp = bucket_wer(members, first_pass);
        let scores = models
            .iter()
            .map(|(name, out)| {
                let w = bucket_wer(members, out);
                ModelBucketScore { model: name.clone(), wer: w, werr: werr(fp, w) }
            })
            .collect();
        report.buckets.push(CooccurrenceBucket {
            k,
            members: members.iter().map(|t| t.id.clone()).collect(),
            wer_firstpass: fp,
            models: scores,
        });
    }
    Ok(report)
}

impl WerrReport {
    /// `bucket_k,model,n_utts,wer_firstpass,wer_model,werr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket_k,model,n_utts,wer_firstpass,wer_model,werr\n");
        for b in &self.buckets {
            for m in &b.models {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{:.6}",
                    b.k,
                    m.model,
                    b.members.len(),
                    b.wer_firstpass,
                    m.wer,
                    m.werr
                );
            }
        }
        s
    }

    pub fn bucket(&self, k: usize) -> Option<&CooccurrenceBucket> {
        self.buckets.iter().find(|b| b.k == k)
    }

    pub fn werr_of(&self, k: usize, model: &str) -> Option<f64> {
        self.bucket(k)?.models.iter().find(|m| m.model == model).map(|m| m.werr)
    }
}

/// One row of the `model,split,perplexity,wer` summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub split: String,
    pub perplexity: Option<f64>,
    pub wer: Option<f64>,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut s = String::from("model,split,perplexity,wer\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.split, fmt(r.perplexity), fmt(r.wer));
    }
    s
}
