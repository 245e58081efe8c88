//! Interpolated Kneser-Ney n-gram model with a single fixed discount.
//!
//! Training produces the model directly in backoff form (one probability per
//! seen n-gram, one backoff weight per seen context), which is also what the
//! ARPA format stores. For a seen n-gram `h w` at the highest order,
//!
//! ```text
//! P(w | h) = (c(h w) - D) / c(h .) + gamma(h) * P_lower(w | h')
//! gamma(h) = D * N1+(h .) / c(h .)
//! ```
//!
//! Lower orders use continuation counts `N1+(. h w)` in place of `c`, and the
//! unigram level interpolates with a uniform distribution over every
//! predictable word (all ids except `<s>` and `<nometa>`), so `<unk>` and
//! unseen words keep non-zero mass. Sentences are padded with `order - 1`
//! `<s>` tokens and terminated with `</s>`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

use crate::corpus::{Vocabulary, BOS, EOS, NO_META, UNK};

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("order must be at least 1")]
    BadOrder,
    #[error("discount {0} must lie strictly between 0 and 1")]
    BadDiscount(f64),
    #[error("word id {0} outside vocabulary of size {1}")]
    BadWord(usize, usize),
    #[error("ARPA line {line}: {detail}")]
    Arpa { line: usize, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NgramError>;

pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_DISCOUNT: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    /// Natural-log probability; `-inf` for context-only entries such as
    /// `<s>`, which is never predicted.
    log_prob: f64,
    /// Natural-log backoff weight, when this n-gram is also a context.
    backoff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    order: usize,
    discount: Option<f64>,
    vocab_size: usize,
    /// `tables[k - 1]` maps k-grams to entries.
    tables: Vec<HashMap<Vec<usize>, Entry>>,
}

/// Whether `id` can be the target of a prediction.
pub fn is_predictable(id: usize) -> bool {
    id != BOS && id != NO_META
}

struct Counts {
    /// Adjusted counts per order: raw at the top order, continuation below.
    adjusted: Vec<HashMap<Vec<usize>, f64>>,
    /// Per order, context -> (sum of adjusted counts, distinct followers).
    contexts: Vec<HashMap<Vec<usize>, (f64, f64)>>,
}

impl Counts {
    fn gather(sentences: &[Vec<usize>], order: usize) -> Self {
        let mut raw: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut types: Vec<HashSet<Vec<usize>>> = vec![HashSet::new(); order + 1];
        for s in sentences {
            let mut padded = vec![BOS; order - 1];
            padded.extend_from_slice(s);
            padded.push(EOS);
            for j in order - 1..padded.len() {
                *raw.entry(padded[j + 1 - order..=j].to_vec()).or_default() += 1.0;
                for k in 1..=order {
                    types[k].insert(padded[j + 1 - k..=j].to_vec());
                }
            }
        }
        let mut adjusted = vec![HashMap::new(); order];
        adjusted[order - 1] = raw;
        for k in 1..order {
            let table = &mut adjusted[k - 1];
            for gram in &types[k + 1] {
                *table.entry(gram[1..].to_vec()).or_insert(0.0) += 1.0;
            }
        }
        let mut contexts = vec![HashMap::new(); order];
        for (k, table) in adjusted.iter().enumerate() {
            for (gram, &c) in table {
                let e = contexts[k].entry(gram[..k].to_vec()).or_insert((0.0, 0.0));
                e.0 += c;
                e.1 += 1.0;
            }
        }
        Self { adjusted, contexts }
    }

    /// Interpolated KN probability at order `history.len() + 1`, backing off
    /// through unseen contexts.
    fn prob(&self, history: &[usize], word: usize, discount: f64, uniform: f64) -> f64 {
        let k = history.len();
        let lower = |s: &Self| {
            if k == 0 {
                uniform
            } else {
                s.prob(&history[1..], word, discount, uniform)
            }
        };
        let Some(&(total, distinct)) = self.contexts[k].get(history) else {
            return lower(self);
        };
        let mut gram = history.to_vec();
        gram.push(word);
        let c = self.adjusted[k].get(&gram).copied().unwrap_or(0.0);
        (c - discount).max(0.0) / total + discount * distinct / total * lower(self)
    }
}

impl NgramModel {
    /// Trains on id sequences (without `<s>`/`</s>`).
    pub fn train(sentences: &[Vec<usize>], vocab_size: usize, order: usize, discount: f64) -> Result<Self> {
        if order < 1 {
            return Err(NgramError::BadOrder);
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(NgramError::BadDiscount(discount));
        }
        if sentences.iter().all(Vec::is_empty) {
            return Err(NgramError::EmptyCorpus);
        }
        if let Some(&bad) = sentences.iter().flatten().find(|&&w| w >= vocab_size) {
            return Err(NgramError::BadWord(bad, vocab_size));
        }
        let counts = Counts::gather(sentences, order);
        let predictable = (0..vocab_size).filter(|&w| is_predictable(w)).count();
        let uniform = 1.0 / predictable as f64;

        let mut tables: Vec<HashMap<Vec<usize>, Entry>> = vec![HashMap::new(); order];
        for w in (0..vocab_size).filter(|&w| is_predictable(w)) {
            let p = counts.prob(&[], w, discount, uniform);
            tables[0].insert(vec![w], Entry { log_prob: p.ln(), backoff: None });
        }
        for k in 1..order {
            for gram in counts.adjusted[k].keys() {
                let p = counts.prob(&gram[..k], gram[k], discount, uniform);
                tables[k].insert(gram.clone(), Entry { log_prob: p.ln(), backoff: None });
            }
        }
        for k in 1..order {
            for (ctx, &(total, distinct)) in &counts.contexts[k] {
                let gamma = discount * distinct / total;
                tables[k - 1]
                    .entry(ctx.clone())
                    .or_insert(Entry {
                        log_prob: f64::NEG_INFINITY,
                        backoff: None,
                    })
                    .backoff = Some(gamma.ln());
            }
        }
        Ok(Self {
            order,
            discount: Some(discount),
            vocab_size,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> Option<f64> {
        self.discount
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Natural-log probability of `word` after `context`. Only the last
    /// `order - 1` context words are used; shorter contexts are left-padded
    /// with `<s>`. Unpredictable or out-of-range ids score as `<unk>`.
    pub fn score(&self, context: &[usize], word: usize) -> f64 {
        let n = self.order - 1;
        let mut history = Vec::with_capacity(n);
        if context.len() < n {
            history.resize(n - context.len(), BOS);
            history.extend_from_slice(context);
        } else {
            history.extend_from_slice(&context[context.len() - n..]);
        }
        self.log_prob_exact(&history, word)
    }

    /// Backoff lookup using `history` exactly as given (no padding).
    pub fn log_prob_exact(&self, history: &[usize], word: usize) -> f64 {
        let word = if word < self.vocab_size && is_predictable(word) { word } else { UNK };
        let history = &history[history.len().saturating_sub(self.order - 1)..];
        let mut backoff = 0.0;
        for start in 0..=history.len() {
            let h = &history[start..];
            let k = h.len();
            let mut gram = h.to_vec();
            gram.push(word);
            if let Some(e) = self.tables[k].get(&gram) {
                if e.log_prob.is_finite() {
                    return backoff + e.log_prob;
                }
            }
            if k > 0 {
                if let Some(bo) = self.tables[k - 1].get(h).and_then(|e| e.backoff) {
                    backoff += bo;
                }
            }
        }
        unreachable!("every predictable word has a unigram entry")
    }

    /// Log-probability of a whole sentence including `</s>`.
    pub fn sentence_log_prob(&self, words: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..=words.len() {
            let w = if i == words.len() { EOS } else { words[i] };
            total += self.score(&words[..i], w);
        }
        total
    }

    /// Every history stored as a context (those with a backoff weight), plus
    /// the empty history.
    pub fn contexts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for table in &self.tables {
            let mut ctx: Vec<Vec<usize>> = table
                .iter()
                .filter(|(_, e)| e.backoff.is_some())
                .map(|(g, _)| g.clone())
                .collect();
            ctx.sort();
            out.extend(ctx);
        }
        out
    }

    pub fn to_arpa(&self, vocab: &Vocabulary) -> String {
        let ln10 = std::f64::consts::LN_10;
        let mut out = String::from("\n\\data\\\n");
        for (k, table) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, table.len());
        }
        for (k, table) in self.tables.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            let sorted: BTreeMap<&Vec<usize>, &Entry> = table.iter().collect();
            for (gram, e) in sorted {
                let p = if e.log_prob.is_finite() { e.log_prob / ln10 } else { -99.0 };
                let words: Vec<&str> = gram.iter().map(|&w| vocab.word(w)).collect();
                let _ = write!(out, "{}\t{}", p, words.join(" "));
                if let Some(bo) = e.backoff {
                    let _ = write!(out, "\t{}", bo / ln10);
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa<R: BufRead>(reader: R, vocab: &Vocabulary) -> Result<Self> {
        let ln10 = std::f64::consts::LN_10;
        let mut declared: Vec<usize> = Vec::new();
        let mut tables: Vec<HashMap<Vec<usize>, Entry>> = Vec::new();
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut ended = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let err = |detail: String| NgramError::Arpa { line: lineno, detail };
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if trimmed == "\\data\\" {
                in_data = true;
                continue;
            }
            if trimmed == "\\end\\" {
                ended = true;
                break;
            }
            if let Some(rest) = trimmed.strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
                let k: usize = rest.parse().map_err(|_| err(format!("bad section `{trimmed}`")))?;
                if k == 0 || k > declared.len() {
                    return Err(err(format!("undeclared order {k}")));
                }
                section = Some(k);
                in_data = false;
                continue;
            }
            if in_data {
                let field = trimmed
                    .strip_prefix("ngram ")
                    .ok_or_else(|| err(format!("unexpected `{trimmed}` in header")))?;
                let (k, n) = field.split_once('=').ok_or_else(|| err("missing `=`".into()))?;
                let k: usize = k.trim().parse().map_err(|_| err("bad order".into()))?;
                let n: usize = n.trim().parse().map_err(|_| err("bad count".into()))?;
                if k != declared.len() + 1 {
                    return Err(err(format!("order {k} declared out of sequence")));
                }
                declared.push(n);
                tables.push(HashMap::with_capacity(n));
                continue;
            }
            let Some(k) = section else {
                return Err(err(format!("entry outside any section: `{trimmed}`")));
            };
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(err("expected `logprob<TAB>words[<TAB>backoff]`".into()));
            }
            let p: f64 = fields[0].parse().map_err(|_| err(format!("bad log-prob `{}`", fields[0])))?;
            let gram: Vec<usize> = fields[1]
                .split(' ')
                .map(|w| vocab.get(w).ok_or_else(|| err(format!("unknown word `{w}`"))))
                .collect::<Result<_>>()?;
            if gram.len() != k {
                return Err(err(format!("expected {k} words, got {}", gram.len())));
            }
            let backoff = match fields.get(2) {
                Some(b) => Some(b.parse::<f64>().map_err(|_| err(format!("bad backoff `{b}`")))? * ln10),
                None => None,
            };
            let log_prob = if p <= -99.0 { f64::NEG_INFINITY } else { p * ln10 };
            tables[k - 1].insert(gram, Entry { log_prob, backoff });
        }
        if !ended {
            return Err(NgramError::Arpa {
                line: 0,
                detail: "missing \\end\\".into(),
            });
        }
        if tables.is_empty() {
            return Err(NgramError::Arpa {
                line: 0,
                detail: "no n-gram sections".into(),
            });
        }
        for (k, (t, &n)) in tables.iter().zip(&declared).enumerate() {
            if t.len() != n {
                return Err(NgramError::Arpa {
                    line: 0,
                    detail: format!("{}-grams: declared {n}, found {}", k + 1, t.len()),
                });
            }
        }
        if !tables[0].get(&vec![UNK]).is_some_and(|e| e.log_prob.is_finite()) {
            return Err(NgramError::Arpa {
                line: 0,
                detail: "unigram `<unk>` missing".into(),
            });
        }
        Ok(Self {
            order: tables.len(),
            discount: None,
            vocab_size: vocab.len(),
            tables,
        })
    }
}

/// Perplexity of the n-gram model over id sequences (each terminated by
/// `</s>`, which is counted).
pub fn ngram_perplexity(model: &NgramModel, sentences: &[Vec<usize>]) -> f64 {
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in sentences {
        nll -= model.sentence_log_prob(s);
        n += s.len() + 1;
    }
    (nll / n as f64).exp()
}
