//! End-to-end synthetic experiment: corpus, n-gram, the four neural
//! models, lattices, rescoring and the co-occurrence analysis.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::corpus::{self, synthesize_corpus, EncodedRecord, SynthConfig, Vocabulary, UNK};
use crate::eval::{self, FrequentWords, Outputs, SummaryRow, TestUtterance, WerTotals, WerrReport};
use crate::lattice::{self, apply_first_pass_lm, synthesize_lattice, ConfusionModel, Lattice, LatticeSynthConfig};
use crate::neural::{NeuralLm, Variant};
use crate::ngram::{self, NgramModel};
use crate::rescore::{self, rescore_all, RescoreConfig};
use crate::train::{self, train, TrainConfig, TrainOutputs};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Ngram(#[from] ngram::NgramError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Lattice(#[from] lattice::LatticeError),
    #[error(transparent)]
    Rescore(#[from] rescore::RescoreError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Neural(#[from] crate::neural::NeuralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub entities: usize,
    pub templates: usize,
    pub relevance: f64,
    pub echo_prob: f64,
    pub topic_prob: f64,
    pub distractor_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub ngram_order: usize,
    pub ngram_discount: f64,
    /// Shared by every neural model; `variant` is overridden per model.
    pub train: TrainConfig,
    pub cache_beta: f64,
    pub lattice: LatticeSynthConfig,
    pub confusion_distance: usize,
    pub rescore: RescoreConfig,
    pub top_n: usize,
    pub bucket_ks: Vec<usize>,
    pub min_bucket: usize,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    /// Desk-scale settings: 5k training sentences, 200 rare entities.
    fn default() -> Self {
        ExperimentConfig {
            seed: 2020,
            entities: 200,
            templates: 100,
            relevance: 0.9,
            echo_prob: 0.15,
            topic_prob: 0.4,
            distractor_len: 18,
            train_size: 5000,
            valid_size: 500,
            test_size: 500,
            ngram_order: ngram::DEFAULT_ORDER,
            ngram_discount: ngram::DEFAULT_DISCOUNT,
            train: TrainConfig {
                hidden: 32,
                layers: 2,
                dropout: 0.1,
                lr: 0.5,
                min_lr: 0.0,
                momentum: 0.9,
                epochs: 12,
                batch_size: 16,
                patience: 3,
                ..TrainConfig::default()
            },
            cache_beta: 0.1,
            lattice: LatticeSynthConfig { width: 4, noise: 0.9, gap: 3.0 },
            confusion_distance: 2,
            rescore: RescoreConfig::default(),
            top_n: 30,
            bucket_ks: vec![1, 2, 3, 4],
            min_bucket: 50,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn synth_config(&self) -> SynthConfig {
        let mut c = SynthConfig::generated(self.entities, self.templates, self.seed);
        c.relevance = self.relevance;
        c.echo_prob = self.echo_prob;
        c.topic_prob = self.topic_prob;
        c.distractor_len = self.distractor_len;
        c.train_size = self.train_size;
        c.valid_size = self.valid_size;
        c.test_size = self.test_size;
        c
    }
}

/// Model labels used in every report, in a fixed order.
pub const MODELS: [&str; 4] = ["lstm", "cache", "attention", "pointer"];

pub struct ExperimentReport {
    /// Test-set perplexity per model label (plus `ngram`).
    pub perplexity: HashMap<String, f64>,
    /// Test-set WER per model label (plus `firstpass` and `oracle`).
    pub wer: HashMap<String, f64>,
    pub werr: WerrReport,
    pub summary_csv: String,
    pub werr_csv: String,
    pub lattices: usize,
    pub skipped_utterances: usize,
    pub log: Vec<String>,
    /// Wall-clock seconds spent on corpus, n-gram, training and perplexity.
    pub modelling_seconds: f64,
    /// Wall-clock seconds spent building, rescoring and analysing lattices.
    pub lattice_seconds: f64,
    pub vocab: Vocabulary,
    pub ngram: NgramModel,
    /// Trained models keyed by label, in [`MODELS`] order.
    pub models: Vec<(String, NeuralLm)>,
    /// First-pass lattices with their metadata.
    pub jobs: Vec<(Lattice, Vec<usize>)>,
}

/// Seed for the `index`-th lattice.
pub fn lattice_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Builds first-pass lattices for `test`, skipping references with
/// out-of-vocabulary words. Returns the lattices with their metadata and
/// the number skipped.
pub fn build_lattices(
    test: &[(String, EncodedRecord)],
    ngram: &NgramModel,
    confusion: &ConfusionModel,
    config: &LatticeSynthConfig,
    seed: u64,
) -> Result<(Vec<(Lattice, Vec<usize>)>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, (id, rec)) in test.iter().enumerate() {
        if rec.transcript.is_empty() || rec.transcript.contains(&UNK) {
            skipped += 1;
            continue;
        }
        let raw = synthesize_lattice(id.clone(), &rec.transcript, confusion, config, lattice_seed(seed, i))?;
        out.push((apply_first_pass_lm(&raw, ngram)?, rec.metadata.clone()));
    }
    Ok((out, skipped))
}

fn corpus_wer(test: &[TestUtterance], outputs: &Outputs) -> f64 {
    let mut t = WerTotals::default();
    for u in test {
        t.add(&eval::wer(&outputs[&u.id], &u.record.transcript));
    }
    t.wer()
}

pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    let mut log = Vec::new();
    let clock = Instant::now();
    let note = |log: &mut Vec<String>, msg: String| log.push(format!("[{:7.1}s] {msg}", clock.elapsed().as_secs_f64()));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let data = synthesize_corpus(&config.synth_config())?;
    let vocab = Vocabulary::build(&data.train);
    let encode = |rs: &[corpus::UtteranceRecord]| -> Vec<EncodedRecord> { rs.iter().map(|r| vocab.encode_record(r)).collect() };
    let (train_set, valid_set, test_set) = (encode(&data.train), encode(&data.valid), encode(&data.test));
    note(&mut log, format!("corpus: {} train, vocabulary {}", train_set.len(), vocab.len()));
    if let Some(dir) = out_dir {
        corpus::save_corpus(&dir.join("train.jsonl"), &data.train)?;
        corpus::save_corpus(&dir.join("valid.jsonl"), &data.valid)?;
        corpus::save_corpus(&dir.join("test.jsonl"), &data.test)?;
        vocab.save(&dir.join("vocab.txt"))?;
    }

    let sentences: Vec<Vec<usize>> = train_set.iter().map(|r| r.transcript.clone()).collect();
    let ngram = NgramModel::train(&sentences, vocab.len(), config.ngram_order, config.ngram_discount)?;
    let test_sentences: Vec<Vec<usize>> = test_set.iter().map(|r| r.transcript.clone()).collect();
    let mut perplexity = HashMap::new();
    perplexity.insert("ngram".to_string(), ngram::ngram_perplexity(&ngram, &test_sentences));

    let mut models: Vec<(String, NeuralLm)> = Vec::new();
    for variant in [Variant::Lstm, Variant::Attention, Variant::Pointer] {
        let cfg = TrainConfig { variant, ..config.train.clone() };
        let label = variant.tag().to_string();
        let ckpt = out_dir.map(|d| d.join(format!("{label}.ckpt")));
        let metrics = out_dir.map(|d| d.join(format!("{label}.metrics.tsv")));
        if let Some(m) = &metrics {
            if m.exists() {
                fs::remove_file(m)?;
            }
        }
        let outputs = TrainOutputs { checkpoint: ckpt.as_deref(), metrics_log: metrics.as_deref() };
        let result = train(&cfg, &vocab, &train_set, &valid_set, outputs)?;
        note(&mut log, format!("trained {label}: best epoch {}, valid ppl {:.4}", result.best_epoch, result.best_valid_ppl));
        if variant == Variant::Lstm {
            let cache = result.model.with_variant(Variant::Cache { beta: config.cache_beta })?;
            models.push((label.clone(), result.model));
            models.push(("cache".to_string(), cache));
        } else {
            models.push((label, result.model));
        }
    }
    for (label, m) in &models {
        perplexity.insert(label.clone(), eval::perplexity(m, &test_set, config.workers)?);
    }

    let modelling_seconds = clock.elapsed().as_secs_f64();
    let confusion = ConfusionModel::build(&vocab, config.confusion_distance);
    let tests: Vec<(String, EncodedRecord)> =
        data.test.iter().map(|r| r.id.clone()).zip(test_set.iter().cloned()).collect();
    let (jobs, skipped) = build_lattices(&tests, &ngram, &confusion, &config.lattice, config.seed)?;
    if let Some(dir) = out_dir {
        let lats: Vec<Lattice> = jobs.iter().map(|(l, _)| l.clone()).collect();
        fs::write(dir.join("test.lattices"), lattice::write_lattices(&lats, &vocab))?;
    }
    let by_id: HashMap<&str, &EncodedRecord> = tests.iter().map(|(id, r)| (id.as_str(), r)).collect();
    let test_utts: Vec<TestUtterance> = jobs
        .iter()
        .map(|(l, _)| TestUtterance { id: l.id.clone(), record: by_id[l.id.as_str()].clone() })
        .collect();
    let mut first_pass = Outputs::new();
    let mut oracle = Outputs::new();
    for ((l, _), u) in jobs.iter().zip(&test_utts) {
        first_pass.insert(l.id.clone(), l.first_pass_best(config.rescore.acoustic_scale)?.words);
        // every synthetic lattice contains its reference
        oracle.insert(l.id.clone(), u.record.transcript.clone());
    }
    note(&mut log, format!("lattices: {} built, {skipped} skipped", jobs.len()));

    let mut wer = HashMap::new();
    wer.insert("firstpass".to_string(), corpus_wer(&test_utts, &first_pass));
    wer.insert("oracle".to_string(), corpus_wer(&test_utts, &oracle));
    let mut rescored: Vec<(String, Outputs)> = Vec::new();
    for (label, m) in &models {
        let results = rescore_all(&jobs, m, &ngram, &config.rescore, config.workers)?;
        if let Some(dir) = out_dir {
            let lines: String = results.iter().map(|r| r.to_line(&vocab) + "\n").collect();
            fs::write(dir.join(format!("{label}.rescored.tsv")), lines)?;
        }
        let outputs: Outputs = results.into_iter().map(|r| (r.id.clone(), r.path.words)).collect();
        wer.insert(label.clone(), corpus_wer(&test_utts, &outputs));
        note(&mut log, format!("rescored with {label}: WER {:.4}", wer[label]));
        rescored.push((label.clone(), outputs));
    }

    let frequent = FrequentWords::new(&vocab, config.top_n);
    let werr = eval::werr_report(&test_utts, &first_pass, &rescored, &frequent, &config.bucket_ks, config.min_bucket)?;
    for n in &werr.notices {
        note(&mut log, n.clone());
    }

    let mut rows = vec![SummaryRow {
        model: "firstpass".into(),
        split: "test".into(),
        perplexity: Some(perplexity["ngram"]),
        wer: Some(wer["firstpass"]),
    }];
    for label in MODELS {
        rows.push(SummaryRow {
            model: label.into(),
            split: "test".into(),
            perplexity: Some(perplexity[label]),
            wer: Some(wer[label]),
        });
    }
    let summary_csv = eval::summary_csv(&rows);
    let werr_csv = werr.to_csv();
    if let Some(dir) = out_dir {
        fs::write(dir.join("summary.csv"), &summary_csv)?;
        fs::write(dir.join("werr.csv"), &werr_csv)?;
    }
    Ok(ExperimentReport {
        perplexity,
        wer,
        werr,
        summary_csv,
        werr_csv,
        lattices: jobs.len(),
        skipped_utterances: skipped,
        log,
        modelling_seconds,
        lattice_seconds: clock.elapsed().as_secs_f64() - modelling_seconds,
        vocab,
        ngram,
        models,
        jobs,
    })
}
