//! `ctxlm`: command-line front end for the pipeline stages.

mod settings;

use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use ctxlm::corpus::{self, tokenize, EncodedRecord, UtteranceRecord, Vocabulary};
use ctxlm::eval::{self, FrequentWords, Outputs, SummaryRow, TestUtterance, WerTotals};
use ctxlm::experiment::build_lattices;
use ctxlm::lattice::{parse_lattices, write_lattices, ConfusionModel, Lattice};
use ctxlm::neural::{NeuralLm, Variant};
use ctxlm::ngram::{self, NgramModel};
use ctxlm::rescore::rescore_all;
use ctxlm::train::{train, TrainOutputs};
use ctxlm::{checkpoint, lattice};

use settings::*;

#[derive(Parser)]
#[command(name = "ctxlm", about = "Metadata-conditioned language models and lattice rescoring", disable_version_flag = true)]
struct Cli {
    /// Print the tool version and the format version of every artifact.
    #[arg(long)]
    version: bool,
    /// Flat `key = value` settings file, applied before flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/valid/test corpus and its vocabulary.
    SynthData(SynthDataArgs),
    /// Build first-pass lattices for a corpus split.
    SynthLattices(SynthLatticesArgs),
    /// Train a neural LM (checkpoint + metrics log) or, with
    /// `--variant ngram`, a Kneser-Ney model (ARPA file).
    Train(TrainArgs),
    /// Perplexity of a checkpoint or ARPA model, one line per split.
    Ppl(PplArgs),
    /// Rescore lattices and write the best path per utterance.
    Rescore(RescoreArgs),
    /// WER of one or more hypothesis files against a corpus split.
    EvalWer(EvalWerArgs),
    /// WERR per co-occurrence bucket.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    relevance: Option<f64>,
    #[arg(long)]
    echo_prob: Option<f64>,
    #[arg(long)]
    topic_prob: Option<f64>,
    #[arg(long)]
    distractor_len: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Args)]
struct SynthLatticesArgs {
    /// Corpus split whose transcripts are the references.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// First-pass n-gram model.
    #[arg(long)]
    arpa: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    gap: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// `lstm`, `cache`, `attention`, `pointer` or `ngram`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint, or ARPA file for the n-gram model.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log (appended); defaults to `<out>.metrics.tsv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct PplArgs {
    #[arg(long, conflicts_with = "arpa", required_unless_present = "arpa")]
    model: Option<PathBuf>,
    #[arg(long)]
    arpa: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    /// Corpus splits; repeat for several.
    #[arg(long, required = true)]
    test: Vec<PathBuf>,
    #[arg(long)]
    cache_beta: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RescoreArgs {
    #[arg(long)]
    lattices: PathBuf,
    /// Corpus split supplying each utterance's metadata.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, required_unless_present = "first_pass")]
    model: Option<PathBuf>,
    #[arg(long, required_unless_present = "first_pass")]
    arpa: Option<PathBuf>,
    /// Write the first-pass best paths instead of rescoring.
    #[arg(long)]
    first_pass: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also dump each best path in the lattice text format.
    #[arg(long)]
    dump_lattices: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    /// History words that merge hypotheses; `inf` disables merging.
    #[arg(long)]
    k: Option<String>,
    /// Hypotheses kept per lattice state; `inf` keeps all.
    #[arg(long)]
    beam: Option<String>,
    #[arg(long)]
    acoustic_scale: Option<f64>,
    #[arg(long)]
    cache_beta: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalWerArgs {
    /// Reference corpus split.
    #[arg(long)]
    reference: PathBuf,
    /// `name=path` of a best-path file; repeat for several.
    #[arg(long = "hyp", required = true)]
    hyps: Vec<String>,
    /// `name=value` perplexity to include in the summary.
    #[arg(long = "ppl")]
    ppls: Vec<String>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the `model,split,perplexity,wer` summary here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    reference: PathBuf,
    /// Vocabulary whose training counts rank the frequent words.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    first_pass: PathBuf,
    /// `name=path` of a rescored best-path file; repeat for several.
    #[arg(long = "hyp", required = true)]
    hyps: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    min_bucket: Option<usize>,
}

/// An error tagged with a short machine-readable kind.
struct Failure {
    kind: &'static str,
    error: anyhow::Error,
}

trait Kind<T> {
    fn kind(self, kind: &'static str) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Kind<T> for std::result::Result<T, E> {
    fn kind(self, kind: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure { kind, error: e.into() })
    }
}

type Outcome = std::result::Result<(), Failure>;

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn read_config(path: &Option<PathBuf>) -> std::result::Result<Vec<(String, String)>, Failure> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).kind("io")?;
            parse_file(&text).with_context(|| format!("in {}", p.display())).kind("config")
        }
    }
}

fn announce<S: Settings>(command: &str, s: &S) {
    eprint!("# {command} resolved config\n{}", s.describe());
}

fn load_vocab(path: &Path) -> std::result::Result<Vocabulary, Failure> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display())).kind("corpus")
}

fn load_records(path: &Path) -> std::result::Result<Vec<UtteranceRecord>, Failure> {
    corpus::load_corpus(path).with_context(|| format!("loading corpus {}", path.display())).kind("corpus")
}

fn load_arpa(path: &Path, vocab: &Vocabulary) -> std::result::Result<NgramModel, Failure> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display())).kind("io")?;
    NgramModel::from_arpa(BufReader::new(file), vocab)
        .with_context(|| format!("reading ARPA model {}", path.display()))
        .kind("ngram")
}

fn load_neural(path: &Path, vocab: &Vocabulary, cache_beta: Option<f64>) -> std::result::Result<NeuralLm, Failure> {
    let model = NeuralLm::load(path, vocab).with_context(|| format!("loading checkpoint {}", path.display())).kind("model")?;
    match cache_beta {
        None => Ok(model),
        Some(beta) => model.with_variant(Variant::Cache { beta }).kind("model"),
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).kind("io")?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).kind("io")
}

fn split_named(arg: &str) -> std::result::Result<(String, String), Failure> {
    arg.split_once('=')
        .map(|(n, v)| (n.to_string(), v.to_string()))
        .ok_or_else(|| anyhow!("expected name=value, got `{arg}`"))
        .kind("usage")
}

/// Reads `id<TAB>words[<TAB>score]` lines.
fn load_outputs(path: &Path, vocab: &Vocabulary) -> std::result::Result<Outputs, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).kind("io")?;
    let mut out = Outputs::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default();
        let words = fields
            .next()
            .ok_or_else(|| anyhow!("{}:{}: expected id<TAB>words", path.display(), n + 1))
            .kind("format")?;
        if out.insert(id.to_string(), vocab.encode(&tokenize(words))).is_some() {
            return Err(anyhow!("{}:{}: duplicate utterance `{id}`", path.display(), n + 1)).kind("format");
        }
    }
    Ok(out)
}

fn test_utterances(records: &[UtteranceRecord], vocab: &Vocabulary) -> Vec<TestUtterance> {
    records.iter().map(|r| TestUtterance { id: r.id.clone(), record: vocab.encode_record(r) }).collect()
}

fn synth_data(a: &SynthDataArgs, file: &[(String, String)], seed: Option<u64>) -> Outcome {
    let mut s = SynthSettings::default();
    resolve(
        &mut s,
        file,
        &[
            ("seed", some(&seed)),
            ("entities", some(&a.entities)),
            ("templates", some(&a.templates)),
            ("relevance", some(&a.relevance)),
            ("echo_prob", some(&a.echo_prob)),
            ("topic_prob", some(&a.topic_prob)),
            ("distractor_len", some(&a.distractor_len)),
            ("train_size", some(&a.train_size)),
            ("valid_size", some(&a.valid_size)),
            ("test_size", some(&a.test_size)),
        ],
    )
    .kind("config")?;
    announce("synth-data", &s);
    let data = corpus::synthesize_corpus(&s.experiment().synth_config()).kind("corpus")?;
    let vocab = Vocabulary::build(&data.train);
    fs::create_dir_all(&a.out_dir).kind("io")?;
    for (name, recs) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        corpus::save_corpus(&a.out_dir.join(format!("{name}.jsonl")), recs).kind("io")?;
    }
    vocab.save(&a.out_dir.join("vocab.txt")).kind("io")?;
    println!(
        "wrote {} train, {} valid, {} test records and a {}-word vocabulary to {}",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        vocab.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn synth_lattices(a: &SynthLatticesArgs, file: &[(String, String)], seed: Option<u64>) -> Outcome {
    let mut s = LatticeSettings::default();
    resolve(
        &mut s,
        file,
        &[("seed", some(&seed)), ("width", some(&a.width)), ("noise", some(&a.noise)), ("gap", some(&a.gap))],
    )
    .kind("config")?;
    announce("synth-lattices", &s);
    let vocab = load_vocab(&a.vocab)?;
    let records = load_records(&a.corpus)?;
    let ngram = load_arpa(&a.arpa, &vocab)?;
    let confusion = ConfusionModel::build(&vocab, s.confusion_distance);
    let tests: Vec<(String, EncodedRecord)> = records.iter().map(|r| (r.id.clone(), vocab.encode_record(r))).collect();
    let (jobs, skipped) = build_lattices(&tests, &ngram, &confusion, &s.synth, s.seed).kind("lattice")?;
    let lattices: Vec<Lattice> = jobs.into_iter().map(|(l, _)| l).collect();
    write(&a.out, &write_lattices(&lattices, &vocab))?;
    println!("wrote {} lattices to {} ({skipped} references skipped)", lattices.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, file: &[(String, String)], seed: Option<u64>) -> Outcome {
    let file_variant = file.iter().rev().find(|(k, _)| k == "variant").map(|(_, v)| v.clone());
    let variant = a.variant.clone().or(file_variant).unwrap_or_else(|| "lstm".into());
    let vocab = load_vocab(&a.vocab)?;
    let train_set = load_records(&a.train)?;

    if variant == "ngram" {
        let mut s = NgramSettings::default();
        resolve(&mut s, file, &[("order", some(&a.order))]).kind("config")?;
        announce("train", &s);
        let sentences: Vec<Vec<usize>> = train_set.iter().map(|r| vocab.encode(&r.transcript)).collect();
        let model = NgramModel::train(&sentences, vocab.len(), s.order, s.discount).kind("ngram")?;
        write(&a.out, &model.to_arpa(&vocab))?;
        println!("wrote {}-gram model to {}", s.order, a.out.display());
        return Ok(());
    }
    if a.order.is_some() {
        return Err(anyhow!("--order applies only to --variant ngram")).kind("usage");
    }
    let mut s = TrainSettings::default();
    resolve(
        &mut s,
        file,
        &[
            ("seed", some(&seed)),
            ("beta", some(&a.beta)),
            ("variant", Some(variant)),
            ("epochs", some(&a.epochs)),
            ("hidden", some(&a.hidden)),
            ("layers", some(&a.layers)),
            ("lr", some(&a.lr)),
        ],
    )
    .kind("config")?;
    announce("train", &s);
    let valid_path = a.valid.as_ref().ok_or_else(|| anyhow!("--valid is required for neural models")).kind("usage")?;
    let encode = |rs: &[UtteranceRecord]| -> Vec<EncodedRecord> { rs.iter().map(|r| vocab.encode_record(r)).collect() };
    let (train_enc, valid_enc) = (encode(&train_set), encode(&load_records(valid_path)?));
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.tsv");
        PathBuf::from(p)
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).kind("io")?;
    }
    let outputs = TrainOutputs { checkpoint: Some(&a.out), metrics_log: Some(&metrics) };
    let result = train(&s.0, &vocab, &train_enc, &valid_enc, outputs).kind("train")?;
    for m in &result.metrics {
        println!("{}", m.to_line());
    }
    println!(
        "best epoch {} valid perplexity {:.4}; checkpoint {}",
        result.best_epoch,
        result.best_valid_ppl,
        a.out.display()
    );
    Ok(())
}

fn ppl(a: &PplArgs, file: &[(String, String)]) -> Outcome {
    let mut s = PplSettings::default();
    resolve(&mut s, file, &[("workers", some(&a.workers)), ("cache_beta", some(&a.cache_beta))]).kind("config")?;
    announce("ppl", &s);
    let vocab = load_vocab(&a.vocab)?;
    let scorer: Box<dyn Fn(&[EncodedRecord]) -> std::result::Result<f64, Failure>> = match (&a.model, &a.arpa) {
        (Some(path), _) => {
            let model = load_neural(path, &vocab, s.cache_beta)?;
            let workers = s.workers;
            Box::new(move |recs| eval::perplexity(&model, recs, workers).kind("eval"))
        }
        (None, Some(path)) => {
            let model = load_arpa(path, &vocab)?;
            Box::new(move |recs| {
                let sents: Vec<Vec<usize>> = recs.iter().map(|r| r.transcript.clone()).collect();
                Ok(ngram::ngram_perplexity(&model, &sents))
            })
        }
        (None, None) => return Err(anyhow!("one of --model or --arpa is required")).kind("usage"),
    };
    for path in &a.test {
        let recs: Vec<EncodedRecord> = load_records(path)?.iter().map(|r| vocab.encode_record(r)).collect();
        let split = path.file_stem().map_or("split".into(), |s| s.to_string_lossy().into_owned());
        println!("{split}\t{:.6}", scorer(&recs)?);
    }
    Ok(())
}

fn rescore_cmd(a: &RescoreArgs, file: &[(String, String)]) -> Outcome {
    let mut s = RescoreSettings::default();
    resolve(
        &mut s,
        file,
        &[
            ("lambda", some(&a.lambda)),
            ("k", a.k.clone()),
            ("beam", a.beam.clone()),
            ("acoustic_scale", some(&a.acoustic_scale)),
            ("workers", some(&a.workers)),
            ("cache_beta", some(&a.cache_beta)),
        ],
    )
    .kind("config")?;
    s.config.validate().kind("config")?;
    announce("rescore", &s);
    let vocab = load_vocab(&a.vocab)?;
    let text = fs::read_to_string(&a.lattices).with_context(|| format!("reading {}", a.lattices.display())).kind("io")?;
    let lattices = parse_lattices(&text, &vocab).kind("lattice")?;

    if a.first_pass {
        let mut out = String::new();
        for l in &lattices {
            let best = l.first_pass_best(s.config.acoustic_scale).kind("lattice")?;
            out += &format!("{}\t{}\t{}\n", l.id, vocab.decode(&best.words).join(" "), best.score(l, s.config.acoustic_scale));
        }
        write(&a.out, &out)?;
        println!("wrote {} first-pass paths to {}", lattices.len(), a.out.display());
        return Ok(());
    }

    let records = load_records(&a.corpus)?;
    let metadata: HashMap<&str, Vec<usize>> =
        records.iter().map(|r| (r.id.as_str(), vocab.encode_metadata(&r.metadata))).collect();
    let mut jobs = Vec::with_capacity(lattices.len());
    for l in lattices {
        let meta = metadata
            .get(l.id.as_str())
            .ok_or_else(|| anyhow!("no corpus record for lattice `{}`", l.id))
            .kind("lattice")?
            .clone();
        jobs.push((l, meta));
    }
    let (model_path, arpa_path) = match (&a.model, &a.arpa) {
        (Some(m), Some(g)) => (m, g),
        _ => return Err(anyhow!("--model and --arpa are required unless --first-pass")).kind("usage"),
    };
    let neural = load_neural(model_path, &vocab, s.cache_beta)?;
    let ngram = load_arpa(arpa_path, &vocab)?;
    let results = rescore_all(&jobs, &neural, &ngram, &s.config, s.workers).kind("rescore")?;
    let lines: String = results.iter().map(|r| r.to_line(&vocab) + "\n").collect();
    write(&a.out, &lines)?;
    if let Some(dump) = &a.dump_lattices {
        let chains = results
            .iter()
            .zip(&jobs)
            .map(|(r, (l, _))| r.to_lattice(l))
            .collect::<std::result::Result<Vec<_>, _>>()
            .kind("rescore")?;
        write(dump, &lattice::write_lattices(&chains, &vocab))?;
    }
    println!("rescored {} lattices into {}", results.len(), a.out.display());
    Ok(())
}

fn eval_wer(a: &EvalWerArgs) -> Outcome {
    let records = load_records(&a.reference)?;
    // words are compared as strings, so no vocabulary is needed
    let refs: HashMap<&str, Vec<String>> = records.iter().map(|r| (r.id.as_str(), r.transcript.clone())).collect();
    let ppls: HashMap<String, f64> = a
        .ppls
        .iter()
        .map(|p| {
            let (n, v) = split_named(p)?;
            Ok((n, parse_value::<f64>("ppl", &v).kind("usage")?))
        })
        .collect::<std::result::Result<_, Failure>>()?;
    let mut rows = Vec::new();
    for arg in &a.hyps {
        let (name, path) = split_named(arg)?;
        let text = fs::read_to_string(&path).with_context(|| format!("reading {path}")).kind("io")?;
        let mut hyps: HashMap<String, Vec<String>> = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut f = line.split('\t');
            let id = f.next().unwrap_or_default().to_string();
            hyps.insert(id, tokenize(f.next().unwrap_or_default()));
        }
        let mut totals = WerTotals::default();
        let (mut subs, mut ins, mut dels) = (0, 0, 0);
        for r in &records {
            let hyp = hyps
                .get(&r.id)
                .ok_or_else(|| anyhow!("{path} has no output for utterance `{}`", r.id))
                .kind("eval")?;
            let b = eval::wer(hyp, &refs[r.id.as_str()]);
            totals.add(&b);
            if !b.is_undefined() {
                (subs, ins, dels) = (subs + b.substitutions, ins + b.insertions, dels + b.deletions);
            }
        }
        if let Some(extra) = hyps.keys().filter(|id| !refs.contains_key(id.as_str())).min() {
            return Err(anyhow!("{path} has output for unknown utterance `{extra}`")).kind("eval");
        }
        println!(
            "{name}\twer {:.6}\tsub {subs}\tins {ins}\tdel {dels}\tref_words {}\tutterances {}\texcluded {}",
            totals.wer(),
            totals.ref_words,
            totals.utterances,
            totals.excluded
        );
        rows.push(SummaryRow { model: name.clone(), split: a.split.clone(), perplexity: ppls.get(&name).copied(), wer: Some(totals.wer()) });
    }
    if let Some(out) = &a.out {
        write(out, &eval::summary_csv(&rows))?;
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs, file: &[(String, String)]) -> Outcome {
    let mut s = AnalyzeSettings::default();
    resolve(&mut s, file, &[("top_n", some(&a.top_n)), ("min_bucket", some(&a.min_bucket))]).kind("config")?;
    announce("analyze", &s);
    let vocab = load_vocab(&a.vocab)?;
    let test = test_utterances(&load_records(&a.reference)?, &vocab);
    let first_pass = load_outputs(&a.first_pass, &vocab)?;
    let mut models = Vec::new();
    for arg in &a.hyps {
        let (name, path) = split_named(arg)?;
        models.push((name, load_outputs(Path::new(&path), &vocab)?));
    }
    let frequent = FrequentWords::new(&vocab, s.top_n);
    let report = eval::werr_report(&test, &first_pass, &models, &frequent, &s.ks, s.min_bucket).kind("eval")?;
    for n in &report.notices {
        eprintln!("notice: {n}");
    }
    let csv = report.to_csv();
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn print_versions() {
    println!("ctxlm {}", env!("CARGO_PKG_VERSION"));
    println!("checkpoint format {}", checkpoint::FORMAT_VERSION);
    println!("corpus format jsonl 1 (id, transcript, metadata)");
    println!("vocabulary format 1 (word<TAB>id<TAB>count)");
    println!("lattice text format 1 (UTT / src dst word am lm / F state)");
    println!("n-gram format ARPA");
    println!("metrics log format 1 (epoch<TAB>step<TAB>lr<TAB>train_nll<TAB>valid_ppl)");
    println!("csv formats: bucket_k,model,n_utts,wer_firstpass,wer_model,werr; model,split,perplexity,wer");
}

fn run(cli: Cli) -> Outcome {
    if cli.version {
        print_versions();
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(anyhow!("no subcommand given; see --help")).kind("usage");
    };
    let file = read_config(&cli.config)?;
    match command {
        Command::SynthData(a) => synth_data(a, &file, cli.seed),
        Command::SynthLattices(a) => synth_lattices(a, &file, cli.seed),
        Command::Train(a) => train_cmd(a, &file, cli.seed),
        Command::Ppl(a) => ppl(a, &file),
        Command::Rescore(a) => rescore_cmd(a, &file),
        Command::EvalWer(a) => {
            if !file.is_empty() {
                return Err(anyhow!("eval-wer takes no config keys")).kind("config");
            }
            eval_wer(a)
        }
        Command::Analyze(a) => analyze(a, &file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[usage]: {}", e.render().to_string().trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { kind, error }) => {
            // wrapped errors often repeat their source's text
            let mut message = String::new();
            for cause in error.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    message += if message.is_empty() { "" } else { ": " };
                    message += &cause;
                }
            }
            eprintln!("error[{kind}]: {message}");
            ExitCode::from(if kind == "usage" { 2 } else { 1 })
        }
    }
}
