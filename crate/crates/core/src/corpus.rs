//! Utterance records, the shared word vocabulary, and a synthetic corpus
//! generator whose metadata relevance is controllable.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("line {line}: duplicate record id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("probability `{name}` = {value} is outside [0, 1]")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NO_META: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_WORDS: [&str; NUM_RESERVED] = ["<unk>", "<s>", "</s>", "<nometa>"];

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub transcript: Vec<String>,
    pub metadata: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    transcript: String,
    metadata: String,
}

impl UtteranceRecord {
    pub fn new(id: impl Into<String>, transcript: &str, metadata: &str) -> Self {
        Self {
            id: id.into(),
            transcript: tokenize(transcript),
            metadata: tokenize(metadata),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RecordLine {
            id: self.id.clone(),
            transcript: self.transcript.join(" "),
            metadata: self.metadata.join(" "),
        })
        .expect("record serialisation cannot fail")
    }
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            detail: e.to_string(),
        })?;
        let record = UtteranceRecord::new(parsed.id, &parsed.transcript, &parsed.metadata);
        if record.id.is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno,
                detail: "empty id".into(),
            });
        }
        if record.transcript.is_empty() {
            return Err(CorpusError::Malformed {
                line: lineno,
                detail: "empty transcript".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: lineno,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_corpus(path: &Path) -> Result<Vec<UtteranceRecord>> {
    read_corpus(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_corpus<W: Write>(mut w: W, records: &[UtteranceRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus(&mut w, records)?;
    w.flush()?;
    Ok(())
}

/// Word/id bijection shared by transcripts and metadata.
///
/// Ids `0..4` are reserved: `<unk>`, `<s>`, `</s>`, `<nometa>`. Remaining
/// words follow in lexicographic order. Counts are transcript frequencies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub fn build(records: &[UtteranceRecord]) -> Self {
        let mut words = BTreeSet::new();
        for r in records {
            words.extend(r.transcript.iter().cloned());
            words.extend(r.metadata.iter().cloned());
        }
        let mut vocab = Self::from_words(words.into_iter().filter(|w| !RESERVED_WORDS.contains(&w.as_str())));
        for r in records {
            for w in &r.transcript {
                let id = vocab.id(w);
                vocab.counts[id] += 1;
            }
        }
        vocab
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED_WORDS.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let counts = vec![0; all.len()];
        Self {
            words: all,
            index,
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of `word`, or [`UNK`] when out of vocabulary.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Like [`Vocabulary::encode`], but empty metadata becomes `[NO_META]`.
    pub fn encode_metadata(&self, tokens: &[String]) -> Vec<usize> {
        if tokens.is_empty() {
            vec![NO_META]
        } else {
            self.encode(tokens)
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.words[i].clone()).collect()
    }

    pub fn encode_record(&self, record: &UtteranceRecord) -> EncodedRecord {
        EncodedRecord {
            transcript: self.encode(&record.transcript),
            metadata: self.encode_metadata(&record.metadata),
        }
    }

    /// Non-reserved ids from most to least frequent (ties by word).
    pub fn frequency_ranked(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (NUM_RESERVED..self.len()).collect();
        ids.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then_with(|| self.words[a].cmp(&self.words[b])));
        ids
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            let _ = writeln!(out, "{w}\t{i}\t{}", self.counts[i]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |detail: String| CorpusError::Malformed { line: i + 1, detail };
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let id: usize = fields[1].parse().map_err(|_| bad(format!("bad id `{}`", fields[1])))?;
            let count: u64 = fields[2].parse().map_err(|_| bad(format!("bad count `{}`", fields[2])))?;
            if id != words.len() {
                return Err(bad(format!("id {id} out of sequence")));
            }
            if id < NUM_RESERVED && fields[0] != RESERVED_WORDS[id] {
                return Err(bad(format!("reserved id {id} must be `{}`", RESERVED_WORDS[id])));
            }
            words.push(fields[0].to_string());
            counts.push(count);
        }
        if words.len() < NUM_RESERVED {
            return Err(CorpusError::Vocabulary("missing reserved entries".into()));
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(CorpusError::Vocabulary("duplicate word".into()));
        }
        Ok(Self { words, index, counts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Short content hash used to tie checkpoints to a vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedRecord {
    pub transcript: Vec<usize>,
    /// Never empty; see [`Vocabulary::encode_metadata`].
    pub metadata: Vec<usize>,
}

/// A sentence pattern with one slot for an entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub words: Vec<String>,
    /// The entity is inserted before `words[entity_slot]`.
    pub entity_slot: usize,
    /// Pool words associated with the template that never occur in it;
    /// they stand in for metadata that is on-topic without being spoken.
    pub topic: Vec<String>,
}

impl Template {
    pub fn realize(&self, entity: &str) -> Vec<String> {
        let mut out = Vec::with_capacity(self.words.len() + 1);
        out.extend_from_slice(&self.words[..self.entity_slot]);
        out.push(entity.to_string());
        out.extend_from_slice(&self.words[self.entity_slot..]);
        out
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub entities: Vec<String>,
    pub templates: Vec<Template>,
    /// Filler words for metadata padding.
    pub distractor_pool: Vec<String>,
    /// Probability that a record's entity also appears in its metadata.
    pub relevance: f64,
    /// Number of non-entity metadata tokens.
    pub distractor_len: usize,
    /// Probability that a distractor slot repeats one of the transcript's
    /// pool words instead of a random pool word.
    pub echo_prob: f64,
    /// Probability that a distractor slot holds one of the template's
    /// topic words. `echo_prob + topic_prob <= 1`.
    pub topic_prob: f64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

pub const FUNCTION_WORDS: [&str; 14] = [
    "the", "a", "to", "of", "and", "in", "is", "was", "for", "on", "it", "with", "at", "my",
];

const TOPIC_WORDS: usize = 3;

const ENTITY_CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const POOL_CONSONANTS: &[u8] = b"bdgklmnprst";
const VOWELS: &[u8] = b"aeiou";

fn pick<R: Rng>(rng: &mut R, set: &[u8]) -> char {
    set[rng.gen_range(0..set.len())] as char
}

/// Entity names: 2-3 consonant-vowel syllables, so they end in a vowel.
pub fn generate_entities<R: Rng>(n: usize, rng: &mut R) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(pick(rng, ENTITY_CONSONANTS));
            w.push(pick(rng, VOWELS));
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Pool words: CVC or CVCVC, so they end in a consonant and never collide
/// with entity names.
pub fn generate_pool_words<R: Rng>(n: usize, rng: &mut R) -> Vec<String> {
    let mut seen: BTreeSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut w = String::new();
        w.push(pick(rng, POOL_CONSONANTS));
        w.push(pick(rng, VOWELS));
        if rng.gen_bool(0.5) {
            w.push(pick(rng, POOL_CONSONANTS));
            w.push(pick(rng, VOWELS));
        }
        w.push(pick(rng, POOL_CONSONANTS));
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SynthConfig {
    /// A generated inventory: `n_entities` names, `n_templates` templates of
    /// 4-8 words built from function words and a pool of
    /// `2 * n_templates` content words.
    pub fn generated(n_entities: usize, n_templates: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
        let entities = generate_entities(n_entities, &mut rng);
        let pool = generate_pool_words(2 * n_templates.max(1), &mut rng);
        let mut templates = Vec::with_capacity(n_templates);
        let mut starts = HashSet::new();
        while templates.len() < n_templates {
            let len = rng.gen_range(4..=8);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.35) {
                        FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())].to_string()
                    } else {
                        pool[rng.gen_range(0..pool.len())].clone()
                    }
                })
                .collect();
            // distinct opening bigrams keep templates distinguishable
            if !starts.insert((words[0].clone(), words[1].clone())) {
                continue;
            }
            let entity_slot = rng.gen_range(0..=len);
            let mut topic = Vec::with_capacity(TOPIC_WORDS);
            while topic.len() < TOPIC_WORDS.min(pool.len().saturating_sub(words.len())) {
                let w = &pool[rng.gen_range(0..pool.len())];
                if !words.contains(w) && !topic.contains(w) {
                    topic.push(w.clone());
                }
            }
            templates.push(Template { words, entity_slot, topic });
        }
        Self {
            entities,
            templates,
            distractor_pool: pool,
            relevance: 0.9,
            distractor_len: 6,
            echo_prob: 0.35,
            topic_prob: 0.0,
            train_size: 5000,
            valid_size: 500,
            test_size: 500,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("relevance", self.relevance),
            ("echo_prob", self.echo_prob),
            ("topic_prob", self.topic_prob),
            ("echo_prob + topic_prob", self.echo_prob + self.topic_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CorpusError::InvalidProbability { name, value });
            }
        }
        if self.entities.is_empty() || self.templates.is_empty() {
            return Err(CorpusError::InvalidConfig("need at least one entity and one template".into()));
        }
        if self.distractor_len > 0 && self.distractor_pool.is_empty() {
            return Err(CorpusError::InvalidConfig("distractors requested but the pool is empty".into()));
        }
        let entities: HashSet<&str> = self.entities.iter().map(String::as_str).collect();
        for t in &self.templates {
            if t.entity_slot > t.words.len() {
                return Err(CorpusError::InvalidConfig(format!(
                    "entity slot {} beyond template of length {}",
                    t.entity_slot,
                    t.words.len()
                )));
            }
            if let Some(w) = t.words.iter().find(|w| entities.contains(w.as_str())) {
                return Err(CorpusError::InvalidConfig(format!("entity `{w}` used as a template word")));
            }
        }
        if let Some(w) = self.distractor_pool.iter().find(|w| entities.contains(w.as_str())) {
            return Err(CorpusError::InvalidConfig(format!("entity `{w}` in the distractor pool")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub train: Vec<UtteranceRecord>,
    pub valid: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    /// Entity embedded in each record, keyed by record id.
    pub entity_of: HashMap<String, String>,
}

pub fn synthesize_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool: HashSet<&str> = config.distractor_pool.iter().map(String::as_str).collect();
    let mut entity_of = HashMap::new();

    let mut split = |name: &str, size: usize, rng: &mut ChaCha8Rng| -> Vec<UtteranceRecord> {
        (0..size)
            .map(|i| {
                let template = config.templates.choose(rng).expect("validated non-empty");
                let entity = config.entities.choose(rng).expect("validated non-empty");
                let transcript = template.realize(entity);
                let echoes: Vec<&String> = template.words.iter().filter(|w| pool.contains(w.as_str())).collect();
                let mut metadata: Vec<String> = (0..config.distractor_len)
                    .map(|_| {
                        let u: f64 = rng.gen();
                        if !echoes.is_empty() && u < config.echo_prob {
                            (*echoes.choose(rng).expect("non-empty")).clone()
                        } else if !template.topic.is_empty() && u < config.echo_prob + config.topic_prob {
                            template.topic.choose(rng).expect("non-empty").clone()
                        } else {
                            config.distractor_pool.choose(rng).expect("validated non-empty").clone()
                        }
                    })
                    .collect();
                if rng.gen_bool(config.relevance) {
                    let at = rng.gen_range(0..=metadata.len());
                    metadata.insert(at, entity.clone());
                }
                let id = format!("{name}-{i:06}");
                entity_of.insert(id.clone(), entity.clone());
                UtteranceRecord {
                    id,
                    transcript,
                    metadata,
                }
            })
            .collect()
    };

    let train = split("train", config.train_size, &mut rng);
    let valid = split("valid", config.valid_size, &mut rng);
    let test = split("test", config.test_size, &mut rng);
    Ok(SyntheticCorpus {
        train,
        valid,
        test,
        entity_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loads_records_in_order() {
        let text = r#"{"id":"u1","transcript":"NY is cold","metadata":"I intern in NY"}

{"id":"u2","transcript":"hello","metadata":""}
{"id":"u3","transcript":"a b","metadata":"c"}
"#;
        let recs = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].id, "u1");
        assert_eq!(recs[0].transcript, vec!["ny", "is", "cold"]);
        assert_eq!(recs[0].metadata.len(), 4);
        assert_eq!(recs[1].metadata.len(), 0);
        assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["u1", "u2", "u3"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"u1\",\"transcript\":\"a\",\"metadata\":\"\"}\nnot json\n";
        match read_corpus(text.as_bytes()) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\":\"u1\",\"transcript\":\"a\",\"metadata\":\"\"}\n{\"id\":\"u1\",\"transcript\":\"b\",\"metadata\":\"\"}\n";
        assert!(matches!(
            read_corpus(text.as_bytes()),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn vocabulary_covers_transcripts_and_metadata() {
        let recs = vec![UtteranceRecord::new("x", "a b", "c")];
        let v = Vocabulary::build(&recs);
        assert_eq!(v.len(), 7);
        assert!(v.get("c").is_some(), "metadata-only word is in vocabulary");
        assert_eq!(v.id("zzz-unseen"), UNK);
        assert_eq!(v.count(v.id("a")), 1);
        assert_eq!(v.count(v.id("c")), 0, "counts come from transcripts");
        for (i, w) in RESERVED_WORDS.iter().enumerate() {
            assert_eq!(v.id(w), i);
        }
    }

    #[test]
    fn encode_rules() {
        let recs = vec![UtteranceRecord::new("x", "ny is cold", "i intern in ny")];
        let v = Vocabulary::build(&recs);
        let ids = v.encode(&["ny".into(), "is".into()]);
        assert_eq!(ids, vec![v.id("ny"), v.id("is")]);
        assert_ne!(ids[0], UNK);
        assert_eq!(v.encode(&["zzz-unseen".into()]), vec![UNK]);
        assert_eq!(v.encode_metadata(&[]), vec![NO_META]);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let recs = vec![
            UtteranceRecord::new("x", "a b a", "c"),
            UtteranceRecord::new("y", "b d", ""),
        ];
        let v = Vocabulary::build(&recs);
        let text = v.to_text();
        assert!(text.starts_with("<unk>\t0\t0\n<s>\t1\t0\n</s>\t2\t0\n<nometa>\t3\t0\n"));
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(v.frequency_ranked().first().map(|&i| v.word(i)), Some("a"));
    }

    #[test]
    fn relevance_one_without_distractors_gives_entity_only_metadata() {
        let mut cfg = SynthConfig::generated(30, 5, 1);
        cfg.relevance = 1.0;
        cfg.distractor_len = 0;
        cfg.train_size = 50;
        let c = synthesize_corpus(&cfg).unwrap();
        for r in c.train.iter().chain(&c.test) {
            assert_eq!(r.metadata, vec![c.entity_of[&r.id].clone()]);
        }
    }

    #[test]
    fn relevance_zero_never_leaks_entity() {
        let mut cfg = SynthConfig::generated(30, 5, 2);
        cfg.relevance = 0.0;
        let c = synthesize_corpus(&cfg).unwrap();
        for r in &c.test {
            assert!(!r.metadata.contains(&c.entity_of[&r.id]));
            assert!(r.transcript.contains(&c.entity_of[&r.id]));
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let mut cfg = SynthConfig::generated(40, 8, 7);
        cfg.train_size = 200;
        let dump = |c: &SyntheticCorpus| {
            let mut buf = Vec::new();
            for split in [&c.train, &c.valid, &c.test] {
                write_corpus(&mut buf, split).unwrap();
            }
            buf
        };
        let a = synthesize_corpus(&cfg).unwrap();
        let b = synthesize_corpus(&cfg).unwrap();
        assert_eq!(dump(&a), dump(&b));
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut cfg = SynthConfig::generated(10, 3, 1);
        cfg.relevance = 1.5;
        assert!(matches!(
            synthesize_corpus(&cfg),
            Err(CorpusError::InvalidProbability { name: "relevance", .. })
        ));
    }

    #[test]
    fn entity_cooccurrence_rate_tracks_relevance() {
        for p in [0.2, 0.8] {
            let mut cfg = SynthConfig::generated(50, 10, 11);
            cfg.relevance = p;
            cfg.train_size = 0;
            cfg.valid_size = 0;
            cfg.test_size = 2000;
            let c = synthesize_corpus(&cfg).unwrap();
            let hits = c.test.iter().filter(|r| r.metadata.contains(&c.entity_of[&r.id])).count();
            let rate = hits as f64 / c.test.len() as f64;
            assert!((rate - p).abs() <= 0.05, "p={p} rate={rate}");
        }
    }

    proptest! {
        #[test]
        fn vocab_round_trip(words in proptest::collection::vec("[a-z]{1,6}", 1..30)) {
            let text = words.join(" ");
            let v = Vocabulary::build(&[UtteranceRecord::new("r", &text, "")]);
            for w in &words {
                let id = v.id(w);
                prop_assert_eq!(v.word(id), w.as_str());
                prop_assert_eq!(v.id(v.word(id)), id);
            }
        }

        #[test]
        fn corpus_save_load_identity(n in 1usize..20, seed in 0u64..1000) {
            let mut cfg = SynthConfig::generated(20, 4, seed);
            cfg.train_size = n;
            cfg.valid_size = 0;
            cfg.test_size = 0;
            let c = synthesize_corpus(&cfg).unwrap();
            let mut buf = Vec::new();
            write_corpus(&mut buf, &c.train).unwrap();
            prop_assert_eq!(read_corpus(buf.as_slice()).unwrap(), c.train);
        }
    }
}
