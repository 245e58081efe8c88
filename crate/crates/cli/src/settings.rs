//! Flat `key = value` settings shared by the subcommands.
//!
//! Every subcommand resolves its settings as defaults, then the `--config`
//! file, then command-line flags, and prints the result before running.

use std::fmt::Display;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use ctxlm::experiment::ExperimentConfig;
use ctxlm::lattice::LatticeSynthConfig;
use ctxlm::ngram;
use ctxlm::rescore::RescoreConfig;
use ctxlm::train::TrainConfig;

pub trait Settings {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn describe(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| anyhow!("bad value `{value}` for `{key}`: {e}"))
}

/// `inf` and `none` mean unbounded.
fn parse_limit(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "inf" | "none" => Ok(None),
        v => parse_value(key, v).map(Some),
    }
}

fn show_limit(v: Option<usize>) -> String {
    v.map_or("inf".into(), |n| n.to_string())
}

/// Parses a settings file into `(key, value)` pairs. `#` starts a comment.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies file pairs, then flag values that were given.
pub fn resolve<S: Settings>(
    settings: &mut S,
    file: &[(String, String)],
    flags: &[(&str, Option<String>)],
) -> Result<()> {
    for (k, v) in file {
        settings.set(k, v).context("in config file")?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            settings.set(k, v).with_context(|| format!("in flag for `{k}`"))?;
        }
    }
    Ok(())
}

pub struct SynthSettings {
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
}

impl Default for SynthSettings {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        SynthSettings {
            seed: e.seed,
            entities: e.entities,
            templates: e.templates,
            relevance: e.relevance,
            echo_prob: e.echo_prob,
            topic_prob: e.topic_prob,
            distractor_len: e.distractor_len,
            train_size: e.train_size,
            valid_size: e.valid_size,
            test_size: e.test_size,
        }
    }
}

impl SynthSettings {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            entities: self.entities,
            templates: self.templates,
            relevance: self.relevance,
            echo_prob: self.echo_prob,
            topic_prob: self.topic_prob,
            distractor_len: self.distractor_len,
            train_size: self.train_size,
            valid_size: self.valid_size,
            test_size: self.test_size,
            ..ExperimentConfig::default()
        }
    }
}

impl Settings for SynthSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "entities" => self.entities = parse_value(key, value)?,
            "templates" => self.templates = parse_value(key, value)?,
            "relevance" => self.relevance = parse_value(key, value)?,
            "echo_prob" => self.echo_prob = parse_value(key, value)?,
            "topic_prob" => self.topic_prob = parse_value(key, value)?,
            "distractor_len" => self.distractor_len = parse_value(key, value)?,
            "train_size" => self.train_size = parse_value(key, value)?,
            "valid_size" => self.valid_size = parse_value(key, value)?,
            "test_size" => self.test_size = parse_value(key, value)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("entities", self.entities.to_string()),
            ("templates", self.templates.to_string()),
            ("relevance", self.relevance.to_string()),
            ("echo_prob", self.echo_prob.to_string()),
            ("topic_prob", self.topic_prob.to_string()),
            ("distractor_len", self.distractor_len.to_string()),
            ("train_size", self.train_size.to_string()),
            ("valid_size", self.valid_size.to_string()),
            ("test_size", self.test_size.to_string()),
        ]
    }
}

pub struct NgramSettings {
    pub order: usize,
    pub discount: f64,
}

impl Default for NgramSettings {
    fn default() -> Self {
        NgramSettings { order: ngram::DEFAULT_ORDER, discount: ngram::DEFAULT_DISCOUNT }
    }
}

impl Settings for NgramSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "order" => self.order = parse_value(key, value)?,
            "discount" => self.discount = parse_value(key, value)?,
            // accepted so one file can drive every variant
            "variant" | "seed" => {}
            _ => bail!("unknown key `{key}` for the n-gram model"),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![("variant", "ngram".into()), ("order", self.order.to_string()), ("discount", self.discount.to_string())]
    }
}

/// Neural training settings; defaults are the desk-scale experiment's.
pub struct TrainSettings(pub TrainConfig);

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings(ExperimentConfig::default().train)
    }
}

impl Settings for TrainSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        Ok(self.0.set(key, value)?)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.0;
        vec![
            ("variant", c.variant.tag().into()),
            ("beta", c.beta.to_string()),
            ("layers", c.layers.to_string()),
            ("hidden", c.hidden.to_string()),
            ("dropout", c.dropout.to_string()),
            ("lr", c.lr.to_string()),
            ("min_lr", c.min_lr.to_string()),
            ("momentum", c.momentum.to_string()),
            ("epochs", c.epochs.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("seed", c.seed.to_string()),
            ("clip", c.clip.to_string()),
            ("init_scale", c.init_scale.to_string()),
            ("patience", c.patience.to_string()),
        ]
    }
}

pub struct LatticeSettings {
    pub seed: u64,
    pub synth: LatticeSynthConfig,
    pub confusion_distance: usize,
}

impl Default for LatticeSettings {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        LatticeSettings { seed: e.seed, synth: e.lattice, confusion_distance: e.confusion_distance }
    }
}

impl Settings for LatticeSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "width" => self.synth.width = parse_value(key, value)?,
            "noise" => self.synth.noise = parse_value(key, value)?,
            "gap" => self.synth.gap = parse_value(key, value)?,
            "confusion_distance" => self.confusion_distance = parse_value(key, value)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("width", self.synth.width.to_string()),
            ("noise", self.synth.noise.to_string()),
            ("gap", self.synth.gap.to_string()),
            ("confusion_distance", self.confusion_distance.to_string()),
        ]
    }
}

pub struct RescoreSettings {
    pub config: RescoreConfig,
    pub workers: usize,
    /// Evaluate an LSTM checkpoint as a cache model with this weight.
    pub cache_beta: Option<f64>,
}

impl Default for RescoreSettings {
    fn default() -> Self {
        RescoreSettings { config: RescoreConfig::default(), workers: 1, cache_beta: None }
    }
}

impl Settings for RescoreSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda" => self.config.lambda = parse_value(key, value)?,
            "k" | "history" => self.config.history = parse_limit(key, value)?,
            "beam" => self.config.beam = parse_limit(key, value)?,
            "acoustic_scale" => self.config.acoustic_scale = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "cache_beta" => self.cache_beta = Some(parse_value(key, value)?),
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda", self.config.lambda.to_string()),
            ("k", show_limit(self.config.history)),
            ("beam", show_limit(self.config.beam)),
            ("acoustic_scale", self.config.acoustic_scale.to_string()),
            ("workers", self.workers.to_string()),
            ("cache_beta", self.cache_beta.map_or("none".into(), |b| b.to_string())),
        ]
    }
}

pub struct PplSettings {
    pub workers: usize,
    pub cache_beta: Option<f64>,
}

impl Default for PplSettings {
    fn default() -> Self {
        PplSettings { workers: 1, cache_beta: None }
    }
}

impl Settings for PplSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "workers" => self.workers = parse_value(key, value)?,
            "cache_beta" => self.cache_beta = Some(parse_value(key, value)?),
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("workers", self.workers.to_string()),
            ("cache_beta", self.cache_beta.map_or("none".into(), |b| b.to_string())),
        ]
    }
}

pub struct AnalyzeSettings {
    pub top_n: usize,
    pub ks: Vec<usize>,
    pub min_bucket: usize,
}

impl Default for AnalyzeSettings {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        AnalyzeSettings { top_n: e.top_n, ks: e.bucket_ks, min_bucket: e.min_bucket }
    }
}

impl Settings for AnalyzeSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "top_n" => self.top_n = parse_value(key, value)?,
            "min_bucket" => self.min_bucket = parse_value(key, value)?,
            "ks" => {
                self.ks = value.split(',').map(|k| parse_value(key, k)).collect::<Result<_>>()?;
            }
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let ks: Vec<String> = self.ks.iter().map(usize::to_string).collect();
        vec![
            ("top_n", self.top_n.to_string()),
            ("ks", ks.join(",")),
            ("min_bucket", self.min_bucket.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let mut s = RescoreSettings::default();
        let file = parse_file("lambda = 0.3\nbeam = 8 # comment\n\nk = inf").unwrap();
        resolve(&mut s, &file, &[("lambda", Some("0.9".into())), ("beam", None)]).unwrap();
        assert_eq!(s.config.lambda, 0.9);
        assert_eq!(s.config.beam, Some(8));
        assert_eq!(s.config.history, None);
        assert_eq!(s.config.acoustic_scale, 1.0);
    }

    #[test]
    fn bad_lines_and_keys_are_rejected() {
        assert!(parse_file("lambda 0.3").is_err());
        let mut s = AnalyzeSettings::default();
        assert!(s.set("bogus", "1").is_err());
        assert!(s.set("top_n", "many").is_err());
        s.set("ks", "1,2,5").unwrap();
        assert_eq!(s.ks, vec![1, 2, 5]);
    }

    #[test]
    fn described_settings_read_back() {
        let mut s = TrainSettings::default();
        s.set("variant", "cache").unwrap();
        s.set("beta", "0.25").unwrap();
        let mut back = TrainSettings::default();
        resolve(&mut back, &parse_file(&s.describe()).unwrap(), &[]).unwrap();
        assert_eq!(back.0, s.0);
    }
}
