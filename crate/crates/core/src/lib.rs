//! Metadata-conditioned neural language models and word-lattice rescoring.
//!
//! The crate is organised bottom-up:
//!
//! * [`checkpoint`]: versioned parameter files.
//! * [`tensor`]: dense matrices with reverse-mode differentiation.
//! * [`corpus`]: utterance records, vocabulary, synthetic corpora.
//! * [`ngram`]: interpolated Kneser-Ney n-gram model with ARPA I/O.
//! * [`neural`]: LSTM, cache-LSTM, attention and pointer-mixture LMs.
//! * [`train`]: NLL objective, NAG optimiser, cosine schedule.
//! * [`lattice`]: word lattices, parsing, synthesis, exhaustive paths.
//! * [`rescore`]: history-merging lattice rescoring.
//! * [`eval`]: perplexity, WER, co-occurrence WERR analysis.
//! * [`experiment`]: the end-to-end synthetic experiment.

pub mod checkpoint;
pub mod corpus;
pub mod tensor;
pub mod ngram;
pub mod neural;
pub mod train;
pub mod lattice;
pub mod rescore;
pub mod eval;
pub mod experiment;
