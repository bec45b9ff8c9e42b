//! Inference-side toolkit for dialect-aware generation.
//!
//! The crate bundles the pieces needed to turn sampled LLM outputs into a
//! final, dialect-faithful answer and to measure the result:
//!
//! * [`metrics`]: chrF++ over character and word n-grams, the ADI2
//!   dialect-fidelity product and the combined decoding objective.
//! * [`mbr`]: candidate selection, either pairwise expected-utility MBR or
//!   independent-score reranking.
//! * [`ties`]: safetensors archive I/O, LoRA delta materialization and
//!   TIES-Merging of task vectors.
//! * [`clients`]: OpenAI-compatible candidate generation, remote and stub
//!   dialect scorers, candidate JSONL files.
//! * [`evalharness`]: corpus-level ADI2 / chrF++ and report serialization.
//! * [`cli`]: the `dialect-mbr` command-line front end.

pub mod cli;
pub mod clients;
pub mod evalharness;
pub mod mbr;
pub mod metrics;
pub mod ties;

pub use mbr::{Candidate, CandidateSet, SelectionResult};
pub use metrics::{ChrfConfig, DialectScore, DialectScorer, NGramProfile, ObjectiveKind};
