//! Energy-based verification and selection for pools of structured LLM
//! candidate outputs.
//!
//! Each candidate in a pool receives a distributional quality energy from a
//! heterogeneous ensemble of pairwise-trained heads (mean `mu`, spread
//! `sigma`) plus a deterministic constraint penalty. The pool's minimum total
//! energy candidate is selected, and uncertain or violating selections are
//! routed through an optional second generation pass.

pub mod ablation;
pub mod constraints;
pub mod diagnostics;
pub mod error;
pub mod featurize;
pub mod metrics;
pub mod pipeline;
pub mod pool;
pub mod scorer;
pub mod seed;
pub mod select;
pub mod synth;
pub mod theorysim;
pub mod triage;

pub use error::{Error, Result};
pub use pool::{Candidate, CandidatePool, Label, Problem, RunConfig, TaskKind};

/// Artifact version embedded in every output file.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
