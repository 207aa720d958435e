//! Differentially private synthetic instruction curation: a toy DP
//! generator, private-histogram resampling in embedding space, privacy
//! accounting, distribution scoring and leakage audits.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod clustering;
pub mod corpus;
pub mod divergence;
pub mod embedding;
pub mod error;
pub mod featurize;
pub mod generator;
pub mod histogram;
pub mod leakage;
pub mod pii;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod testbed;

pub use error::{Error, Result};
pub use accountant::{BudgetReport, Discretization, MechanismKind, MechanismSpec, PrivacyLossDistribution};
pub use clustering::{ClusterModel, KMeansConfig};
pub use corpus::{Corpus, CorpusRole, InstructionRecord, PreprocessConfig, SimpleTokenizer, Tokenizer};
pub use divergence::{DistributionHistogram, MauveConfig, MauveReport, Representation};
pub use embedding::{EmbeddingMatrix, Fingerprint};
pub use generator::{DpAdamConfig, ModelConfig, SamplingConfig, ToyLanguageModel, TrainReport};
pub use histogram::PrivateHistogram;
pub use leakage::{CanarySpec, LeakageReport, SecretKind};
pub use pii::{PiiCategory, PiiFinding, ScreenReport};
pub use pipeline::{Pipeline, PipelineConfig, RunReport, Stage};
pub use resample::{SelectionPlan, SelectionResult};
pub use rng::CounterRng;
