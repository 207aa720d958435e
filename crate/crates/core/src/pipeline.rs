//! End-to-end orchestration over file artifacts.
//!
//! Every stage reads and writes files in the work directory and records the
//! content hashes of its inputs and outputs, its seed and the config hash in
//! `manifest.json`. A stage refuses to run on an input whose hash differs from
//! the one its producer recorded. All stage seeds derive from one master seed.
//!
//! The stage table doubles as a privacy ledger: [`check_stage_graph`] proves
//! that no released artifact depends on the real corpus except through a
//! stage that charges the budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accountant::{budget, calibrate_with, steps_for, BudgetReport, Discretization, MechanismKind, MechanismSpec};
use crate::clustering::{kmeans_fit, ClusterModel, KMeansConfig};
use crate::corpus::{preprocess, Corpus, CorpusRole, PreprocessConfig, SimpleTokenizer};
use crate::divergence::{
    cluster_histograms, mauve_score, unigram_histograms, MauveConfig, DEFAULT_CLUSTER_BINS, DEFAULT_C_EMBEDDING, DEFAULT_C_UNIGRAM,
    DEFAULT_LAMBDA_GRID,
};
use crate::embedding::{read_embeddings, validate_alignment, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::featurize::{HashingFeaturizer, DEFAULT_DIM};
use crate::generator::{sample, train, DpAdamConfig, ModelConfig, SamplingConfig, ToyLanguageModel, TrainReport};
use crate::histogram::{build_histogram, privatize};
use crate::leakage::{evaluate, inject, min_rank, CanarySpec, LeakageReport, SecretKind, DEFAULT_POOL_SIZE, DEFAULT_SCAN_COUNT};
use crate::resample::{plan, resample, SelectionPlan, SelectionResult};
use crate::rng::{derive_seed, CounterRng};

pub const MANIFEST: &str = "manifest.json";
pub const REAL_CLEAN: &str = "real.jsonl";
pub const MODEL: &str = "model.dptm";
pub const TRAIN_LOG: &str = "train.json";
pub const TRAIN_METRICS: &str = "train_metrics.jsonl";
pub const SYNTHETIC: &str = "synthetic.jsonl";
pub const REAL_EMB: &str = "real.dpeb";
pub const SYN_EMB: &str = "synthetic.dpeb";
pub const CLUSTERS: &str = "clusters.dpkm";
pub const HISTOGRAM: &str = "histogram.json";
pub const HISTOGRAM_VOTES: &str = "histogram_votes.json";
pub const PLAN: &str = "plan.json";
pub const SELECTED: &str = "selected.jsonl";
pub const SELECTION: &str = "selection.json";
pub const MAUVE: &str = "mauve.json";
pub const BUDGET: &str = "budget.json";
pub const LEAKAGE: &str = "leakage.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
/// Placeholder name for the configured real corpus in the stage table.
pub const REAL_SOURCE: &str = "<real corpus>";

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Real instructions, JSONL.
    pub real: PathBuf,
    /// Externally generated synthetic corpus; replaces the train and sample stages.
    pub synthetic: Option<PathBuf>,
    /// DPEB1 embeddings of the preprocessed real corpus.
    pub real_embeddings: Option<PathBuf>,
    pub synthetic_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip: f64,
    /// Fixed σ; when absent, σ is calibrated to `privacy.target_epsilon`.
    pub noise_multiplier: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            learning_rate: 1e-2,
            clip: 0.5,
            noise_multiplier: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: 10_000,
            top_p: 0.95,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Dimension of the built-in hashing featurizer.
    pub dim: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub k: usize,
    pub sigma: f64,
    pub max_iters: usize,
    pub normalized: bool,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            k: 1000,
            sigma: 10.0,
            max_iters: 100,
            normalized: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    /// Target size `T`; defaults to the preprocessed real corpus size.
    pub target: Option<u64>,
    pub with_replacement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MauveSettings {
    pub c_unigram: f64,
    pub c_embedding: f64,
    pub bins: usize,
    pub lambda_grid: usize,
}

impl Default for MauveSettings {
    fn default() -> Self {
        Self {
            c_unigram: DEFAULT_C_UNIGRAM,
            c_embedding: DEFAULT_C_EMBEDDING,
            bins: DEFAULT_CLUSTER_BINS,
            lambda_grid: DEFAULT_LAMBDA_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub delta: Option<f64>,
    pub target_epsilon: Option<f64>,
    /// Skip the `δ < 0.1/N` guard.
    pub allow_large_delta: bool,
    pub grid: f64,
    pub tail_mass: f64,
    /// Largest acceptable gap between pessimistic and optimistic ε.
    pub epsilon_tolerance: f64,
    /// Mechanisms run outside this pipeline on the same real data, e.g. the
    /// training of an imported synthetic corpus's generator.
    pub external: Vec<MechanismSpec>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        let d = Discretization::default();
        Self {
            delta: None,
            target_epsilon: None,
            allow_large_delta: false,
            grid: d.grid,
            tail_mass: d.tail_mass,
            epsilon_tolerance: 0.25,
            external: Vec::new(),
        }
    }
}

impl PrivacyConfig {
    pub fn discretization(&self) -> Discretization {
        Discretization {
            grid: self.grid,
            tail_mass: self.tail_mass,
            ..Discretization::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanaryConfig {
    pub template: String,
    pub kind: SecretKind,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_scan")]
    pub scan_count: usize,
}

fn default_repetitions() -> usize {
    100
}

fn default_pool() -> usize {
    DEFAULT_POOL_SIZE
}

fn default_scan() -> usize {
    DEFAULT_SCAN_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub embed: EmbedConfig,
    pub histogram: HistogramConfig,
    pub resample: ResampleConfig,
    pub mauve: MauveSettings,
    pub privacy: PrivacyConfig,
    /// Canaries injected into the training data and audited after training.
    pub canary: Vec<CanaryConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("run"),
            seed: 0,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            embed: EmbedConfig::default(),
            histogram: HistogramConfig::default(),
            resample: ResampleConfig::default(),
            mauve: MauveSettings::default(),
            privacy: PrivacyConfig::default(),
            canary: Vec::new(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // Checked before resolution, which would turn "" into the base directory.
        if config.data.real.as_os_str().is_empty() {
            return Err(Error::Config("data.real must name the real corpus".into()));
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut config.work_dir);
        resolve(&mut config.data.real);
        for p in [&mut config.data.synthetic, &mut config.data.real_embeddings, &mut config.data.synthetic_embeddings]
            .into_iter()
            .flatten()
        {
            resolve(p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.real.as_os_str().is_empty() {
            return bad("data.real must name the real corpus".into());
        }
        if self.histogram.k == 0 || !(self.histogram.sigma >= 0.0 && self.histogram.sigma.is_finite()) {
            return bad(format!("histogram needs k ≥ 1 and finite σ ≥ 0, got k={} σ={}", self.histogram.k, self.histogram.sigma));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 || !(self.train.clip > 0.0) || !(self.train.learning_rate > 0.0) {
            return bad("train needs positive epochs, batch_size, clip and learning_rate".into());
        }
        if let Some(s) = self.train.noise_multiplier {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("train.noise_multiplier must be finite and ≥ 0, got {s}"));
            }
        }
        if self.sample.count == 0 || !(self.sample.top_p > 0.0 && self.sample.top_p <= 1.0) || !(self.sample.temperature > 0.0) {
            return bad("sample needs count ≥ 1, top_p in (0, 1] and temperature > 0".into());
        }
        if let Some(d) = self.privacy.delta {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("privacy.delta must lie in (0, 1), got {d}"));
            }
        }
        if self.data.synthetic.is_some() && !self.canary.is_empty() {
            return bad("canaries audit the built-in generator and cannot be combined with an imported synthetic corpus".into());
        }
        for c in &self.canary {
            CanarySpec {
                template: c.template.clone(),
                secret: "x".into(),
                kind: c.kind,
                repetitions: c.repetitions,
                pool_size: c.pool_size,
            }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn imported_synthetic(&self) -> bool {
        self.data.synthetic.is_some()
    }

    /// Hash of the settings, ignoring where files live (their contents are
    /// hashed separately), so identical runs in different places agree.
    fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.work_dir = PathBuf::new();
        c.data = DataConfig {
            real: PathBuf::from("real"),
            synthetic: c.data.synthetic.map(|_| PathBuf::from("synthetic")),
            real_embeddings: c.data.real_embeddings.map(|_| PathBuf::from("real_embeddings")),
            synthetic_embeddings: c.data.synthetic_embeddings.map(|_| PathBuf::from("synthetic_embeddings")),
        };
        Ok(sha256_hex(c.to_toml()?.as_bytes()))
    }

    /// δ, checked against `0.1/N` unless overridden.
    pub fn checked_delta(&self, n_real: usize) -> Result<f64> {
        let delta = self
            .privacy
            .delta
            .ok_or_else(|| Error::Config("privacy.delta must be set".into()))?;
        if !self.privacy.allow_large_delta && n_real > 0 && delta >= 0.1 / n_real as f64 {
            return Err(Error::Config(format!(
                "delta {delta} is not below 0.1/N = {} for N = {n_real}; set privacy.allow_large_delta to override",
                0.1 / n_real as f64
            )));
        }
        Ok(delta)
    }
}

/// Named defaults with a one-line rationale each.
pub fn explain_defaults() -> String {
    let rows: [(&str, String, &str); 14] = [
        ("histogram.k", "1000".into(), "clusters of synthetic embeddings receiving real votes"),
        ("histogram.sigma", "10".into(), "Gaussian noise std on the vote histogram (L2 sensitivity 1)"),
        ("sample.top_p", "0.95".into(), "nucleus mass kept when sampling the generator"),
        ("sample.temperature", "1.0".into(), "softmax temperature when sampling"),
        ("train.clip", "0.5".into(), "per-example gradient clipping norm C for DP-Adam"),
        ("train.batch_size", "64".into(), "expected batch size; sampling rate q = B/N"),
        ("train.noise_multiplier", "calibrated".into(), "σ solved from privacy.target_epsilon when unset"),
        ("mauve.c_unigram", DEFAULT_C_UNIGRAM.to_string(), "MAUVE scaling constant for token unigrams"),
        ("mauve.c_embedding", DEFAULT_C_EMBEDDING.to_string(), "MAUVE scaling constant for embedding clusters"),
        ("mauve.bins", DEFAULT_CLUSTER_BINS.to_string(), "k-means bins quantizing embeddings for MAUVE"),
        ("mauve.lambda_grid", DEFAULT_LAMBDA_GRID.to_string(), "interior mixture weights on the divergence frontier"),
        ("preprocess.ngram", "10".into(), "n of the shared n-gram deduplication"),
        ("privacy.delta", "required".into(), "must be below 0.1/N unless privacy.allow_large_delta"),
        ("privacy.grid", format!("{:e}", Discretization::default().grid), "privacy-loss discretization step"),
    ];
    rows.iter().map(|(k, v, why)| format!("{k:<24} {v:<12} {why}\n")).collect()
}

// ---------------------------------------------------------------- stages

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Preprocess,
    Train,
    Sample,
    EmbedReal,
    EmbedSynthetic,
    Cluster,
    Histogram,
    Plan,
    Resample,
    Mauve,
    Account,
    Canary,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Sample => "sample",
            Stage::EmbedReal => "embed-real",
            Stage::EmbedSynthetic => "embed-synthetic",
            Stage::Cluster => "cluster",
            Stage::Histogram => "histogram",
            Stage::Plan => "plan",
            Stage::Resample => "resample",
            Stage::Mauve => "mauve",
            Stage::Account => "account",
            Stage::Canary => "canary",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        STAGES.iter().map(|s| s.stage).find(|s| s.name() == name)
    }

    pub fn spec(self) -> &'static StageSpec {
        STAGES.iter().find(|s| s.stage == self).expect("every stage is in the table")
    }
}

/// How a stage touches data derived from the real corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RealAccess {
    None,
    /// Internal transforms whose outputs stay tainted by real data.
    Curation,
    /// A mechanism charged to the budget; its outputs are releasable.
    Private,
    /// Non-private measurement; outputs are tainted and never released.
    Evaluation,
}

#[derive(Debug, Clone, Copy)]
pub struct StageSpec {
    pub stage: Stage,
    pub inputs: &'static [&'static str],
    /// Artifacts this stage releases (for `Private` stages: its mechanism outputs).
    pub outputs: &'static [&'static str],
    /// Diagnostics kept next to the outputs; tainted whenever an input is.
    pub diagnostics: &'static [&'static str],
    pub access: RealAccess,
}

/// Stage graph in run order. Artifacts listed as inputs may be absent when
/// the stage they come from is skipped (imported synthetic data).
pub const STAGES: &[StageSpec] = &[
    StageSpec {
        stage: Stage::Preprocess,
        inputs: &[REAL_SOURCE],
        outputs: &[REAL_CLEAN],
        diagnostics: &[],
        access: RealAccess::Curation,
    },
    StageSpec {
        stage: Stage::Train,
        inputs: &[REAL_CLEAN],
        outputs: &[MODEL],
        diagnostics: &[TRAIN_LOG, TRAIN_METRICS],
        access: RealAccess::Private,
    },
    StageSpec {
        stage: Stage::Sample,
        inputs: &[MODEL],
        outputs: &[SYNTHETIC],
        diagnostics: &[],
        access: RealAccess::None,
    },
    StageSpec {
        stage: Stage::EmbedSynthetic,
        inputs: &[SYNTHETIC],
        outputs: &[SYN_EMB],
        diagnostics: &[],
        access: RealAccess::None,
    },
    StageSpec {
        stage: Stage::EmbedReal,
        inputs: &[REAL_CLEAN],
        outputs: &[REAL_EMB],
        diagnostics: &[],
        access: RealAccess::Curation,
    },
    StageSpec {
        stage: Stage::Cluster,
        inputs: &[SYN_EMB],
        outputs: &[CLUSTERS],
        diagnostics: &[],
        access: RealAccess::None,
    },
    StageSpec {
        stage: Stage::Histogram,
        inputs: &[CLUSTERS, REAL_EMB],
        outputs: &[HISTOGRAM],
        diagnostics: &[HISTOGRAM_VOTES],
        access: RealAccess::Private,
    },
    StageSpec {
        stage: Stage::Plan,
        inputs: &[HISTOGRAM, CLUSTERS],
        outputs: &[PLAN],
        diagnostics: &[],
        access: RealAccess::None,
    },
    StageSpec {
        stage: Stage::Resample,
        inputs: &[PLAN, CLUSTERS, SYNTHETIC],
        outputs: &[SELECTED, SELECTION],
        diagnostics: &[],
        access: RealAccess::None,
    },
    StageSpec {
        stage: Stage::Mauve,
        inputs: &[REAL_CLEAN, REAL_EMB, SYNTHETIC, SYN_EMB, SELECTION],
        outputs: &[],
        diagnostics: &[MAUVE],
        access: RealAccess::Evaluation,
    },
    StageSpec {
        stage: Stage::Account,
        inputs: &[MODEL, HISTOGRAM],
        outputs: &[BUDGET],
        diagnostics: &[],
        access: RealAccess::None,
    },
    StageSpec {
        stage: Stage::Canary,
        inputs: &[MODEL],
        outputs: &[LEAKAGE],
        diagnostics: &[],
        access: RealAccess::None,
    },
    StageSpec {
        stage: Stage::Report,
        inputs: &[REAL_CLEAN, SYNTHETIC, PLAN, SELECTION, MAUVE, BUDGET],
        outputs: &[],
        diagnostics: &[REPORT_JSON, REPORT_TEXT],
        access: RealAccess::Evaluation,
    },
];

/// Static privacy-ledger check: every stage reading real-derived data
/// declares it, and nothing in a stage's `outputs` depends on the real
/// corpus except through a `Private` stage.
pub fn check_stage_graph(stages: &[StageSpec]) -> Result<()> {
    let mut tainted: BTreeSet<&str> = BTreeSet::from([REAL_SOURCE]);
    let mut produced: BTreeSet<&str> = BTreeSet::from([REAL_SOURCE]);
    for s in stages {
        for input in s.inputs {
            if !produced.contains(input) {
                return Err(Error::Config(format!("stage {} reads {input} before any stage produces it", s.stage.name())));
            }
        }
        let reads_real = s.inputs.iter().any(|i| tainted.contains(i));
        if reads_real && s.access == RealAccess::None {
            return Err(Error::Config(format!("stage {} reads real-derived data without declaring it", s.stage.name())));
        }
        let outputs_tainted = reads_real && s.access != RealAccess::Private;
        for a in s.outputs.iter().chain(s.diagnostics) {
            produced.insert(a);
            if outputs_tainted || (reads_real && s.diagnostics.contains(a)) {
                tainted.insert(a);
            }
        }
    }
    for s in stages {
        if s.access == RealAccess::Curation {
            continue;
        }
        if let Some(a) = s.outputs.iter().find(|a| tainted.contains(*a)) {
            return Err(Error::Config(format!("stage {} releases {a}, which depends on the real corpus without privacy", s.stage.name())));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Budget charged by this stage.
    pub mechanisms: Vec<MechanismSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    fn producer(&self, artifact: &str) -> Option<(&Stage, &StageRecord)> {
        self.stages.iter().find(|(_, r)| r.outputs.contains_key(artifact))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------- artifacts

/// The released part of the private histogram: no raw votes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleasedHistogram {
    pub k: usize,
    pub sigma: f64,
    pub n_real: u64,
    pub noised: Vec<f64>,
    pub densities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MauvePair {
    pub unigram: f64,
    pub embedding: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MauveArtifact {
    /// Uniform subsample of the initial synthetic pool, same size as the selection.
    pub initial: MauvePair,
    pub selected: MauvePair,
    pub compared_size: usize,
    pub c_unigram: f64,
    pub c_embedding: f64,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountArtifact {
    /// `None` when some mechanism ran without noise.
    pub budget: Option<BudgetReport>,
    pub delta: f64,
    pub non_private: Vec<String>,
    pub charged_stages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageArtifact {
    pub reports: Vec<LeakageReport>,
    pub min_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub real_records: usize,
    pub synthetic_records: usize,
    pub target_total: u64,
    pub planned_total: u64,
    pub selected_records: u64,
    pub k: usize,
    pub plan_feasible: bool,
    pub total_deficit: u64,
    pub clusters_short: usize,
    pub replacement_used: bool,
    pub mauve: MauveArtifact,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub epsilon_error_bound: Option<f64>,
    pub non_private: Vec<String>,
    /// `None` when no canary was configured.
    pub leakage: Option<LeakageArtifact>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k:<28} {v}\n"));
        line("real records", self.real_records.to_string());
        line("synthetic records", self.synthetic_records.to_string());
        line("target size T", self.target_total.to_string());
        line("planned size", self.planned_total.to_string());
        line("selected size", self.selected_records.to_string());
        line("clusters K", self.k.to_string());
        line("plan feasible", self.plan_feasible.to_string());
        line("total deficit", format!("{} ({} clusters short)", self.total_deficit, self.clusters_short));
        line("replacement used", self.replacement_used.to_string());
        line("mauve unigram", format!("initial {:.4}  selected {:.4}", self.mauve.initial.unigram, self.mauve.selected.unigram));
        line("mauve embedding", format!("initial {:.4}  selected {:.4}", self.mauve.initial.embedding, self.mauve.selected.embedding));
        match (self.epsilon, self.epsilon_error_bound) {
            (Some(e), Some(b)) => line("privacy", format!("({e:.4}, {:e})-DP, error bound {b:.4}", self.delta)),
            _ => line("privacy", format!("not private: {}", self.non_private.join(", "))),
        }
        match &self.leakage {
            None => line("leakage", "skipped".into()),
            Some(l) => {
                for r in &l.reports {
                    let unprompted = r.leaked_unprompted.map_or("not scanned".to_string(), |b| b.to_string());
                    line(
                        &format!("leakage {:?} x{}", r.kind, r.repetitions),
                        format!("rank {}/{}  unprompted {unprompted}  prompted {}", r.loss_rank, r.pool_size, r.leaked_prompted),
                    );
                }
                line("leakage min rank", l.min_rank.map_or("-".into(), |r| r.to_string()));
            }
        }
        out
    }
}

// ---------------------------------------------------------------- runner

pub struct Pipeline {
    config: PipelineConfig,
    work: PathBuf,
    manifest: Manifest,
}

impl Pipeline {
    /// Opens (creating if needed) the work directory and its manifest.
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        check_stage_graph(STAGES)?;
        let work = config.work_dir.clone();
        fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
        let path = work.join(MANIFEST);
        let manifest = if path.exists() {
            read_json(&path)?
        } else {
            Manifest {
                master_seed: config.seed,
                stages: BTreeMap::new(),
            }
        };
        if manifest.master_seed != config.seed {
            return Err(Error::Config(format!(
                "work dir {} was created with seed {}, config has {}",
                work.display(),
                manifest.master_seed,
                config.seed
            )));
        }
        Ok(Self { config, work, manifest })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.work.join(artifact)
    }

    /// Stages of a full run, in order.
    pub fn plan_stages(&self) -> Vec<Stage> {
        STAGES
            .iter()
            .map(|s| s.stage)
            .filter(|s| match s {
                Stage::Train => !self.config.imported_synthetic(),
                Stage::Canary => !self.config.canary.is_empty(),
                _ => true,
            })
            .collect()
    }

    fn seed(&self, stage: Stage) -> u64 {
        derive_seed(self.config.seed, stage.name())
    }

    fn runtime_inputs(&self, stage: Stage) -> Vec<&'static str> {
        stage
            .spec()
            .inputs
            .iter()
            .copied()
            .filter(|a| *a != REAL_SOURCE && !(self.config.imported_synthetic() && *a == MODEL))
            .collect()
    }

    /// Hashes of the stage's inputs, checked against what their producers recorded.
    fn verify_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for artifact in self.runtime_inputs(stage) {
            let path = self.path(artifact);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let (_, record) = self.manifest.producer(artifact).ok_or_else(|| Error::MissingArtifact(path.clone()))?;
            let found = file_hash(&path)?;
            let recorded = &record.outputs[artifact];
            if &found != recorded {
                return Err(Error::StaleInput {
                    path,
                    recorded: recorded.clone(),
                    found,
                });
            }
            hashes.insert(artifact.to_string(), found);
        }
        Ok(hashes)
    }

    /// `external` inputs are keyed by their config field, not their path.
    fn record(&mut self, stage: Stage, mut inputs: BTreeMap<String, String>, external: &[(&str, &Path)], mechanisms: Vec<MechanismSpec>) -> Result<()> {
        for (label, p) in external {
            inputs.insert(label.to_string(), file_hash(p)?);
        }
        let spec = stage.spec();
        let mut outputs = BTreeMap::new();
        for a in spec.outputs.iter().chain(spec.diagnostics) {
            let path = self.path(a);
            if path.exists() {
                outputs.insert(a.to_string(), file_hash(&path)?);
            }
        }
        let record = StageRecord {
            seed: self.seed(stage),
            config_hash: self.config.config_hash()?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs,
            mechanisms,
        };
        self.manifest.stages.insert(stage, record);
        write_json(&self.path(MANIFEST), &self.manifest)
    }

    pub fn run_all(&mut self) -> Result<RunReport> {
        for stage in self.plan_stages() {
            self.run_stage(stage)?;
        }
        read_json(&self.path(REPORT_JSON))
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let inputs = self.verify_inputs(stage)?;
        match stage {
            Stage::Preprocess => self.preprocess(inputs),
            Stage::Train => self.train(inputs),
            Stage::Sample => self.sample(inputs),
            Stage::EmbedReal => self.embed(Stage::EmbedReal, inputs),
            Stage::EmbedSynthetic => self.embed(Stage::EmbedSynthetic, inputs),
            Stage::Cluster => self.cluster(inputs),
            Stage::Histogram => self.histogram(inputs),
            Stage::Plan => self.plan(inputs),
            Stage::Resample => self.resample(inputs),
            Stage::Mauve => self.mauve(inputs),
            Stage::Account => self.account(inputs),
            Stage::Canary => self.canary(inputs),
            Stage::Report => self.report_stage(inputs),
        }
    }

    fn real(&self) -> Result<Corpus> {
        Corpus::read_jsonl(self.path(REAL_CLEAN), CorpusRole::Real)
    }

    fn synthetic(&self) -> Result<Corpus> {
        Corpus::read_jsonl(self.path(SYNTHETIC), CorpusRole::Synthetic)
    }

    fn preprocess(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let source = self.config.data.real.clone();
        let raw = Corpus::read_jsonl(&source, CorpusRole::Real)?;
        let clean = preprocess(&raw, &self.config.preprocess, &SimpleTokenizer)?;
        if clean.is_empty() {
            return Err(Error::Config("preprocessing removed every real record".into()));
        }
        clean.write_jsonl(self.path(REAL_CLEAN))?;
        self.record(Stage::Preprocess, inputs, &[("data.real", &source)], vec![])
    }

    fn canary_specs(&self) -> Result<Vec<CanarySpec>> {
        let seed = self.seed(Stage::Canary);
        self.config
            .canary
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut spec = CanarySpec::new(&c.template, c.kind, c.repetitions, derive_seed(seed, &format!("canary-{i}")))?;
                spec.pool_size = c.pool_size;
                Ok(spec)
            })
            .collect()
    }

    fn train(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let seed = self.seed(Stage::Train);
        let mut corpus = self.real()?;
        let delta = self.config.checked_delta(corpus.len())?;
        for (i, spec) in self.canary_specs()?.iter().enumerate() {
            corpus = inject(&corpus, spec, derive_seed(seed, &format!("inject-{i}")))?;
        }
        let t = &self.config.train;
        let n = corpus.len();
        let q = (t.batch_size as f64 / n as f64).min(1.0);
        let steps = steps_for(t.epochs as u64, n as u64, t.batch_size as u64);
        let sigma = match t.noise_multiplier {
            Some(s) => s,
            None => self.calibrate_training(q, steps, delta)?,
        };
        let config = DpAdamConfig {
            clip: t.clip,
            noise_multiplier: sigma,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            seed,
            ..DpAdamConfig::default()
        };
        let mut model = ToyLanguageModel::new(self.config.model, derive_seed(seed, "init"))?;
        let report = train(&mut model, &corpus, &config)?;
        model.save(self.path(MODEL))?;
        write_json(&self.path(TRAIN_LOG), &TrainSummary::from(&report))?;
        let mut metrics = Vec::new();
        report.write_metrics(&mut metrics)?;
        fs::write(self.path(TRAIN_METRICS), metrics).map_err(|e| Error::io(self.path(TRAIN_METRICS), e))?;
        self.record(Stage::Train, inputs, &[], vec![report.privacy_spec()])
    }

    fn histogram_spec(&self) -> Option<MechanismSpec> {
        (self.config.histogram.sigma > 0.0).then(|| MechanismSpec::gaussian(self.config.histogram.sigma, 1.0))
    }

    /// Training σ such that training, the histogram release and any external
    /// mechanisms together meet the target ε.
    fn calibrate_training(&self, q: f64, steps: u64, delta: f64) -> Result<f64> {
        let target = self
            .config
            .privacy
            .target_epsilon
            .ok_or_else(|| Error::Config("set train.noise_multiplier or privacy.target_epsilon".into()))?;
        let hist = self
            .histogram_spec()
            .ok_or_else(|| Error::Config("cannot calibrate against a target ε with a noiseless histogram".into()))?;
        let external = self.config.privacy.external.clone();
        calibrate_with(target, delta, &self.config.privacy.discretization(), (0.2, 100.0), |sigma| {
            let mut specs = vec![MechanismSpec::subsampled_gaussian(sigma, q, steps), hist];
            specs.extend(external.iter().cloned());
            specs
        })
        .map_err(|e| match e {
            Error::Calibration(m) => Error::Config(format!("cannot reach ε = {target}: {m}")),
            other => other,
        })
    }

    fn sample(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let out = self.path(SYNTHETIC);
        if let Some(src) = self.config.data.synthetic.clone() {
            let corpus = Corpus::read_jsonl(&src, CorpusRole::Synthetic)?;
            Corpus::new(CorpusRole::Synthetic, corpus.records).write_jsonl(&out)?;
            return self.record(Stage::Sample, inputs, &[("data.synthetic", &src)], vec![]);
        }
        let model = ToyLanguageModel::load(self.path(MODEL))?;
        let s = &self.config.sample;
        let config = SamplingConfig {
            top_p: s.top_p,
            temperature: s.temperature,
            max_len: None,
            seed: self.seed(Stage::Sample),
        };
        sample(&model, &config, s.count)?.write_jsonl(&out)?;
        self.record(Stage::Sample, inputs, &[], vec![])
    }

    fn embed(&mut self, stage: Stage, inputs: BTreeMap<String, String>) -> Result<()> {
        let (corpus, imported, out, label) = if stage == Stage::EmbedReal {
            (self.real()?, self.config.data.real_embeddings.clone(), REAL_EMB, "data.real_embeddings")
        } else {
            (self.synthetic()?, self.config.data.synthetic_embeddings.clone(), SYN_EMB, "data.synthetic_embeddings")
        };
        let matrix = match &imported {
            Some(path) => {
                let m = read_embeddings(path)?;
                validate_alignment(&m, &corpus)?;
                m
            }
            None => HashingFeaturizer::new(self.config.embed.dim)?.embed_corpus(&corpus)?,
        };
        write_embeddings(&matrix, self.path(out))?;
        let external: Vec<(&str, &Path)> = imported.iter().map(|p| (label, p.as_path())).collect();
        self.record(stage, inputs, &external, vec![])
    }

    fn cluster(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let syn = read_embeddings(self.path(SYN_EMB))?;
        let h = &self.config.histogram;
        if h.k > syn.count() {
            return Err(Error::Config(format!("histogram.k = {} exceeds the {} synthetic records", h.k, syn.count())));
        }
        let config = KMeansConfig {
            max_iters: h.max_iters,
            normalized: h.normalized,
            ..KMeansConfig::new(h.k, self.seed(Stage::Cluster))
        };
        kmeans_fit(&syn, &config)?.save(self.path(CLUSTERS))?;
        self.record(Stage::Cluster, inputs, &[], vec![])
    }

    fn histogram(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let model = ClusterModel::load(self.path(CLUSTERS))?;
        let real = read_embeddings(self.path(REAL_EMB))?;
        self.config.checked_delta(real.count())?;
        let votes = build_histogram(&model, &real)?;
        let hist = privatize(&votes, self.config.histogram.sigma, self.seed(Stage::Histogram))?;
        write_json(
            &self.path(HISTOGRAM),
            &ReleasedHistogram {
                k: hist.k,
                sigma: hist.sigma,
                n_real: hist.n_real,
                noised: hist.noised.clone(),
                densities: hist.densities.clone(),
            },
        )?;
        fs::write(self.path(HISTOGRAM_VOTES), hist.to_report()?).map_err(|e| Error::io(self.path(HISTOGRAM_VOTES), e))?;
        let sigma = self.config.histogram.sigma;
        let mechanisms = if sigma > 0.0 {
            vec![MechanismSpec::gaussian(sigma, 1.0)]
        } else {
            vec![MechanismSpec {
                kind: MechanismKind::Gaussian { sigma: 0.0, sensitivity: 1.0 },
                repetitions: 1,
            }]
        };
        self.record(Stage::Histogram, inputs, &[], mechanisms)
    }

    fn target_total(&self, hist: &ReleasedHistogram) -> u64 {
        self.config.resample.target.unwrap_or(hist.n_real)
    }

    fn plan(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let hist: ReleasedHistogram = read_json(&self.path(HISTOGRAM))?;
        let model = ClusterModel::load(self.path(CLUSTERS))?;
        let p = plan(&hist.densities, &model.group_sizes(), self.target_total(&hist))?;
        write_json(&self.path(PLAN), &p)?;
        self.record(Stage::Plan, inputs, &[], vec![])?;
        if !p.feasible && !self.config.resample.with_replacement {
            return Err(Error::NeedMoreSamples { deficits: p.deficits });
        }
        Ok(())
    }

    fn resample(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let p: SelectionPlan = read_json(&self.path(PLAN))?;
        let model = ClusterModel::load(self.path(CLUSTERS))?;
        let pool = self.synthetic()?;
        let result = resample(&p, &model, self.seed(Stage::Resample), self.config.resample.with_replacement)?;
        result.select_corpus(&pool)?.write_jsonl(self.path(SELECTED))?;
        write_json(&self.path(SELECTION), &result)?;
        self.record(Stage::Resample, inputs, &[], vec![])
    }

    fn mauve(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let seed = self.seed(Stage::Mauve);
        let real = self.real()?;
        let real_emb = read_embeddings(self.path(REAL_EMB))?;
        let pool = self.synthetic()?;
        let pool_emb = read_embeddings(self.path(SYN_EMB))?;
        let selection: SelectionResult = read_json(&self.path(SELECTION))?;
        let chosen = selection.indices();
        if chosen.is_empty() {
            return Err(Error::InvalidValue("the selection is empty; nothing to score".into()));
        }
        let size = chosen.len().min(pool.len());
        let mut order: Vec<usize> = (0..pool.len()).collect();
        CounterRng::new(derive_seed(seed, "initial-subsample")).shuffle(&mut order);
        let initial: Vec<usize> = order[..size].to_vec();

        let m = &self.config.mauve;
        let score = |idx: &[usize], label: &str| -> Result<MauvePair> {
            let corpus = Corpus::new(CorpusRole::Synthetic, idx.iter().map(|&i| pool.records[i].clone()).collect());
            let emb: EmbeddingMatrix = pool_emb.select_rows(idx);
            let (p, q) = unigram_histograms(&real, &corpus, &SimpleTokenizer)?;
            let unigram = mauve_score(&p, &q, &MauveConfig { c: m.c_unigram, lambda_grid: m.lambda_grid })?.score;
            if m.bins > real_emb.count() + emb.count() {
                return Err(Error::Config(format!("mauve.bins = {} exceeds the {} points being quantized", m.bins, real_emb.count() + emb.count())));
            }
            let (p, q) = cluster_histograms(&real_emb, &emb, m.bins, derive_seed(seed, label))?;
            let embedding = mauve_score(&p, &q, &MauveConfig { c: m.c_embedding, lambda_grid: m.lambda_grid })?.score;
            Ok(MauvePair { unigram, embedding })
        };
        let artifact = MauveArtifact {
            initial: score(&initial, "initial")?,
            selected: score(&chosen, "selected")?,
            compared_size: size,
            c_unigram: m.c_unigram,
            c_embedding: m.c_embedding,
            bins: m.bins,
        };
        write_json(&self.path(MAUVE), &artifact)?;
        self.record(Stage::Mauve, inputs, &[], vec![])
    }

    fn account(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let hist: ReleasedHistogram = read_json(&self.path(HISTOGRAM))?;
        let delta = self.config.checked_delta(hist.n_real as usize)?;
        let mut specs = Vec::new();
        let mut charged = Vec::new();
        let mut non_private = Vec::new();
        for s in STAGES.iter().filter(|s| s.access == RealAccess::Private) {
            let Some(record) = self.manifest.stages.get(&s.stage) else {
                if s.stage == Stage::Train && self.config.imported_synthetic() {
                    continue;
                }
                return Err(Error::IncompleteRun(format!("private stage {} has not run", s.stage.name())));
            };
            if record.mechanisms.is_empty() {
                return Err(Error::IncompleteRun(format!("private stage {} recorded no mechanism", s.stage.name())));
            }
            charged.push(s.stage.name().to_string());
            for m in &record.mechanisms {
                if mechanism_sigma(m) == 0.0 {
                    non_private.push(s.stage.name().to_string());
                } else {
                    specs.push(*m);
                }
            }
        }
        specs.extend(self.config.privacy.external.iter().cloned());
        let budget = if non_private.is_empty() {
            Some(budget(&specs, delta, &self.config.privacy.discretization(), Some(self.config.privacy.epsilon_tolerance))?)
        } else {
            None
        };
        write_json(
            &self.path(BUDGET),
            &AccountArtifact {
                budget,
                delta,
                non_private,
                charged_stages: charged,
            },
        )?;
        self.record(Stage::Account, inputs, &[], vec![])
    }

    fn canary(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let model = ToyLanguageModel::load(self.path(MODEL))?;
        let seed = self.seed(Stage::Canary);
        let sampling = SamplingConfig {
            top_p: self.config.sample.top_p,
            temperature: self.config.sample.temperature,
            max_len: None,
            seed: derive_seed(seed, "scan"),
        };
        let reports = self
            .canary_specs()?
            .iter()
            .zip(&self.config.canary)
            .enumerate()
            .map(|(i, (spec, c))| evaluate(&model, spec, c.scan_count, &sampling, derive_seed(seed, &format!("rank-{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let artifact = LeakageArtifact {
            min_rank: min_rank(&reports),
            reports,
        };
        write_json(&self.path(LEAKAGE), &artifact)?;
        self.record(Stage::Canary, inputs, &[], vec![])
    }

    fn report_stage(&mut self, inputs: BTreeMap<String, String>) -> Result<()> {
        let report = self.report()?;
        write_json(&self.path(REPORT_JSON), &report)?;
        fs::write(self.path(REPORT_TEXT), report.to_text()).map_err(|e| Error::io(self.path(REPORT_TEXT), e))?;
        self.record(Stage::Report, inputs, &[], vec![])
    }

    /// Consolidated report from the artifacts of a completed run.
    pub fn report(&self) -> Result<RunReport> {
        let need = |a: &str| -> Result<PathBuf> {
            let p = self.path(a);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::IncompleteRun(format!("{a} is missing from {}", self.work.display())))
            }
        };
        let p: SelectionPlan = read_json(&need(PLAN)?)?;
        let selection: SelectionResult = read_json(&need(SELECTION)?)?;
        let mauve: MauveArtifact = read_json(&need(MAUVE)?)?;
        let account: AccountArtifact = read_json(&need(BUDGET)?)?;
        let leakage = if self.config.canary.is_empty() { None } else { Some(read_json(&need(LEAKAGE)?)?) };
        Ok(RunReport {
            real_records: count_lines(&need(REAL_CLEAN)?)?,
            synthetic_records: count_lines(&need(SYNTHETIC)?)?,
            target_total: p.target_total,
            planned_total: p.total_selected,
            selected_records: selection.actual_size,
            k: p.k(),
            plan_feasible: p.feasible,
            total_deficit: p.deficits.iter().sum(),
            clusters_short: p.deficits.iter().filter(|d| **d > 0).count(),
            replacement_used: selection.replacement_used,
            mauve,
            epsilon: account.budget.as_ref().map(|b| b.epsilon),
            delta: account.delta,
            epsilon_error_bound: account.budget.as_ref().map(|b| b.epsilon_error_bound),
            non_private: account.non_private,
            leakage,
        })
    }
}

fn mechanism_sigma(m: &MechanismSpec) -> f64 {
    match m.kind {
        MechanismKind::Gaussian { sigma, .. } | MechanismKind::SubsampledGaussian { sigma, .. } => sigma,
    }
}

fn count_lines(path: &Path) -> Result<usize> {
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?.lines().filter(|l| !l.trim().is_empty()).count())
}

/// Training log without per-step metrics (those go to the JSONL file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub max_contribution_norm: f64,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            steps: r.steps,
            sampling_rate: r.sampling_rate,
            noise_multiplier: r.noise_multiplier,
            first_loss: r.loss_trace.first().copied().unwrap_or(f64::NAN),
            last_loss: r.loss_trace.last().copied().unwrap_or(f64::NAN),
            max_contribution_norm: r.max_contribution_norm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_table_passes_the_ledger_check() {
        check_stage_graph(STAGES).unwrap();
    }

    #[test]
    fn unledgered_real_read_is_rejected() {
        let mut stages = STAGES.to_vec();
        let cluster = stages.iter_mut().find(|s| s.stage == Stage::Cluster).unwrap();
        cluster.inputs = &[SYN_EMB, REAL_EMB];
        assert!(check_stage_graph(&stages).is_err());

        let mut stages = STAGES.to_vec();
        let mauve = stages.iter_mut().find(|s| s.stage == Stage::Mauve).unwrap();
        mauve.outputs = &[MAUVE];
        mauve.diagnostics = &[];
        assert!(check_stage_graph(&stages).is_err());

        let mut stages = STAGES.to_vec();
        let hist = stages.iter_mut().find(|s| s.stage == Stage::Histogram).unwrap();
        hist.access = RealAccess::Curation;
        assert!(check_stage_graph(&stages).is_err());
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c = PipelineConfig::from_toml("[data]\nreal = \"r.jsonl\"\n", Path::new("/base")).unwrap();
        assert_eq!(c.data.real, PathBuf::from("/base/r.jsonl"));
        assert_eq!(c.work_dir, PathBuf::from("/base/run"));
        assert_eq!((c.histogram.k, c.histogram.sigma, c.sample.top_p, c.train.clip), (1000, 10.0, 0.95, 0.5));
        assert_eq!((c.mauve.c_unigram, c.mauve.c_embedding, c.mauve.bins), (5.0, 10.0, 500));
        assert!(matches!(PipelineConfig::from_toml("[data]\nreal = \"r\"\nbogus = 1\n", Path::new(".")), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("", Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn delta_guard() {
        let mut c = PipelineConfig::from_toml("[data]\nreal = \"r\"\n[privacy]\ndelta = 1e-4\n", Path::new(".")).unwrap();
        assert!(c.checked_delta(999).is_ok());
        assert!(matches!(c.checked_delta(1000), Err(Error::Config(_))));
        c.privacy.allow_large_delta = true;
        assert!(c.checked_delta(1000).is_ok());
        c.privacy.delta = None;
        assert!(c.checked_delta(10).is_err());
    }

    #[test]
    fn explain_lists_named_defaults() {
        let text = explain_defaults();
        for key in ["histogram.k", "histogram.sigma", "sample.top_p", "train.clip", "mauve.c_unigram", "mauve.c_embedding", "mauve.bins"] {
            assert!(text.contains(key), "{key}");
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in STAGES {
            assert_eq!(Stage::parse(s.stage.name()), Some(s.stage));
        }
    }
}
