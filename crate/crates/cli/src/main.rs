//! `dpsyn`: command-line front end for the curation pipeline.
//!
//! Exit codes: 0 ok, 1 other failure, 2 config error, 3 infeasible plan,
//! 4 external-service failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpsyn_core::accountant::{budget, calibrate_sigma, Discretization, MechanismSpec};
use dpsyn_core::corpus::{Corpus, CorpusRole};
use dpsyn_core::embedding::{read_embeddings, validate_alignment, write_embeddings};
use dpsyn_core::generator::{SamplingConfig, ToyLanguageModel};
use dpsyn_core::leakage::{evaluate, CanarySpec, DEFAULT_SCAN_COUNT};
use dpsyn_core::pii::{screen_corpus, HttpChatClient, ScreenConfig, ScreenReport};
use dpsyn_core::pipeline::{explain_defaults, Pipeline, PipelineConfig, Stage};
use dpsyn_core::testbed::toy_instruction_corpus;
use dpsyn_core::Error;

#[derive(Parser)]
#[command(name = "dpsyn", version, about = "Private synthetic instruction curation")]
struct Cli {
    /// Print every named default with its meaning and exit.
    #[arg(long, global = true)]
    explain: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Clean the real corpus (filters, exact and n-gram dedup).
    Preprocess(ConfigArg),
    /// Train the toy generator with DP-Adam on the cleaned real corpus.
    Train(ConfigArg),
    /// Sample the initial synthetic corpus (or import the configured one).
    Sample(ConfigArg),
    /// Check an embedding file against its corpus, or run the pipeline's embedding stages.
    EmbedImport(EmbedImportArgs),
    /// Fit k-means on the synthetic embeddings.
    Cluster(ConfigArg),
    /// Release the noised histogram of real votes over synthetic clusters.
    Histogram(ConfigArg),
    /// Per-cluster selection targets and deficits.
    Plan(ConfigArg),
    /// Draw the selected synthetic corpus.
    Resample(ConfigArg),
    /// Score initial and selected corpora against the real one.
    Mauve(ConfigArg),
    /// Privacy budget of a composition, or calibrate σ for a target ε.
    Account(AccountArgs),
    /// Canary leakage audit of a trained generator.
    Canary(CanaryArgs),
    /// Flag PII in a corpus through a chat-completion endpoint.
    PiiScan(PiiScanArgs),
    /// Run every stage in order.
    RunAll(ConfigArg),
    /// Print the consolidated report of a completed run.
    Report(ReportArgs),
    /// Write the seeded toy instruction corpus used by the examples.
    ToyCorpus(ToyCorpusArgs),
}

#[derive(Args)]
struct EmbedImportArgs {
    #[arg(long, short, conflicts_with_all = ["corpus", "embeddings"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "embeddings")]
    corpus: Option<PathBuf>,
    /// DPEB1 embedding file.
    #[arg(long, requires = "corpus")]
    embeddings: Option<PathBuf>,
    /// Copy the validated file here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AccountArgs {
    /// Noise multiplier of DP-Adam (subsampled Gaussian).
    #[arg(long)]
    sigma: Option<f64>,
    /// Sampling rate B/N.
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Add one Gaussian histogram release with this σ (sensitivity 1).
    #[arg(long)]
    histogram_sigma: Option<f64>,
    /// JSON list of mechanisms, composed with the flags above.
    #[arg(long)]
    mechanisms: Option<PathBuf>,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = Discretization::default().grid)]
    grid: f64,
    /// Fail if the pessimistic/optimistic ε gap exceeds this.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Solve for the σ of DP-Adam that reaches this ε (needs --q and --steps).
    #[arg(long)]
    calibrate: Option<f64>,
}

#[derive(Args)]
struct CanaryArgs {
    /// Run the configured canary stage of a pipeline.
    #[arg(long, short, conflicts_with_all = ["model", "spec"])]
    config: Option<PathBuf>,
    /// Checkpoint to audit.
    #[arg(long, requires = "spec")]
    model: Option<PathBuf>,
    /// Canary spec (JSON CanarySpec).
    #[arg(long, requires = "model")]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SCAN_COUNT)]
    scan_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PiiScanArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Demonstrations inserted into the prompt.
    #[arg(long)]
    demos: Option<PathBuf>,
    /// Report path (JSON); with --resume, records already in it are skipped.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    /// TOML with `concurrency`, `requests_per_minute`, `[endpoint]` and `[retry]`.
    #[arg(long)]
    screen_config: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ToyCorpusArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Calibration(_) => 2,
        Error::NeedMoreSamples { .. } | Error::Unsatisfiable(_) => 3,
        Error::Service(_) => 4,
        _ => 1,
    }
}

fn open(config: &Path) -> Result<Pipeline, Error> {
    Pipeline::open(PipelineConfig::load(config)?)
}

fn stage(config: &Path, stages: &[Stage]) -> Result<(), Error> {
    let mut p = open(config)?;
    for s in stages {
        p.run_stage(*s)?;
        eprintln!("{} done", s.name());
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn account(a: &AccountArgs) -> Result<(), Error> {
    let disc = Discretization {
        grid: a.grid,
        ..Discretization::default()
    };
    if let Some(target) = a.calibrate {
        let (Some(q), Some(steps)) = (a.q, a.steps) else {
            return Err(Error::Argument("--calibrate needs --q and --steps".into()));
        };
        let sigma = calibrate_sigma(target, a.delta, q, steps, &disc)?;
        emit(format_args!("{}\n", serde_json::json!({"sigma": sigma, "target_epsilon": target, "delta": a.delta, "q": q, "steps": steps})))?;
        return Ok(());
    }
    let mut specs = Vec::new();
    match (a.sigma, a.q, a.steps) {
        (Some(sigma), Some(q), Some(steps)) => specs.push(MechanismSpec::subsampled_gaussian(sigma, q, steps)),
        (None, None, None) => {}
        _ => return Err(Error::Argument("--sigma, --q and --steps go together".into())),
    }
    if let Some(s) = a.histogram_sigma {
        specs.push(MechanismSpec::gaussian(s, 1.0));
    }
    if let Some(path) = &a.mechanisms {
        let extra: Vec<MechanismSpec> = serde_json::from_str(&read_text(path)?).map_err(|e| Error::Config(e.to_string()))?;
        specs.extend(extra);
    }
    if specs.is_empty() {
        return Err(Error::Argument("no mechanisms given".into()));
    }
    emit(format_args!("{}\n", budget(&specs, a.delta, &disc, a.tolerance)?.to_text()?))?;
    Ok(())
}

fn canary(a: &CanaryArgs) -> Result<(), Error> {
    if let Some(config) = &a.config {
        return stage(config, &[Stage::Canary]);
    }
    let (Some(model), Some(spec)) = (&a.model, &a.spec) else {
        return Err(Error::Argument("give --config, or --model with --spec".into()));
    };
    let model = ToyLanguageModel::load(model)?;
    let spec = CanarySpec::from_json(&read_text(spec)?)?;
    let sampling = SamplingConfig {
        seed: a.seed,
        ..SamplingConfig::default()
    };
    let report = evaluate(&model, &spec, a.scan_count, &sampling, a.seed)?;
    emit(format_args!("{}\n", serde_json::to_string_pretty(&report)?))?;
    Ok(())
}

fn embed_import(a: &EmbedImportArgs) -> Result<(), Error> {
    if let Some(config) = &a.config {
        return stage(config, &[Stage::EmbedReal, Stage::EmbedSynthetic]);
    }
    let (Some(corpus), Some(embeddings)) = (&a.corpus, &a.embeddings) else {
        return Err(Error::Argument("give --config, or --corpus with --embeddings".into()));
    };
    let corpus = Corpus::read_jsonl(corpus, CorpusRole::Synthetic)?;
    let matrix = read_embeddings(embeddings)?;
    validate_alignment(&matrix, &corpus)?;
    if let Some(out) = &a.out {
        write_embeddings(&matrix, out)?;
    }
    emit(format_args!("count {} dim {} fingerprint {}\n", matrix.count(), matrix.dim(), hex::encode(matrix.fingerprint())))?;
    Ok(())
}

fn pii_scan(a: &PiiScanArgs) -> Result<(), Error> {
    let mut config: ScreenConfig = match &a.screen_config {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => ScreenConfig::default(),
    };
    if let Some(v) = &a.base_url {
        config.endpoint.base_url = v.clone();
    }
    if let Some(v) = &a.model {
        config.endpoint.model = v.clone();
    }
    if let Some(v) = &a.api_key_env {
        config.endpoint.api_key_env = v.clone();
    }
    if let Some(v) = a.concurrency {
        config.concurrency = v;
    }
    let corpus = Corpus::read_jsonl(&a.corpus, CorpusRole::Real)?;
    let demos = a.demos.as_deref().map(read_text).transpose()?.unwrap_or_default();
    let previous = if a.resume && a.out.exists() {
        Some(ScreenReport::from_json(&read_text(&a.out)?)?)
    } else {
        None
    };
    let client = HttpChatClient::new(&config.endpoint)?;
    let report = screen_corpus(&corpus, &client, &demos, &config, previous.as_ref())?;
    fs::write(&a.out, report.to_json()?).map_err(|e| Error::Config(format!("{}: {e}", a.out.display())))?;
    emit(report.to_text())?;
    if let Some(first) = report.errors.first() {
        return Err(Error::Service(format!(
            "{} of {} records failed (first: {}: {})",
            report.errors.len(),
            corpus.len(),
            first.record_id,
            first.message
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.explain {
        emit(explain_defaults())?;
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Argument("no command given; see --help".into()));
    };
    match command {
        Command::Preprocess(c) => stage(&c.config, &[Stage::Preprocess]),
        Command::Train(c) => stage(&c.config, &[Stage::Train]),
        Command::Sample(c) => stage(&c.config, &[Stage::Sample]),
        Command::EmbedImport(a) => embed_import(&a),
        Command::Cluster(c) => stage(&c.config, &[Stage::Cluster]),
        Command::Histogram(c) => stage(&c.config, &[Stage::Histogram]),
        Command::Plan(c) => stage(&c.config, &[Stage::Plan]),
        Command::Resample(c) => stage(&c.config, &[Stage::Resample]),
        Command::Mauve(c) => stage(&c.config, &[Stage::Mauve]),
        Command::Account(a) => account(&a),
        Command::Canary(a) => canary(&a),
        Command::PiiScan(a) => pii_scan(&a),
        Command::RunAll(c) => {
            let report = open(&c.config)?.run_all()?;
            emit(report.to_text())?;
            Ok(())
        }
        Command::Report(r) => {
            let report = open(&r.config)?.report()?;
            if r.json {
                emit(format_args!("{}\n", serde_json::to_string_pretty(&report)?))?;
            } else {
                emit(report.to_text())?;
            }
            Ok(())
        }
        Command::ToyCorpus(t) => toy_instruction_corpus(t.n, t.seed).write_jsonl(&t.out),
    }
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: impl std::fmt::Display) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    match write!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.map_err(|source| Error::Io { path: "<stdout>".into(), source }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
