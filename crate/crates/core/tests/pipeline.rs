use std::fs;
use std::path::Path;

use dpsyn_core::accountant::{epsilon_for, steps_for, Discretization, MechanismSpec};
use dpsyn_core::pipeline::*;
use dpsyn_core::testbed::toy_instruction_corpus;
use dpsyn_core::Error;

const CONFIG: &str = r#"
work_dir = "run"
seed = 7

[data]
real = "real.jsonl"

[train]
epochs = 1
batch_size = 64
noise_multiplier = 1.0

[sample]
count = 2000

[embed]
dim = 32

[histogram]
k = 10
sigma = 10.0

[resample]
with_replacement = true

[mauve]
bins = 40
lambda_grid = 100

[privacy]
delta = 1e-5
"#;

fn setup(dir: &Path, extra: &str) -> PipelineConfig {
    toy_instruction_corpus(800, 3).write_jsonl(dir.join("real.jsonl")).unwrap();
    PipelineConfig::from_toml(&format!("{CONFIG}{extra}"), dir).unwrap()
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_run_is_deterministic_and_reported() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let report = Pipeline::open(setup(a.path(), "")).unwrap().run_all().unwrap();
    Pipeline::open(setup(b.path(), "")).unwrap().run_all().unwrap();
    let (oa, ob) = (outputs(&a.path().join("run")), outputs(&b.path().join("run")));
    assert_eq!(oa.len(), ob.len());
    for ((name, x), (_, y)) in oa.iter().zip(&ob) {
        assert!(x == y, "{name} differs between identical runs");
    }

    assert!(report.real_records > 0 && report.synthetic_records == 2000);
    assert!(report.selected_records >= report.target_total);
    assert_eq!(report.target_total, report.real_records as u64);
    assert_eq!(report.k, 10);
    for s in [report.mauve.initial.unigram, report.mauve.selected.unigram, report.mauve.initial.embedding, report.mauve.selected.embedding] {
        assert!(s > 0.0 && s <= 1.0);
    }
    assert!(report.leakage.is_none());
    assert!(report.to_text().contains("leakage                      skipped"));

    // The run's ε equals a direct accountant call on the same mechanisms.
    let n = report.real_records as u64;
    let train = MechanismSpec::subsampled_gaussian(1.0, 64.0 / n as f64, steps_for(1, n, 64));
    let direct = epsilon_for(&[train, MechanismSpec::gaussian(10.0, 1.0)], 1e-5, &Discretization::default()).unwrap();
    assert_eq!(report.epsilon, Some(direct));

    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(a.path().join("run").join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest.stages[&Stage::Train].mechanisms, vec![train]);
    assert!(!fs::read_to_string(a.path().join("run").join(HISTOGRAM)).unwrap().contains("raw"));
}

#[test]
fn tampered_intermediate_is_stale() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(setup(dir.path(), "")).unwrap();
    for stage in [Stage::Preprocess, Stage::Train, Stage::Sample] {
        p.run_stage(stage).unwrap();
    }
    let syn = p.path(SYNTHETIC);
    let mut text = fs::read_to_string(&syn).unwrap();
    text.push_str("{\"id\":\"extra\",\"text\":\"sneaky\"}\n");
    fs::write(&syn, text).unwrap();
    assert!(matches!(p.run_stage(Stage::EmbedSynthetic), Err(Error::StaleInput { .. })));
}

#[test]
fn missing_upstream_and_incomplete_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(setup(dir.path(), "")).unwrap();
    assert!(matches!(p.run_stage(Stage::Cluster), Err(Error::MissingArtifact(_))));
    assert!(matches!(p.report(), Err(Error::IncompleteRun(_))));
}

#[test]
fn infeasible_plan_without_replacement() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = setup(dir.path(), "");
    config.resample.with_replacement = false;
    config.resample.target = Some(1_000_000);
    let mut p = Pipeline::open(config).unwrap();
    let err = p.run_all().unwrap_err();
    assert!(matches!(err, Error::NeedMoreSamples { .. }));
    assert!(err.to_string().starts_with("Need more initial samples."));
    assert!(p.path(PLAN).exists());
}

#[test]
fn delta_guard_blocks_private_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = setup(dir.path(), "");
    config.privacy.delta = Some(0.01);
    let mut p = Pipeline::open(config).unwrap();
    p.run_stage(Stage::Preprocess).unwrap();
    assert!(matches!(p.run_stage(Stage::Train), Err(Error::Config(_))));
}

#[test]
fn canary_stage_reports_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#"
[[canary]]
template = "My phone number is {secret}."
kind = "phone"
repetitions = 10
pool_size = 50
scan_count = 20
"#;
    let report = Pipeline::open(setup(dir.path(), extra)).unwrap().run_all().unwrap();
    let leakage = report.leakage.expect("canary configured");
    assert_eq!(leakage.reports.len(), 1);
    let r = &leakage.reports[0];
    assert!(r.loss_rank >= 1 && r.loss_rank <= 50);
    assert_eq!(leakage.min_rank, Some(r.loss_rank));
    assert_eq!(r.unprompted_count, 20);
}
