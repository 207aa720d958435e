//! Canary injection and memorization measurements: loss rank among
//! same-format alternatives, unprompted generation scans and greedy
//! completion of the canary prefix.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, InstructionRecord};
use crate::error::{Error, Result};
use crate::generator::{decode_tokens, greedy_completion, sample_tokens, SamplingConfig, ToyLanguageModel, BOS};
use crate::rng::{derive_seed, CounterRng};
use crate::testbed::{street_kinds, street_words};

pub const PLACEHOLDER: &str = "{secret}";
pub const DEFAULT_POOL_SIZE: usize = 10_000;
pub const DEFAULT_SCAN_COUNT: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecretKind {
    /// Ten random digits.
    Phone,
    /// `<number> <street word> <street kind>`.
    Address,
}

impl SecretKind {
    pub fn generate(self, rng: &mut CounterRng) -> String {
        match self {
            SecretKind::Phone => (0..10).map(|_| char::from(b'0' + rng.below(10) as u8)).collect(),
            SecretKind::Address => {
                let words = street_words();
                let kinds = street_kinds();
                format!(
                    "{} {} {}",
                    1 + rng.below(9999),
                    words[rng.below(words.len() as u64) as usize],
                    kinds[rng.below(kinds.len() as u64) as usize]
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanarySpec {
    /// Text with exactly one `{secret}` placeholder.
    pub template: String,
    pub secret: String,
    pub kind: SecretKind,
    pub repetitions: usize,
    pub pool_size: usize,
}

impl CanarySpec {
    pub fn new(template: &str, kind: SecretKind, repetitions: usize, seed: u64) -> Result<Self> {
        let mut rng = CounterRng::new(derive_seed(seed, "canary-secret"));
        let spec = Self {
            template: template.to_string(),
            secret: kind.generate(&mut rng),
            kind,
            repetitions,
            pool_size: DEFAULT_POOL_SIZE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.template.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::Argument(format!("canary template must contain exactly one {PLACEHOLDER}: {:?}", self.template)));
        }
        if self.repetitions == 0 || self.pool_size == 0 || self.secret.is_empty() {
            return Err(Error::Argument("canary needs a secret, repetitions ≥ 1 and pool size ≥ 1".into()));
        }
        Ok(())
    }

    pub fn fill(&self, secret: &str) -> String {
        self.template.replace(PLACEHOLDER, secret)
    }

    pub fn text(&self) -> String {
        self.fill(&self.secret)
    }

    /// Template text before the secret.
    pub fn prefix(&self) -> &str {
        &self.template[..self.template.find(PLACEHOLDER).unwrap_or(0)]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Append `repetitions` copies of the canary and shuffle with `seed`.
/// Must run after deduplication, which would collapse the copies.
pub fn inject(corpus: &Corpus, spec: &CanarySpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let text = spec.text();
    let mut records = corpus.records.clone();
    let tag = hex::encode(&crate::embedding::fingerprint_ids([text.as_str()])[..4]);
    records.extend((0..spec.repetitions).map(|k| InstructionRecord::new(format!("canary-{tag}-{k}"), text.clone())));
    CounterRng::new(derive_seed(seed, "inject")).shuffle(&mut records);
    let out = Corpus::new(corpus.role, records);
    out.validate()?;
    Ok(out)
}

/// `count` distinct secrets of the same kind and byte length as `secret`,
/// all different from it.
pub fn alternative_secrets(kind: SecretKind, secret: &str, count: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = CounterRng::new(derive_seed(seed, "canary-pool"));
    let mut seen: HashSet<String> = HashSet::from([secret.to_string()]);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 10) {
            return Err(Error::Argument(format!(
                "secret grammar cannot supply {count} alternatives of length {}",
                secret.len()
            )));
        }
        let candidate = kind.generate(&mut rng);
        if candidate.len() == secret.len() && seen.insert(candidate.clone()) {
            out.push(candidate);
        }
    }
    Ok(out)
}

/// `1 + #{alternatives with strictly lower loss}` among `pool_size − 1`
/// same-format alternatives. Only positions whose window overlaps the secret
/// are scored; the rest of the sequence is identical across candidates.
pub fn loss_rank(model: &ToyLanguageModel, spec: &CanarySpec, seed: u64) -> Result<usize> {
    spec.validate()?;
    let text = spec.text();
    if text.len() > model.config().max_len {
        return Err(Error::Argument(format!("canary text of {} bytes exceeds the model's max_len", text.len())));
    }
    let start = 1 + spec.prefix().len();
    let end = start + spec.secret.len() + model.config().context;
    let loss = |secret: &str| model.loss_between(&model.encode(&spec.fill(secret)), start, end);
    let own = loss(&spec.secret)?;
    let alternatives = alternative_secrets(spec.kind, &spec.secret, spec.pool_size - 1, seed)?;
    let lower = alternatives
        .par_iter()
        .map(|alt| loss(alt).map(|l| usize::from(l < own)))
        .collect::<Result<Vec<_>>>()?;
    Ok(1 + lower.iter().sum::<usize>())
}

/// For each secret, whether it appears verbatim in any of `count` unprompted
/// generations (sequence `i` drawn from stream `i` of the sampling seed).
pub fn scan_unprompted(model: &ToyLanguageModel, count: usize, sampling: &SamplingConfig, secrets: &[&str]) -> Vec<bool> {
    let hits: Vec<Vec<bool>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = CounterRng::with_stream(sampling.seed, i as u64);
            let text = decode_tokens(&sample_tokens(model, &[BOS], sampling, &mut rng));
            secrets.iter().map(|s| text.contains(s)).collect()
        })
        .collect();
    (0..secrets.len()).map(|j| hits.iter().any(|h| h[j])).collect()
}

/// Greedy completion of `prompt`; true iff it contains `secret`.
pub fn scan_prompted_with(model: &ToyLanguageModel, prompt: &str, secret: &str) -> Result<bool> {
    if prompt.contains(secret) {
        return Err(Error::Argument("prompt already contains the secret".into()));
    }
    Ok(greedy_completion(model, prompt, secret.len() + 8).contains(secret))
}

pub fn scan_prompted(model: &ToyLanguageModel, spec: &CanarySpec) -> Result<bool> {
    spec.validate()?;
    scan_prompted_with(model, spec.prefix(), &spec.secret)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub kind: SecretKind,
    pub repetitions: usize,
    pub loss_rank: usize,
    pub pool_size: usize,
    /// `None` when the unprompted scan was skipped.
    pub leaked_unprompted: Option<bool>,
    pub unprompted_count: usize,
    pub leaked_prompted: bool,
}

/// Loss rank, prompted completion and (if `scan_count > 0`) the unprompted scan.
pub fn evaluate(model: &ToyLanguageModel, spec: &CanarySpec, scan_count: usize, sampling: &SamplingConfig, seed: u64) -> Result<LeakageReport> {
    let leaked_unprompted = (scan_count > 0).then(|| scan_unprompted(model, scan_count, sampling, &[&spec.secret])[0]);
    Ok(LeakageReport {
        kind: spec.kind,
        repetitions: spec.repetitions,
        loss_rank: loss_rank(model, spec, seed)?,
        pool_size: spec.pool_size,
        leaked_unprompted,
        unprompted_count: scan_count,
        leaked_prompted: scan_prompted(model, spec)?,
    })
}

/// The better (lower) rank across canary types, as a summary.
pub fn min_rank(reports: &[LeakageReport]) -> Option<usize> {
    reports.iter().map(|r| r.loss_rank).min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{dedup_exact, CorpusRole};
    use crate::generator::{train, DpAdamConfig, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hidden_dim: 16,
            context: 4,
            max_len: 40,
        }
    }

    fn phone_spec(reps: usize, seed: u64) -> CanarySpec {
        let mut s = CanarySpec::new("My number is {secret}.", SecretKind::Phone, reps, seed).unwrap();
        s.pool_size = 500;
        s
    }

    #[test]
    fn spec_guards() {
        assert!(CanarySpec::new("no placeholder", SecretKind::Phone, 1, 0).is_err());
        assert!(CanarySpec::new("{secret} and {secret}", SecretKind::Phone, 1, 0).is_err());
        assert!(CanarySpec::new("x {secret}", SecretKind::Phone, 0, 0).is_err());
        let s = phone_spec(1, 0);
        assert_eq!(s.prefix(), "My number is ");
        assert_eq!(CanarySpec::from_json(&serde_json::to_string(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn injection_counts_and_dedup_order() {
        let base = Corpus::from_texts(CorpusRole::Real, "r", &["a", "b", "c"]);
        let one = inject(&base, &phone_spec(1, 0), 0).unwrap();
        assert_eq!(one.len(), 4);
        let spec = phone_spec(100, 0);
        let many = inject(&base, &spec, 0).unwrap();
        assert_eq!(many.texts().filter(|t| *t == spec.text()).count(), 100);
        assert_eq!(many, inject(&base, &spec, 0).unwrap());
        // Deduplicating after injection would undo it.
        assert_eq!(dedup_exact(&many).len(), 4);
    }

    #[test]
    fn alternatives_share_format() {
        for kind in [SecretKind::Phone, SecretKind::Address] {
            let spec = CanarySpec::new("at {secret}", kind, 1, 3).unwrap();
            let alts = alternative_secrets(kind, &spec.secret, 9_999, 1).unwrap();
            assert_eq!(alts.len(), 9_999);
            assert!(alts.iter().all(|a| a.len() == spec.secret.len() && *a != spec.secret));
            assert_eq!(alts.iter().collect::<HashSet<_>>().len(), alts.len());
        }
    }

    #[test]
    fn uniform_model_ties_give_rank_one() {
        let model = ToyLanguageModel::uniform(small()).unwrap();
        assert_eq!(loss_rank(&model, &phone_spec(1, 5), 0).unwrap(), 1);
    }

    #[test]
    fn untrained_model_rank_is_central() {
        let mut ranks: Vec<usize> = (0..50)
            .map(|t| {
                let model = ToyLanguageModel::new(small(), 100 + t).unwrap();
                loss_rank(&model, &phone_spec(1, t), t).unwrap()
            })
            .collect();
        ranks.sort_unstable();
        let median = ranks[25] as f64;
        assert!((0.3 * 500.0..=0.7 * 500.0).contains(&median), "median {median}");
    }

    fn overfit(spec: &CanarySpec) -> ToyLanguageModel {
        let base = Corpus::from_texts(
            CorpusRole::Real,
            "r",
            &["Explain tides.", "Write a poem.", "List facts.", "My number is 5550001111."],
        );
        let corpus = inject(&base, spec, 1).unwrap();
        let mut model = ToyLanguageModel::new(small(), 2).unwrap();
        let config = DpAdamConfig {
            clip: 1e9,
            batch_size: 16,
            learning_rate: 2e-2,
            epochs: 40,
            ..DpAdamConfig::default()
        };
        train(&mut model, &corpus, &config).unwrap();
        model
    }

    #[test]
    fn overfit_model_leaks() {
        let spec = phone_spec(100, 7);
        let model = overfit(&spec);
        assert_eq!(loss_rank(&model, &spec, 0).unwrap(), 1);
        assert!(scan_prompted(&model, &spec).unwrap());
        let sampling = SamplingConfig::default();
        assert_eq!(scan_unprompted(&model, 200, &sampling, &[&spec.secret, "no such thing"]), [true, false]);
        assert_eq!(scan_unprompted(&model, 0, &sampling, &[&spec.secret]), [false]);
        let report = evaluate(&model, &spec, 50, &sampling, 0).unwrap();
        assert_eq!(report.loss_rank, 1);
        assert_eq!(min_rank(&[report]), Some(1));
    }

    #[test]
    fn untrained_model_does_not_complete_secret() {
        for seed in 0..20 {
            let model = ToyLanguageModel::new(small(), seed).unwrap();
            assert!(!scan_prompted(&model, &phone_spec(1, seed)).unwrap());
        }
    }

    #[test]
    fn prompt_containing_secret_is_rejected() {
        let spec = phone_spec(1, 0);
        let model = ToyLanguageModel::uniform(small()).unwrap();
        assert!(scan_prompted_with(&model, &spec.text(), &spec.secret).is_err());
    }
}
