//! Histogram representations of corpora and the MAUVE divergence-frontier
//! score between two of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, KMeansConfig};
use crate::corpus::{Corpus, Tokenizer};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 1e-9;
pub const DEFAULT_LAMBDA_GRID: usize = 500;
pub const DEFAULT_CLUSTER_BINS: usize = 500;
pub const DEFAULT_C_UNIGRAM: f64 = 5.0;
pub const DEFAULT_C_EMBEDDING: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Unigram,
    EmbeddingCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionHistogram {
    pub masses: Vec<f64>,
    pub representation: Representation,
    pub smoothing_epsilon: f64,
    /// Bin names (tokens) for unigram histograms.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

impl DistributionHistogram {
    pub fn from_counts(counts: &[u64], representation: Representation) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidValue("histogram of nothing".into()));
        }
        Ok(Self {
            masses: counts.iter().map(|&c| c as f64 / total as f64).collect(),
            representation,
            smoothing_epsilon: DEFAULT_SMOOTHING,
            labels: Vec::new(),
        })
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    /// Masses after adding `smoothing_epsilon` to every bin and renormalizing.
    pub fn smoothed(&self) -> Vec<f64> {
        let eps = self.smoothing_epsilon;
        let z = 1.0 + eps * self.masses.len() as f64;
        self.masses.iter().map(|m| (m + eps) / z).collect()
    }

    /// Total-variation distance to another histogram over the same bins.
    pub fn total_variation(&self, other: &Self) -> Result<f64> {
        check_bins(self, other)?;
        Ok(0.5 * self.masses.iter().zip(&other.masses).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

fn check_bins(p: &DistributionHistogram, q: &DistributionHistogram) -> Result<()> {
    if p.bins() != q.bins() {
        return Err(Error::DimMismatch {
            expected: p.bins(),
            found: q.bins(),
        });
    }
    if !p.labels.is_empty() && !q.labels.is_empty() && p.labels != q.labels {
        return Err(Error::Argument("histograms are over different vocabularies".into()));
    }
    Ok(())
}

fn token_counts(corpus: &Corpus, tokenizer: &dyn Tokenizer) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for text in corpus.texts() {
        for token in tokenizer.tokenize(text) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    counts
}

fn unigram_over(counts: &BTreeMap<String, u64>, vocab: &[String]) -> Result<DistributionHistogram> {
    let c: Vec<u64> = vocab.iter().map(|t| counts.get(t).copied().unwrap_or(0)).collect();
    let mut h = DistributionHistogram::from_counts(&c, Representation::Unigram)
        .map_err(|_| Error::InvalidValue("corpus has no tokens".into()))?;
    h.labels = vocab.to_vec();
    Ok(h)
}

/// Token frequencies of one corpus over its own (sorted) vocabulary.
pub fn unigram_histogram(corpus: &Corpus, tokenizer: &dyn Tokenizer) -> Result<DistributionHistogram> {
    let counts = token_counts(corpus, tokenizer);
    let vocab: Vec<String> = counts.keys().cloned().collect();
    unigram_over(&counts, &vocab)
}

/// Token frequencies of both corpora over the union of their vocabularies.
pub fn unigram_histograms(p: &Corpus, q: &Corpus, tokenizer: &dyn Tokenizer) -> Result<(DistributionHistogram, DistributionHistogram)> {
    let (cp, cq) = (token_counts(p, tokenizer), token_counts(q, tokenizer));
    let mut vocab: Vec<String> = cp.keys().chain(cq.keys()).cloned().collect();
    vocab.sort_unstable();
    vocab.dedup();
    Ok((unigram_over(&cp, &vocab)?, unigram_over(&cq, &vocab)?))
}

/// Quantize both embedding sets with one k-means over their concatenation
/// and histogram each set over the shared clusters.
pub fn cluster_histograms(
    p: &EmbeddingMatrix,
    q: &EmbeddingMatrix,
    bins: usize,
    seed: u64,
) -> Result<(DistributionHistogram, DistributionHistogram)> {
    cluster_histograms_with(p, q, &KMeansConfig::new(bins, seed))
}

pub fn cluster_histograms_with(
    p: &EmbeddingMatrix,
    q: &EmbeddingMatrix,
    config: &KMeansConfig,
) -> Result<(DistributionHistogram, DistributionHistogram)> {
    if p.count() == 0 || q.count() == 0 {
        return Err(Error::InvalidValue("cannot histogram an empty embedding set".into()));
    }
    let joint = p.concat(q)?;
    if config.k > joint.count() {
        return Err(Error::Argument(format!("{} bins for {} points", config.k, joint.count())));
    }
    let model = kmeans_fit(&joint, config)?;
    let labels = model.assignments();
    let mut cp = vec![0u64; config.k];
    let mut cq = vec![0u64; config.k];
    for (i, &a) in labels.iter().enumerate() {
        if i < p.count() {
            cp[a as usize] += 1;
        } else {
            cq[a as usize] += 1;
        }
    }
    Ok((
        DistributionHistogram::from_counts(&cp, Representation::EmbeddingCluster)?,
        DistributionHistogram::from_counts(&cq, Representation::EmbeddingCluster)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MauveConfig {
    pub c: f64,
    /// Number of interior mixture weights `λ_i = i / (grid + 1)`.
    pub lambda_grid: usize,
}

impl MauveConfig {
    pub fn new(c: f64) -> Self {
        Self {
            c,
            lambda_grid: DEFAULT_LAMBDA_GRID,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MauveReport {
    pub score: f64,
    pub c: f64,
    pub lambda_grid: usize,
    /// `(exp(−c·KL(Q‖R_λ)), exp(−c·KL(P‖R_λ)))`, ordered by increasing first
    /// coordinate, endpoints `(0, 1)` and `(1, 0)` included.
    pub frontier: Vec<(f64, f64)>,
}

/// `KL(a ‖ λa' + (1−λ)b')` style sums with `0 · log 0 = 0`, in nats.
fn kl(a: &[f64], r: &[f64]) -> f64 {
    a.iter().zip(r).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
}

pub fn mauve_score(p: &DistributionHistogram, q: &DistributionHistogram, config: &MauveConfig) -> Result<MauveReport> {
    check_bins(p, q)?;
    if !(config.c > 0.0 && config.c.is_finite()) {
        return Err(Error::Argument(format!("scaling constant must be positive, got {}", config.c)));
    }
    if config.lambda_grid == 0 {
        return Err(Error::Argument("lambda grid must have at least one point".into()));
    }
    let (ps, qs) = (p.smoothed(), q.smoothed());
    let n = config.lambda_grid;
    let mut frontier = Vec::with_capacity(n + 2);
    frontier.push((0.0, 1.0));
    let mut r = vec![0.0; ps.len()];
    // λ descending gives x = exp(−c·KL(Q‖R)) ascending.
    for i in (1..=n).rev() {
        let lambda = i as f64 / (n + 1) as f64;
        for ((ri, pi), qi) in r.iter_mut().zip(&ps).zip(&qs) {
            *ri = lambda * pi + (1.0 - lambda) * qi;
        }
        frontier.push(((-config.c * kl(&qs, &r)).exp(), (-config.c * kl(&ps, &r)).exp()));
    }
    frontier.push((1.0, 0.0));
    let score = frontier
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(MauveReport {
        score,
        c: config.c,
        lambda_grid: n,
        frontier,
    })
}
