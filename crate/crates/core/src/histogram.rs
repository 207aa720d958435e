//! Real-sample votes over synthetic clusters, privatized with the Gaussian
//! mechanism.
//!
//! Each real record casts exactly one vote (for its nearest synthetic
//! centroid), so adding or removing one record moves one bin by one: the
//! vote vector has L2 sensitivity 1. Synthetic points enter only through the
//! centroids of an already fitted [`ClusterModel`].

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Raw votes, their noised release and the implied cluster densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateHistogram {
    pub k: usize,
    pub sigma: f64,
    pub seed: u64,
    pub n_real: u64,
    pub raw: Vec<u64>,
    /// `raw + z`, `z ~ N(0, σ² I)`; unrounded and possibly negative.
    pub noised: Vec<f64>,
    /// `noised / n_real`.
    pub densities: Vec<f64>,
}

/// Count, for every centroid, the real points whose nearest centroid it is.
pub fn build_histogram(model: &ClusterModel, real: &EmbeddingMatrix) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; model.k()];
    for a in model.assign_matrix(real)? {
        counts[a as usize] += 1;
    }
    Ok(counts)
}

/// Add i.i.d. `N(0, σ²)` noise to every bin, in bin order, from a stream
/// derived from `seed`.
pub fn privatize(raw: &[u64], sigma: f64, seed: u64) -> Result<PrivateHistogram> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let n_real: u64 = raw.iter().sum();
    let mut rng = CounterRng::with_stream(seed, 0x6869_7374);
    let noised: Vec<f64> = raw
        .iter()
        .map(|&h| {
            if sigma == 0.0 {
                h as f64
            } else {
                h as f64 + sigma * rng.standard_normal()
            }
        })
        .collect();
    let densities = if n_real == 0 {
        vec![0.0; raw.len()]
    } else {
        noised.iter().map(|v| v / n_real as f64).collect()
    };
    Ok(PrivateHistogram {
        k: raw.len(),
        sigma,
        seed,
        n_real,
        raw: raw.to_vec(),
        noised,
        densities,
    })
}

impl PrivateHistogram {
    /// Structured text report: raw integers, noised values to 17 significant
    /// digits, densities.
    pub fn to_report(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Report<'a> {
            k: usize,
            sigma: f64,
            seed: u64,
            n_real: u64,
            raw: &'a [u64],
            noised: Vec<String>,
            densities: Vec<String>,
        }
        let report = Report {
            k: self.k,
            sigma: self.sigma,
            seed: self.seed,
            n_real: self.n_real,
            raw: &self.raw,
            noised: self.noised.iter().map(|v| format!("{v:.16e}")).collect(),
            densities: self.densities.iter().map(|v| format!("{v:.16e}")).collect(),
        };
        Ok(serde_json::to_string_pretty(&report)?)
    }

    pub fn from_report(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Report {
            k: usize,
            sigma: f64,
            seed: u64,
            n_real: u64,
            raw: Vec<u64>,
            noised: Vec<String>,
            densities: Vec<String>,
        }
        let r: Report = serde_json::from_str(text)?;
        let parse = |v: &[String]| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}"))))
                .collect()
        };
        let hist = PrivateHistogram {
            k: r.k,
            sigma: r.sigma,
            seed: r.seed,
            n_real: r.n_real,
            noised: parse(&r.noised)?,
            densities: parse(&r.densities)?,
            raw: r.raw,
        };
        if hist.raw.len() != hist.k || hist.noised.len() != hist.k || hist.densities.len() != hist.k {
            return Err(Error::Format("histogram report bins disagree with k".into()));
        }
        Ok(hist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{kmeans_fit, KMeansConfig};

    fn random_matrix(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = CounterRng::new(seed);
        let data = (0..n * dim).map(|_| rng.normal(0.0, 1.0) as f32).collect();
        EmbeddingMatrix::unaligned(n, dim, data).unwrap()
    }

    #[test]
    fn centroids_as_reals_give_all_ones() {
        let centroids: Vec<f32> = (0..6).flat_map(|j| [j as f32 * 3.0, 1.0]).collect();
        let model = ClusterModel::from_centroids(6, 2, centroids.clone()).unwrap();
        let real = EmbeddingMatrix::unaligned(6, 2, centroids).unwrap();
        assert_eq!(build_histogram(&model, &real).unwrap(), vec![1; 6]);
        let empty = EmbeddingMatrix::unaligned(0, 2, Vec::new()).unwrap();
        assert_eq!(build_histogram(&model, &empty).unwrap(), vec![0; 6]);
    }

    #[test]
    fn votes_match_linear_scan_oracle() {
        let model = kmeans_fit(&random_matrix(300, 4, 1), &KMeansConfig::new(8, 1)).unwrap();
        let real = random_matrix(100, 4, 2);
        let mut expected = vec![0u64; 8];
        for row in real.rows() {
            let mut best = (0, f64::INFINITY);
            for j in 0..8 {
                let d: f64 = row.iter().zip(model.centroid(j)).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            expected[best.0] += 1;
        }
        assert_eq!(build_histogram(&model, &real).unwrap(), expected);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let model = ClusterModel::from_centroids(2, 3, vec![0.0; 6]).unwrap();
        let real = random_matrix(4, 2, 0);
        assert!(matches!(build_histogram(&model, &real), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn zero_sigma_is_exact() {
        let h = privatize(&[3, 0, 7], 0.0, 1).unwrap();
        assert_eq!(h.noised, [3.0, 0.0, 7.0]);
        assert_eq!(h.densities, [0.3, 0.0, 0.7]);
        assert!(privatize(&[1], -1.0, 1).is_err());
    }

    #[test]
    fn noise_is_reproducible_and_centered() {
        let raw = vec![5u64; 100_000];
        let a = privatize(&raw, 10.0, 77).unwrap();
        let b = privatize(&raw, 10.0, 77).unwrap();
        assert!(a.noised.iter().zip(&b.noised).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mean: f64 = a.noised.iter().map(|v| v - 5.0).sum::<f64>() / raw.len() as f64;
        assert!(mean.abs() < 3.0 * 10.0 / (raw.len() as f64).sqrt(), "mean {mean}");
        for (d, v) in a.densities.iter().zip(&a.noised) {
            assert_eq!(*d, v / a.n_real as f64);
        }
    }

    #[test]
    fn neighbouring_corpora_differ_in_one_bin_by_one() {
        let model = kmeans_fit(&random_matrix(200, 3, 5), &KMeansConfig::new(6, 5)).unwrap();
        for trial in 0..20u64 {
            let real = random_matrix(60, 3, 100 + trial);
            let drop = (trial as usize * 7) % 60;
            let keep: Vec<usize> = (0..60).filter(|&i| i != drop).collect();
            let neighbour = real.select_rows(&keep);
            let h1 = build_histogram(&model, &real).unwrap();
            let h2 = build_histogram(&model, &neighbour).unwrap();
            let l1: u64 = h1.iter().zip(&h2).map(|(a, b)| a.abs_diff(*b)).sum();
            assert_eq!(l1, 1);
        }
    }

    #[test]
    fn report_round_trip() {
        let h = privatize(&[10, 20, 30], 3.5, 9).unwrap();
        let back = PrivateHistogram::from_report(&h.to_report().unwrap()).unwrap();
        assert_eq!(back, h);
    }
}
