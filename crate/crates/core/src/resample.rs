//! Per-cluster resampling of the synthetic pool to match a private
//! histogram, and planning of the initial pool size such a selection needs.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::corpus::{Corpus, CorpusRole, InstructionRecord};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// `⌈x⌉` clamped at zero, with products that land within floating-point
/// noise of an integer snapped to it (`T · h/N` for integer `h` is then the
/// exact rational ceiling).
pub fn cluster_target(total: u64, density: f64) -> u64 {
    let x = total as f64 * density;
    if !(x > 0.0) {
        return 0;
    }
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-12 * nearest.max(1.0) {
        nearest as u64
    } else {
        x.ceil() as u64
    }
}

/// Per-cluster quotas `n_i = max(⌈T·p_i⌉, 0)` and their shortfalls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub target_total: u64,
    pub targets: Vec<u64>,
    pub group_sizes: Vec<u64>,
    /// `max(n_i − |G_i|, 0)`.
    pub deficits: Vec<u64>,
    pub feasible: bool,
    /// `Σ n_i`; ceilings make this overshoot `T` slightly and nothing trims it.
    pub total_selected: u64,
}

impl SelectionPlan {
    pub fn k(&self) -> usize {
        self.targets.len()
    }
}

pub fn plan(densities: &[f64], group_sizes: &[u64], target_total: u64) -> Result<SelectionPlan> {
    if densities.len() != group_sizes.len() {
        return Err(Error::DimMismatch {
            expected: group_sizes.len(),
            found: densities.len(),
        });
    }
    if let Some(bad) = densities.iter().find(|d| !d.is_finite()) {
        return Err(Error::InvalidValue(format!("non-finite density {bad}")));
    }
    let targets: Vec<u64> = densities.iter().map(|&p| cluster_target(target_total, p)).collect();
    let deficits: Vec<u64> = targets
        .iter()
        .zip(group_sizes)
        .map(|(&n, &g)| n.saturating_sub(g))
        .collect();
    Ok(SelectionPlan {
        target_total,
        feasible: deficits.iter().all(|&d| d == 0),
        total_selected: targets.iter().sum(),
        group_sizes: group_sizes.to_vec(),
        deficits,
        targets,
    })
}

/// Indices into the synthetic pool chosen for each cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub per_cluster: Vec<Vec<usize>>,
    pub replacement_used: bool,
    pub actual_size: u64,
}

impl SelectionResult {
    /// All selected pool indices, cluster by cluster.
    pub fn indices(&self) -> Vec<usize> {
        self.per_cluster.iter().flatten().copied().collect()
    }

    /// The selected records as a corpus with role `selected`. Repeat draws
    /// (sampling with replacement) get ids suffixed `#2`, `#3`, ...
    pub fn select_corpus(&self, pool: &Corpus) -> Result<Corpus> {
        let mut copies = std::collections::HashMap::new();
        let mut records = Vec::with_capacity(self.actual_size as usize);
        for i in self.indices() {
            let src = pool.records.get(i).ok_or_else(|| {
                Error::Alignment {
                    expected: format!("pool index {i}"),
                    found: format!("{} records", pool.len()),
                }
            })?;
            let n = copies.entry(i).or_insert(0u32);
            *n += 1;
            let mut r: InstructionRecord = src.clone();
            if *n > 1 {
                r.id = format!("{}#{}", r.id, n);
            }
            records.push(r);
        }
        Ok(Corpus::new(CorpusRole::Selected, records))
    }
}

/// Uniformly sample `n_i` members of every group `G_i` (without replacement
/// unless `with_replacement`). Each cluster draws from its own stream derived
/// from `(seed, i)`.
pub fn resample(plan: &SelectionPlan, model: &ClusterModel, seed: u64, with_replacement: bool) -> Result<SelectionResult> {
    let groups = model.groups();
    if groups.len() != plan.k() {
        return Err(Error::DimMismatch {
            expected: groups.len(),
            found: plan.k(),
        });
    }
    if groups.iter().map(|g| g.len() as u64).ne(plan.group_sizes.iter().copied()) {
        return Err(Error::Argument("plan was computed against a different cluster model".into()));
    }
    if !plan.feasible && !with_replacement {
        return Err(Error::NeedMoreSamples {
            deficits: plan.deficits.clone(),
        });
    }
    let empty_but_needed: Vec<usize> = (0..plan.k())
        .filter(|&i| plan.targets[i] > 0 && groups[i].is_empty())
        .collect();
    if !empty_but_needed.is_empty() {
        return Err(Error::Unsatisfiable(empty_but_needed));
    }

    let per_cluster: Vec<Vec<usize>> = groups
        .iter()
        .zip(&plan.targets)
        .enumerate()
        .map(|(i, (group, &n))| {
            let mut rng = CounterRng::with_stream(seed, i as u64);
            let n = n as usize;
            if with_replacement {
                (0..n).map(|_| group[rng.below(group.len() as u64) as usize]).collect()
            } else {
                partial_shuffle(group, n, &mut rng)
            }
        })
        .collect();
    Ok(SelectionResult {
        actual_size: per_cluster.iter().map(|c| c.len() as u64).sum(),
        per_cluster,
        replacement_used: with_replacement,
    })
}

/// First `n` entries of a seeded Fisher–Yates pass over a copy of `items`.
fn partial_shuffle(items: &[usize], n: usize, rng: &mut CounterRng) -> Vec<usize> {
    let mut pool = items.to_vec();
    let n = n.min(pool.len());
    for i in 0..n {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}

/// Estimated initial pool size at which every cluster's expected supply
/// meets its quota: `max_i n_i / q_i` over clusters with `n_i > 0`, where
/// `q_i` is the synthetic mass of cluster `i`.
pub fn required_initial_multiplier(densities: &[f64], synthetic_fractions: &[f64], target_total: u64) -> Result<f64> {
    if densities.len() != synthetic_fractions.len() {
        return Err(Error::DimMismatch {
            expected: synthetic_fractions.len(),
            found: densities.len(),
        });
    }
    if synthetic_fractions.iter().any(|q| !(*q >= 0.0)) {
        return Err(Error::InvalidValue("synthetic fractions must be non-negative".into()));
    }
    let total: f64 = synthetic_fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!("synthetic fractions sum to {total}, not 1")));
    }
    let mut estimate = 0.0f64;
    let mut unsatisfiable = Vec::new();
    for (i, (&p, &q)) in densities.iter().zip(synthetic_fractions).enumerate() {
        let n = cluster_target(target_total, p);
        if n == 0 {
            continue;
        }
        if q == 0.0 {
            unsatisfiable.push(i);
            continue;
        }
        estimate = estimate.max(n as f64 / q);
    }
    if unsatisfiable.is_empty() {
        Ok(estimate)
    } else {
        Err(Error::Unsatisfiable(unsatisfiable))
    }
}

/// Pool-size estimate together with the exact check against the current groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEstimate {
    pub current_pool: u64,
    pub required_pool: f64,
    pub feasible_now: bool,
}

pub fn estimate_initial_pool(densities: &[f64], group_sizes: &[u64], target_total: u64) -> Result<PoolEstimate> {
    let pool: u64 = group_sizes.iter().sum();
    if pool == 0 {
        return Err(Error::InvalidValue("empty synthetic pool".into()));
    }
    let fractions: Vec<f64> = group_sizes.iter().map(|&g| g as f64 / pool as f64).collect();
    Ok(PoolEstimate {
        current_pool: pool,
        required_pool: required_initial_multiplier(densities, &fractions, target_total)?,
        feasible_now: plan(densities, group_sizes, target_total)?.feasible,
    })
}
