//! k-means over synthetic embeddings (k-means++ seeding, Lloyd iterations)
//! and exact nearest-centroid assignment.
//!
//! All distances accumulate in `f64` over `f32` inputs. Work is split into
//! fixed-size chunks whose partial results are merged in chunk order, so the
//! result does not depend on how many threads rayon happens to use.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

const CHUNK: usize = 2048;
const MODEL_MAGIC: &[u8; 6] = b"DPKM1\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// L2-normalize embeddings before clustering and assignment.
    pub normalized: bool,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            rel_tol: 1e-4,
            normalized: false,
        }
    }
}

/// Fitted centroids plus the cluster of every point they were fitted on.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    assignments: Vec<u32>,
    inertia: f64,
    seed: u64,
    normalized: bool,
    /// Inertia after every assignment step of the fit.
    inertia_trace: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = f64::from(x) - c;
            d * d
        })
        .sum()
}

#[inline]
fn sq_dist_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| {
            let d = f64::from(x) - f64::from(c);
            d * d
        })
        .sum()
}

/// Nearest centroid by squared distance; ties go to the lowest index.
#[inline]
fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn normalize_row(row: &[f32]) -> Vec<f32> {
    let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if norm == 0.0 {
        row.to_vec()
    } else {
        row.iter().map(|&v| (f64::from(v) / norm) as f32).collect()
    }
}

fn prepared_points(embeddings: &EmbeddingMatrix, normalized: bool) -> Vec<f32> {
    if normalized {
        embeddings.rows().flat_map(normalize_row).collect()
    } else {
        embeddings.as_slice().to_vec()
    }
}

struct AssignStep {
    assignments: Vec<u32>,
    distances: Vec<f64>,
    inertia: f64,
}

fn assign_all(points: &[f32], dim: usize, centroids: &[f64]) -> AssignStep {
    let per_chunk: Vec<(Vec<u32>, Vec<f64>)> = points
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            chunk
                .chunks_exact(dim)
                .map(|p| {
                    let (j, d) = nearest(p, centroids, dim);
                    (j as u32, d)
                })
                .unzip()
        })
        .collect();
    let mut assignments = Vec::with_capacity(points.len() / dim);
    let mut distances = Vec::with_capacity(points.len() / dim);
    let mut inertia = 0.0;
    for (a, d) in per_chunk {
        inertia += d.iter().sum::<f64>();
        assignments.extend(a);
        distances.extend(d);
    }
    AssignStep {
        assignments,
        distances,
        inertia,
    }
}

/// Recompute centroids as member means; returns per-cluster counts.
fn update_centroids(points: &[f32], dim: usize, k: usize, assignments: &[u32], centroids: &mut [f64]) -> Vec<usize> {
    let partials: Vec<(Vec<f64>, Vec<usize>)> = points
        .par_chunks(CHUNK * dim)
        .zip(assignments.par_chunks(CHUNK))
        .map(|(chunk, assign)| {
            let mut sums = vec![0.0f64; k * dim];
            let mut counts = vec![0usize; k];
            for (p, &a) in chunk.chunks_exact(dim).zip(assign) {
                let a = a as usize;
                counts[a] += 1;
                for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                    *s += f64::from(v);
                }
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (s, c) in partials {
        for (acc, v) in sums.iter_mut().zip(&s) {
            *acc += v;
        }
        for (acc, v) in counts.iter_mut().zip(&c) {
            *acc += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *c = s * inv;
            }
        }
    }
    counts
}

fn kmeans_pp_init(points: &[f32], dim: usize, k: usize, rng: &mut CounterRng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.below(n as u64) as usize;
    centroids.extend(points[first * dim..(first + 1) * dim].iter().map(|&v| f64::from(v)));
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            rng.weighted_index(&d2)
        } else {
            rng.below(n as u64) as usize
        };
        let start = centroids.len();
        centroids.extend(points[pick * dim..(pick + 1) * dim].iter().map(|&v| f64::from(v)));
        let newest = centroids[start..].to_vec();
        d2.par_chunks_mut(CHUNK)
            .zip(points.par_chunks(CHUNK * dim))
            .for_each(|(ds, chunk)| {
                for (d, p) in ds.iter_mut().zip(chunk.chunks_exact(dim)) {
                    let nd = sq_dist(p, &newest);
                    if nd < *d {
                        *d = nd;
                    }
                }
            });
    }
    centroids
}

/// Fit `config.k` clusters with k-means++ seeding followed by Lloyd
/// iterations, stopping once the relative inertia improvement drops below
/// `rel_tol` or after `max_iters` iterations.
pub fn kmeans_fit(embeddings: &EmbeddingMatrix, config: &KMeansConfig) -> Result<ClusterModel> {
    let n = embeddings.count();
    let dim = embeddings.dim();
    let k = config.k;
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Argument(format!("k = {k} exceeds the number of points ({n})")));
    }
    if config.max_iters == 0 {
        return Err(Error::Argument("max_iters must be at least 1".into()));
    }
    let points = prepared_points(embeddings, config.normalized);
    let mut rng = CounterRng::with_stream(config.seed, 0x6b6d);
    let mut centroids = kmeans_pp_init(&points, dim, k, &mut rng);

    let mut step = assign_all(&points, dim, &centroids);
    let mut trace = vec![step.inertia];
    for _ in 0..config.max_iters {
        let counts = update_centroids(&points, dim, k, &step.assignments, &mut centroids);
        repair_empty(&points, dim, &counts, &mut step, &mut centroids);
        let next = assign_all(&points, dim, &centroids);
        let prev = step.inertia;
        step = next;
        trace.push(step.inertia);
        if prev <= 0.0 || (prev - step.inertia) / prev < config.rel_tol {
            break;
        }
    }

    let centroids_f32: Vec<f32> = centroids.iter().map(|&c| c as f32).collect();
    // Final assignment against the stored (f32) centroids so that the cached
    // groups agree with `assign_nearest` on the same points.
    let rounded: Vec<f64> = centroids_f32.iter().map(|&c| f64::from(c)).collect();
    let last = assign_all(&points, dim, &rounded);
    Ok(ClusterModel {
        k,
        dim,
        centroids: centroids_f32,
        assignments: last.assignments,
        inertia: last.inertia,
        seed: config.seed,
        normalized: config.normalized,
        inertia_trace: trace,
    })
}

/// Reseed each empty cluster with the point currently farthest from its centroid.
fn repair_empty(points: &[f32], dim: usize, counts: &[usize], step: &mut AssignStep, centroids: &mut [f64]) {
    for (j, &count) in counts.iter().enumerate() {
        if count > 0 {
            continue;
        }
        let Some((far, _)) = step
            .distances
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
        else {
            return;
        };
        for (c, &v) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&points[far * dim..(far + 1) * dim]) {
            *c = f64::from(v);
        }
        step.distances[far] = 0.0;
        step.assignments[far] = j as u32;
    }
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn inertia_trace(&self) -> &[f64] {
        &self.inertia_trace
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Cluster index of every synthetic point, in input order.
    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    /// Member indices of each group `G_j`, in input order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, &a) in self.assignments.iter().enumerate() {
            groups[a as usize].push(i);
        }
        groups
    }

    /// `|G_j|` for every cluster.
    pub fn group_sizes(&self) -> Vec<u64> {
        let mut sizes = vec![0u64; self.k];
        for &a in &self.assignments {
            sizes[a as usize] += 1;
        }
        sizes
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign_nearest(&self, embedding: &[f32]) -> Result<usize> {
        if embedding.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: embedding.len(),
            });
        }
        let point;
        let point = if self.normalized {
            point = normalize_row(embedding);
            &point[..]
        } else {
            embedding
        };
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist_f32(point, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        Ok(best.0)
    }

    /// Nearest-centroid index for every row of `embeddings`.
    pub fn assign_matrix(&self, embeddings: &EmbeddingMatrix) -> Result<Vec<u32>> {
        if embeddings.count() == 0 {
            return Ok(Vec::new());
        }
        if embeddings.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: embeddings.dim(),
            });
        }
        let points = prepared_points(embeddings, self.normalized);
        let centroids: Vec<f64> = self.centroids.iter().map(|&c| f64::from(c)).collect();
        Ok(assign_all(&points, self.dim, &centroids).assignments)
    }

    /// Serialize: magic, u32 version, u32 K, u32 dim, u64 seed, u8 normalized,
    /// u32 point count, K·dim f32 centroids, u32 assignments, f64 inertia.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(u8::from(self.normalized));
        out.extend_from_slice(&(self.assignments.len() as u32).to_le_bytes());
        for c in &self.centroids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for a in &self.assignments {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out.extend_from_slice(&self.inertia.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..6] != MODEL_MAGIC {
            return Err(Error::BadMagic("cluster model".into()));
        }
        const HEADER: usize = 6 + 4 + 4 + 4 + 8 + 1 + 4;
        if bytes.len() < HEADER {
            return Err(Error::Truncated {
                expected: HEADER as u64,
                found: bytes.len() as u64,
            });
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if u32_at(6) != 1 {
            return Err(Error::Format("unsupported cluster model version".into()));
        }
        let k = u32_at(10);
        let dim = u32_at(14);
        let seed = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
        let normalized = bytes[26] != 0;
        let m = u32_at(27);
        let expected = HEADER + 4 * k * dim + 4 * m + 8;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected: expected as u64,
                found: bytes.len() as u64,
            });
        }
        let mut off = HEADER;
        let centroids: Vec<f32> = bytes[off..off + 4 * k * dim]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * k * dim;
        let assignments: Vec<u32> = bytes[off..off + 4 * m]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * m;
        let inertia = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidValue("non-finite centroid".into()));
        }
        if let Some(bad) = assignments.iter().find(|&&a| a as usize >= k) {
            return Err(Error::InvalidValue(format!("assignment {bad} out of range for k = {k}")));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            assignments,
            inertia,
            seed,
            normalized,
            inertia_trace: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        out.write_all(&self.encode()).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// A model with fixed centroids and no fitted points, for assignment only.
    pub fn from_centroids(k: usize, dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if centroids.len() != k * dim {
            return Err(Error::DimMismatch {
                expected: k * dim,
                found: centroids.len(),
            });
        }
        Ok(Self {
            k,
            dim,
            centroids,
            assignments: Vec::new(),
            inertia: 0.0,
            seed: 0,
            normalized: false,
            inertia_trace: Vec::new(),
        })
    }
}
