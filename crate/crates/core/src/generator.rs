//! A byte-level next-token model trained with DP-Adam and sampled with
//! nucleus sampling.
//!
//! The model sees a fixed window of the previous `context` tokens, embeds
//! each, concatenates the embeddings and applies one tanh hidden layer and a
//! softmax output. With `context = 1` it is a neural bigram. Positions are
//! independent given their windows, so per-example gradients are exact and
//! cheap.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::MechanismSpec;
use crate::corpus::{Corpus, CorpusRole, InstructionRecord};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB: usize = 259;

const CHECKPOINT_MAGIC: &[u8; 6] = b"DPTM1\0";
const CHECKPOINT_VERSION: u32 = 1;
/// Examples per deterministic reduction chunk in a DP-Adam step.
const GRAD_CHUNK: usize = 16;
const NOISE_STREAM: u64 = 0x6e6f_6973;
const SHUFFLE_STREAM: u64 = 0x7368_7566;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Number of previous tokens the model conditions on.
    pub context: usize,
    /// Maximum number of bytes per sequence (`L`); also the loss normalizer.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            context: 4,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl ModelConfig {
    fn input_dim(&self) -> usize {
        self.context * self.embed_dim
    }

    fn layout(&self) -> Layout {
        let emb = 0;
        let w1 = emb + VOCAB * self.embed_dim;
        let b1 = w1 + self.hidden_dim * self.input_dim();
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + VOCAB * self.hidden_dim;
        Layout {
            emb,
            w1,
            b1,
            w2,
            b2,
            total: b2 + VOCAB,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context == 0 || self.max_len == 0 {
            return Err(Error::Argument(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLanguageModel {
    config: ModelConfig,
    params: Vec<f64>,
}

/// Scratch buffers for one position.
struct Work {
    x: Vec<f64>,
    a: Vec<f64>,
    logits: Vec<f64>,
    da: Vec<f64>,
    dx: Vec<f64>,
}

impl Work {
    fn new(c: &ModelConfig) -> Self {
        Self {
            x: vec![0.0; c.input_dim()],
            a: vec![0.0; c.hidden_dim],
            logits: vec![0.0; VOCAB],
            da: vec![0.0; c.hidden_dim],
            dx: vec![0.0; c.input_dim()],
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `[BOS] + bytes + [EOS]`, bytes truncated to `max_len`.
pub fn encode_text(text: &str, max_len: usize) -> Vec<u32> {
    let bytes = text.as_bytes();
    let n = bytes.len().min(max_len);
    let mut out = Vec::with_capacity(n + 2);
    out.push(BOS);
    out.extend(bytes[..n].iter().map(|&b| u32::from(b)));
    out.push(EOS);
    out
}

/// Byte tokens back to text; special tokens are dropped.
pub fn decode_tokens(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

impl ToyLanguageModel {
    /// Small random initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = config.layout();
        let mut params = vec![0.0; l.total];
        let mut rng = CounterRng::with_stream(seed, 0x696e_6974);
        for p in &mut params[l.emb..l.w1] {
            *p = rng.normal(0.0, 0.1);
        }
        let s1 = 1.0 / (config.input_dim() as f64).sqrt();
        for p in &mut params[l.w1..l.b1] {
            *p = rng.normal(0.0, s1);
        }
        let s2 = 0.1 / (config.hidden_dim as f64).sqrt();
        for p in &mut params[l.w2..l.b2] {
            *p = rng.normal(0.0, s2);
        }
        Ok(Self { config, params })
    }

    /// All parameters zero: every next-token distribution is uniform.
    pub fn uniform(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: vec![0.0; config.layout().total],
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        encode_text(text, self.config.max_len)
    }

    fn check_sequence(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB) {
            return Err(Error::UnknownToken(t));
        }
        let bytes = tokens.iter().filter(|&&t| t < 256).count();
        if bytes > self.config.max_len {
            return Err(Error::Argument(format!("sequence of {bytes} bytes exceeds max_len {}", self.config.max_len)));
        }
        Ok(())
    }

    /// Token `i` of the window ending before position `t` (PAD before the start).
    #[inline]
    fn window(&self, tokens: &[u32], t: usize, i: usize) -> usize {
        let back = self.config.context - i;
        if t >= back {
            tokens[t - back] as usize
        } else {
            PAD as usize
        }
    }

    /// Logits for the token at position `t` given `tokens[..t]`; fills `w.x`,
    /// `w.a` and `w.logits`. `tokens[t]` itself is never read.
    fn forward(&self, tokens: &[u32], t: usize, w: &mut Work) {
        let c = &self.config;
        let l = c.layout();
        let e = c.embed_dim;
        for i in 0..c.context {
            let tok = self.window(tokens, t, i);
            w.x[i * e..(i + 1) * e].copy_from_slice(&self.params[l.emb + tok * e..l.emb + (tok + 1) * e]);
        }
        let d = c.input_dim();
        for h in 0..c.hidden_dim {
            let row = &self.params[l.w1 + h * d..l.w1 + (h + 1) * d];
            w.a[h] = (self.params[l.b1 + h] + dot(row, &w.x)).tanh();
        }
        let hd = c.hidden_dim;
        for v in 0..VOCAB {
            let row = &self.params[l.w2 + v * hd..l.w2 + (v + 1) * hd];
            w.logits[v] = self.params[l.b2 + v] + dot(row, &w.a);
        }
    }

    /// Softmax in place; returns log of the normalizer.
    fn softmax(logits: &mut [f64]) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in logits.iter_mut() {
            *v /= z;
        }
        max + z.ln()
    }

    /// `Σ −log p(tokens[t] | window)` over predicted positions
    /// `max(start, 1) ≤ t < end`, unnormalized.
    pub fn loss_between(&self, tokens: &[u32], start: usize, end: usize) -> Result<f64> {
        self.check_sequence(tokens)?;
        let mut w = Work::new(&self.config);
        let mut total = 0.0;
        for t in start.max(1)..end.min(tokens.len()) {
            self.forward(tokens, t, &mut w);
            let target = tokens[t] as usize;
            let z_target = w.logits[target];
            total += Self::softmax(&mut w.logits) - z_target;
        }
        Ok(total)
    }

    pub fn loss_from(&self, tokens: &[u32], start: usize) -> Result<f64> {
        self.loss_between(tokens, start, tokens.len())
    }

    /// Sequence loss `(Σ token cross-entropies) / L`.
    pub fn sequence_loss(&self, tokens: &[u32]) -> Result<f64> {
        Ok(self.loss_from(tokens, 1)? / self.config.max_len as f64)
    }

    /// Adds the gradient of the sequence loss to `grad`; returns the loss.
    fn accumulate_gradient(&self, tokens: &[u32], grad: &mut [f64], w: &mut Work) -> f64 {
        let c = &self.config;
        let l = c.layout();
        let (e, d, hd) = (c.embed_dim, c.input_dim(), c.hidden_dim);
        let inv_l = 1.0 / c.max_len as f64;
        let mut loss = 0.0;
        for t in 1..tokens.len() {
            self.forward(tokens, t, w);
            let target = tokens[t] as usize;
            let z_target = w.logits[target];
            loss += Self::softmax(&mut w.logits) - z_target;
            // dlogits = (p − onehot) / L, held in w.logits.
            w.logits[target] -= 1.0;
            w.da.iter_mut().for_each(|v| *v = 0.0);
            for v in 0..VOCAB {
                let g = w.logits[v] * inv_l;
                if g == 0.0 {
                    continue;
                }
                grad[l.b2 + v] += g;
                axpy(g, &w.a, &mut grad[l.w2 + v * hd..l.w2 + (v + 1) * hd]);
                axpy(g, &self.params[l.w2 + v * hd..l.w2 + (v + 1) * hd], &mut w.da);
            }
            w.dx.iter_mut().for_each(|v| *v = 0.0);
            for h in 0..hd {
                let dz = w.da[h] * (1.0 - w.a[h] * w.a[h]);
                grad[l.b1 + h] += dz;
                axpy(dz, &w.x, &mut grad[l.w1 + h * d..l.w1 + (h + 1) * d]);
                axpy(dz, &self.params[l.w1 + h * d..l.w1 + (h + 1) * d], &mut w.dx);
            }
            for i in 0..c.context {
                let tok = self.window(tokens, t, i);
                axpy(1.0, &w.dx[i * e..(i + 1) * e], &mut grad[l.emb + tok * e..l.emb + (tok + 1) * e]);
            }
        }
        loss * inv_l
    }

    /// Next-token probabilities after `history` with temperature applied to
    /// the logits.
    pub fn next_token_probs(&self, history: &[u32], temperature: f64) -> Vec<f64> {
        let mut w = Work::new(&self.config);
        self.next_probs_with(history, temperature, &mut w)
    }

    fn next_probs_with(&self, history: &[u32], temperature: f64, w: &mut Work) -> Vec<f64> {
        // Position `len` is one past the history; only its window is read.
        self.forward(history, history.len(), w);
        for v in w.logits.iter_mut() {
            *v /= temperature;
        }
        Self::softmax(&mut w.logits);
        w.logits.clone()
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(30 + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION, VOCAB as u32, c.embed_dim as u32, c.hidden_dim as u32, c.context as u32, c.max_len as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    /// Parameters are stored as f32 and widened on load.
    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 6 + 6 * 4;
        if bytes.len() < HEADER {
            return Err(Error::Truncated {
                expected: HEADER as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic("model checkpoint".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        if field(0) != CHECKPOINT_VERSION as usize || field(1) != VOCAB {
            return Err(Error::Format(format!("checkpoint version {} vocab {}", field(0), field(1))));
        }
        let config = ModelConfig {
            embed_dim: field(2),
            hidden_dim: field(3),
            context: field(4),
            max_len: field(5),
        };
        config.validate()?;
        let n = config.parameter_count();
        let expected = HEADER + 4 * n;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected: expected as u64,
                found: bytes.len() as u64,
            });
        }
        let params = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Gradient of `(Σ token cross-entropies) / L` for one sequence, and the loss.
pub fn per_example_gradient(model: &ToyLanguageModel, tokens: &[u32]) -> Result<(f64, Vec<f64>)> {
    model.check_sequence(tokens)?;
    let mut grad = vec![0.0; model.params.len()];
    let loss = model.accumulate_gradient(tokens, &mut grad, &mut Work::new(&model.config));
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpAdamConfig {
    pub clip: f64,
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DpAdamConfig {
    fn default() -> Self {
        Self {
            clip: 0.5,
            noise_multiplier: 0.0,
            batch_size: 64,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 1,
            seed: 0,
        }
    }
}

impl DpAdamConfig {
    fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) || !(self.noise_multiplier >= 0.0) || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Argument(format!("invalid DP-Adam config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(parameter_count: usize) -> Self {
        Self {
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update with gradient `g`.
pub fn adam_update(params: &mut [f64], state: &mut AdamState, g: &[f64], config: &DpAdamConfig) {
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_loss: f64,
    /// Largest clipped per-example contribution norm in the batch; never above `clip`.
    pub max_contribution_norm: f64,
    pub mean_raw_norm: f64,
}

/// Clip each example's gradient to norm `C`, sum, add `N(0, σ²C²)` per
/// coordinate, divide by the batch size and apply Adam.
pub fn dp_adam_step(
    model: &mut ToyLanguageModel,
    state: &mut AdamState,
    batch: &[&[u32]],
    config: &DpAdamConfig,
    noise: &mut CounterRng,
) -> Result<StepMetrics> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    for ex in batch {
        model.check_sequence(ex)?;
    }
    let n = model.params.len();
    let clip = config.clip;
    let frozen: &ToyLanguageModel = model;
    // Fixed chunks reduced in order: the sum does not depend on thread count.
    let partials: Vec<(Vec<f64>, f64, f64, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut sum = vec![0.0; n];
            let mut grad = vec![0.0; n];
            let mut work = Work::new(&frozen.config);
            let (mut loss, mut max_norm, mut raw) = (0.0, 0.0f64, 0.0);
            for ex in chunk {
                grad.iter_mut().for_each(|g| *g = 0.0);
                loss += frozen.accumulate_gradient(ex, &mut grad, &mut work);
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                let scale = if norm > clip { clip / norm } else { 1.0 };
                let contribution = norm * scale;
                assert!(contribution <= clip * (1.0 + 1e-12), "clipped norm {contribution} above {clip}");
                max_norm = max_norm.max(contribution);
                raw += norm;
                axpy(scale, &grad, &mut sum);
            }
            (sum, loss, max_norm, raw)
        })
        .collect();
    let mut total = vec![0.0; n];
    let (mut loss, mut max_norm, mut raw) = (0.0, 0.0f64, 0.0);
    for (sum, l, m, r) in &partials {
        axpy(1.0, sum, &mut total);
        loss += l;
        max_norm = max_norm.max(*m);
        raw += r;
    }
    let b = batch.len() as f64;
    let noise_sd = config.noise_multiplier * clip;
    for g in total.iter_mut() {
        if noise_sd > 0.0 {
            *g += noise_sd * noise.standard_normal();
        }
        *g /= b;
    }
    adam_update(&mut model.params, state, &total, config);
    Ok(StepMetrics {
        step: state.t,
        mean_loss: loss / b,
        max_contribution_norm: max_norm,
        mean_raw_norm: raw / b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
    pub loss_trace: Vec<f64>,
    pub max_contribution_norm: f64,
    pub metrics: Vec<StepMetrics>,
}

impl TrainReport {
    /// Accountant input for this run: Poisson rate `B/N`, one step per batch.
    pub fn privacy_spec(&self) -> MechanismSpec {
        MechanismSpec::subsampled_gaussian(self.noise_multiplier, self.sampling_rate, self.steps)
    }

    /// One JSON object per step.
    pub fn write_metrics(&self, out: &mut dyn Write) -> Result<()> {
        for m in &self.metrics {
            let line = serde_json::to_string(m)?;
            writeln!(out, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        }
        Ok(())
    }
}

/// `epochs · ⌈N/B⌉` DP-Adam steps. Each epoch shuffles the corpus with its own
/// stream and cuts it into fixed-size batches, wrapping around at the end.
pub fn train(model: &mut ToyLanguageModel, corpus: &Corpus, config: &DpAdamConfig) -> Result<TrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("cannot train on an empty corpus".into()));
    }
    let examples: Vec<Vec<u32>> = corpus.texts().map(|t| model.encode(t)).collect();
    let n = examples.len();
    let b = config.batch_size;
    let per_epoch = n.div_ceil(b);
    let mut state = AdamState::new(model.params.len());
    let mut noise = CounterRng::with_stream(config.seed, NOISE_STREAM);
    let mut metrics = Vec::with_capacity(config.epochs * per_epoch);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        CounterRng::with_stream(config.seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
        for k in 0..per_epoch {
            let batch: Vec<&[u32]> = (0..b).map(|j| examples[order[(k * b + j) % n]].as_slice()).collect();
            metrics.push(dp_adam_step(model, &mut state, &batch, config, &mut noise)?);
        }
    }
    Ok(TrainReport {
        steps: metrics.len() as u64,
        sampling_rate: (b as f64 / n as f64).min(1.0),
        noise_multiplier: config.noise_multiplier,
        loss_trace: metrics.iter().map(|m| m.mean_loss).collect(),
        max_contribution_norm: metrics.iter().map(|m| m.max_contribution_norm).fold(0.0, f64::max),
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    /// Bytes per generated sequence; `None` means the model's `L`.
    pub max_len: Option<usize>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            temperature: 1.0,
            max_len: None,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) || !(self.temperature > 0.0) {
            return Err(Error::Argument(format!("invalid sampling config {self:?}")));
        }
        Ok(())
    }
}

/// The smallest probability-sorted prefix with cumulative mass ≥ `top_p`,
/// renormalized. Ties in probability keep the lower token first.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(u32, f64)> {
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for t in order {
        let p = probs[t as usize];
        if p <= 0.0 {
            break;
        }
        kept.push((t, p));
        mass += p;
        // Relative slack so that e.g. 0.6 + 0.3 counts as reaching 0.9.
        if mass >= top_p * (1.0 - 1e-12) {
            break;
        }
    }
    kept.iter_mut().for_each(|(_, p)| *p /= mass);
    kept
}

fn draw(kept: &[(u32, f64)], rng: &mut CounterRng) -> u32 {
    let u = rng.uniform();
    let mut acc = 0.0;
    for &(t, p) in kept {
        acc += p;
        if u < acc {
            return t;
        }
    }
    kept.last().map(|k| k.0).unwrap_or(EOS)
}

/// Continue `prefix` (which should start with BOS) until EOS or `max_len`
/// bytes. BOS and PAD are never emitted.
pub fn sample_tokens(model: &ToyLanguageModel, prefix: &[u32], config: &SamplingConfig, rng: &mut CounterRng) -> Vec<u32> {
    let max_len = config.max_len.unwrap_or(model.config.max_len);
    let mut seq = prefix.to_vec();
    let mut w = Work::new(&model.config);
    let mut bytes = seq.iter().filter(|&&t| t < 256).count();
    while bytes < max_len {
        let mut probs = model.next_probs_with(&seq, config.temperature, &mut w);
        probs[BOS as usize] = 0.0;
        probs[PAD as usize] = 0.0;
        let t = draw(&nucleus(&probs, config.top_p), rng);
        seq.push(t);
        if t == EOS {
            return seq;
        }
        bytes += 1;
    }
    seq.push(EOS);
    seq
}

/// `count` independent unprompted samples; sequence `i` uses stream `i`.
pub fn sample(model: &ToyLanguageModel, config: &SamplingConfig, count: usize) -> Result<Corpus> {
    config.validate()?;
    let records: Vec<InstructionRecord> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = CounterRng::with_stream(config.seed, i as u64);
            let tokens = sample_tokens(model, &[BOS], config, &mut rng);
            InstructionRecord::new(format!("syn-{i:07}"), decode_tokens(&tokens))
        })
        .collect();
    Ok(Corpus::new(CorpusRole::Synthetic, records))
}

/// Greedy continuation of `prefix` for up to `max_new` bytes.
pub fn greedy_completion(model: &ToyLanguageModel, prefix: &str, max_new: usize) -> String {
    let mut seq = vec![BOS];
    seq.extend(prefix.bytes().map(u32::from));
    let start = seq.len();
    let mut w = Work::new(&model.config);
    for _ in 0..max_new {
        let mut probs = model.next_probs_with(&seq, 1.0, &mut w);
        probs[BOS as usize] = 0.0;
        probs[PAD as usize] = 0.0;
        let t = nucleus(&probs, f64::MIN_POSITIVE)[0].0;
        if t == EOS {
            break;
        }
        seq.push(t);
    }
    decode_tokens(&seq[start..])
}
