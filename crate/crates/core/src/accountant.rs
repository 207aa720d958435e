//! (ε, δ) accounting by discretized privacy-loss distributions.
//!
//! A mechanism is represented by the distribution of its privacy loss
//! `L = log(P(X)/Q(X))`, `X ~ P`, on a uniform grid. Composition of
//! independent mechanisms is convolution of these distributions (done with
//! FFTs), and `δ(ε) = E[(1 − e^{ε−L})₊]` is read off the composed result.
//! Pessimistic rounding moves every loss up to the next grid point, so the
//! reported ε upper-bounds the exact one; the same computation with downward
//! rounding gives a lower bound and hence an error bound.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRID: f64 = 1e-4;
pub const DEFAULT_TAIL_MASS: f64 = 1e-15;

/// Refuse discretizations larger than this many grid points.
const MAX_BINS: usize = 1 << 22;
/// Below this length direct convolution beats the FFT.
const DIRECT_CONV_LEN: usize = 64;

/// Neighbouring-dataset relation the distribution describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    /// Losses rounded up: ε is an upper bound.
    Pessimistic,
    /// Losses rounded down: ε is a lower bound.
    Optimistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub grid: f64,
    /// Probability mass cut from each tail (half per side) when building and
    /// after every convolution.
    pub tail_mass: f64,
    pub rounding: Rounding,
}

impl Default for Discretization {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            tail_mass: DEFAULT_TAIL_MASS,
            rounding: Rounding::Pessimistic,
        }
    }
}

impl Discretization {
    pub fn with_rounding(self, rounding: Rounding) -> Self {
        Self { rounding, ..self }
    }

    fn check(&self) -> Result<()> {
        if !(self.grid > 0.0 && self.grid.is_finite()) {
            return Err(Error::Argument(format!("grid spacing must be positive, got {}", self.grid)));
        }
        if !(0.0..1.0).contains(&self.tail_mass) {
            return Err(Error::Argument(format!("tail mass must be in [0, 1), got {}", self.tail_mass)));
        }
        Ok(())
    }
}

/// Probability masses on losses `(offset + i) · grid`, plus the mass of
/// infinite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLossDistribution {
    grid: f64,
    offset: i64,
    masses: Vec<f64>,
    infinity_mass: f64,
    direction: Direction,
    rounding: Rounding,
}

impl PrivacyLossDistribution {
    /// The distribution of a mechanism that leaks nothing.
    pub fn identity(grid: f64, direction: Direction, rounding: Rounding) -> Self {
        Self {
            grid,
            offset: 0,
            masses: vec![1.0],
            infinity_mass: 0.0,
            direction,
            rounding,
        }
    }

    pub fn grid(&self) -> f64 {
        self.grid
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn infinity_mass(&self) -> f64 {
        self.infinity_mass
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn loss(&self, i: usize) -> f64 {
        (self.offset + i as i64) as f64 * self.grid
    }

    /// `(loss, mass)` pairs with non-zero mass.
    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.masses
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(i, &m)| (self.loss(i), m))
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.infinity_mass
    }

    /// Hockey-stick divergence `δ(ε) = inf_mass + Σ_{l > ε} p_l (1 − e^{ε − l})`.
    pub fn delta_at(&self, epsilon: f64) -> f64 {
        let finite: f64 = self
            .atoms()
            .filter(|(l, _)| *l > epsilon)
            .map(|(l, p)| p * -(epsilon - l).exp_m1())
            .sum();
        self.infinity_mass + finite
    }

    /// Smallest `ε ≥ 0` with `δ(ε) ≤ delta`.
    pub fn epsilon_at(&self, delta: f64) -> Result<f64> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Argument(format!("delta must be in (0, 1), got {delta}")));
        }
        if delta <= self.infinity_mass {
            return Err(Error::UnboundedEpsilon {
                delta,
                infinity_mass: self.infinity_mass,
            });
        }
        // Walk the atoms from the top. While ε lies between loss i−1 and loss
        // i, δ(ε) = inf + S1 − e^ε S2 with S1, S2 summed over atoms ≥ i.
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in (0..self.masses.len()).rev() {
            let l = self.loss(i);
            if l <= 0.0 {
                break;
            }
            let p = self.masses[i];
            if p == 0.0 {
                continue;
            }
            s1 += p;
            s2 += p * (-l).exp();
            let excess = self.infinity_mass + s1 - delta;
            if excess <= 0.0 {
                continue;
            }
            let eps = (excess / s2).ln().min(l);
            let lower = if i == 0 { 0.0 } else { self.loss(i - 1).max(0.0) };
            if eps >= lower {
                return Ok(eps.max(0.0));
            }
        }
        Ok(0.0)
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if (self.grid - other.grid).abs() > 1e-12 * self.grid {
            return Err(Error::Argument(format!("grid spacings differ: {} vs {}", self.grid, other.grid)));
        }
        if self.direction != other.direction || self.rounding != other.rounding {
            return Err(Error::Argument("cannot compose distributions of different direction or rounding".into()));
        }
        Ok(())
    }

    /// Distribution of the sum of the two independent losses.
    pub fn compose_with(&self, other: &Self, tail_mass: f64) -> Result<Self> {
        self.compatible(other)?;
        let bins = self.masses.len() + other.masses.len() - 1;
        if bins > MAX_BINS {
            return Err(Error::LossRangeTooWide { bins, limit: MAX_BINS });
        }
        let masses = if std::ptr::eq(self, other) {
            self_convolve(&self.masses)
        } else {
            convolve(&self.masses, &other.masses)
        };
        let mut out = Self {
            grid: self.grid,
            offset: self.offset + other.offset,
            masses,
            infinity_mass: self.infinity_mass + other.infinity_mass - self.infinity_mass * other.infinity_mass,
            direction: self.direction,
            rounding: self.rounding,
        };
        out.truncate_tails(tail_mass);
        Ok(out)
    }

    /// `n`-fold self-composition by repeated squaring.
    pub fn self_compose(&self, n: u64, tail_mass: f64) -> Result<Self> {
        let mut result: Option<Self> = None;
        let mut base = self.clone();
        let mut n = n;
        while n > 0 {
            if n & 1 == 1 {
                result = Some(match result {
                    None => base.clone(),
                    Some(r) => r.compose_with(&base, tail_mass)?,
                });
            }
            n >>= 1;
            if n > 0 {
                base = base.compose_with(&base, tail_mass)?;
            }
        }
        Ok(result.unwrap_or_else(|| Self::identity(self.grid, self.direction, self.rounding)))
    }

    /// Cut up to `tail_mass / 2` from each end. Pessimistic rounding sends the
    /// upper tail to infinite loss and folds the lower tail into the smallest
    /// kept loss; optimistic rounding folds the upper tail into the largest
    /// kept loss and drops the lower tail.
    fn truncate_tails(&mut self, tail_mass: f64) {
        for m in &mut self.masses {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
        let half = tail_mass / 2.0;
        let n = self.masses.len();
        let mut lo = 0;
        let mut lower = 0.0;
        while lo + 1 < n && lower + self.masses[lo] <= half {
            lower += self.masses[lo];
            lo += 1;
        }
        let mut hi = n - 1;
        let mut upper = 0.0;
        while hi > lo && upper + self.masses[hi] <= half {
            upper += self.masses[hi];
            hi -= 1;
        }
        let mut kept = self.masses[lo..=hi].to_vec();
        match self.rounding {
            Rounding::Pessimistic => {
                kept[0] += lower;
                self.infinity_mass += upper;
            }
            Rounding::Optimistic => {
                let last = kept.len() - 1;
                kept[last] += upper;
            }
        }
        self.offset += lo as i64;
        self.masses = kept;
    }
}

/// Compose `(distribution, repetitions)` pairs.
pub fn compose(parts: &[(&PrivacyLossDistribution, u64)], tail_mass: f64) -> Result<PrivacyLossDistribution> {
    let Some((first, _)) = parts.first() else {
        return Err(Error::Argument("nothing to compose".into()));
    };
    let mut acc = PrivacyLossDistribution::identity(first.grid, first.direction, first.rounding);
    for (pld, reps) in parts {
        let block = pld.self_compose(*reps, tail_mass)?;
        acc = acc.compose_with(&block, tail_mass)?;
    }
    Ok(acc)
}

fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn fft_size(n: usize) -> usize {
    n.next_power_of_two()
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.len().min(b.len()) < DIRECT_CONV_LEN {
        return convolve_direct(a, b);
    }
    let n = a.len() + b.len() - 1;
    let size = fft_size(n);
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(size);
    let inverse = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    forward.process(&mut fa);
    forward.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inverse.process(&mut fa);
    let scale = 1.0 / size as f64;
    fa[..n].iter().map(|c| c.re * scale).collect()
}

fn self_convolve(a: &[f64]) -> Vec<f64> {
    if a.len() < DIRECT_CONV_LEN {
        return convolve_direct(a, a);
    }
    let n = 2 * a.len() - 1;
    let size = fft_size(n);
    let mut planner = FftPlanner::<f64>::new();
    let mut fa: Vec<Complex<f64>> = a.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fa.resize(size, Complex::new(0.0, 0.0));
    planner.plan_fft_forward(size).process(&mut fa);
    for x in fa.iter_mut() {
        *x = *x * *x;
    }
    planner.plan_fft_inverse(size).process(&mut fa);
    let scale = 1.0 / size as f64;
    fa[..n].iter().map(|c| c.re * scale).collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Privacy loss of the Poisson-subsampled Gaussian mechanism with unit
/// sensitivity. With `μ₀ = N(0, σ²)`, `μ₁ = N(1, σ²)` and `μ = (1−q)μ₀ + qμ₁`:
/// remove compares `μ` against `μ₀`, add compares `μ₀` against `μ`.
/// `q = 1` is the plain Gaussian mechanism.
struct SubsampledGaussianLoss {
    sigma: f64,
    q: f64,
    direction: Direction,
}

impl SubsampledGaussianLoss {
    /// `log((e^l − (1 − q)) / q)`, or `−∞` outside the loss range.
    fn log_excess(&self, l: f64) -> f64 {
        let q = self.q;
        if q < 1.0 && l <= (-q).ln_1p() {
            return f64::NEG_INFINITY;
        }
        if l < 1.0 {
            (l.exp_m1() + q).ln() - q.ln()
        } else {
            l + (-(1.0 - q) * (-l).exp()).ln_1p() - q.ln()
        }
    }

    /// The sample `x` at which the loss equals `l`.
    fn x_at(&self, l: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        match self.direction {
            Direction::Remove => 0.5 + s2 * self.log_excess(l),
            Direction::Add => 0.5 + s2 * self.log_excess(-l),
        }
    }

    /// `(P[L ≤ l], P[L > l])` under the first distribution of the pair.
    fn cdf_sf(&self, l: f64) -> (f64, f64) {
        let x = self.x_at(l);
        let s = self.sigma;
        match self.direction {
            // Loss increasing in x, x ~ μ.
            Direction::Remove => {
                if x == f64::NEG_INFINITY {
                    return (0.0, 1.0);
                }
                let q = self.q;
                (
                    (1.0 - q) * normal_cdf(x / s) + q * normal_cdf((x - 1.0) / s),
                    (1.0 - q) * normal_sf(x / s) + q * normal_sf((x - 1.0) / s),
                )
            }
            // Loss decreasing in x, x ~ μ₀.
            Direction::Add => {
                if x == f64::NEG_INFINITY {
                    return (1.0, 0.0);
                }
                (normal_sf(x / s), normal_cdf(x / s))
            }
        }
    }

    /// Losses beyond which each tail holds at most `half` mass.
    fn loss_range(&self, half: f64) -> (f64, f64) {
        let mut lo = -1.0;
        while self.cdf_sf(lo).0 > half {
            lo *= 2.0;
        }
        let mut hi = 1.0;
        while self.cdf_sf(hi).1 > half {
            hi *= 2.0;
        }
        // Largest l with P[L < l] ≤ half, smallest l with P[L > l] ≤ half.
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if self.cdf_sf(m).0 > half {
                b = m;
            } else {
                a = m;
            }
        }
        let lower = a;
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if self.cdf_sf(m).1 > half {
                a = m;
            } else {
                b = m;
            }
        }
        (lower, b)
    }

    fn discretize(&self, disc: &Discretization) -> Result<PrivacyLossDistribution> {
        disc.check()?;
        let g = disc.grid;
        let (lo, hi) = self.loss_range(disc.tail_mass / 2.0);
        let i_lo = (lo / g).floor() as i64;
        let i_hi = (hi / g).ceil() as i64;
        let n = (i_hi - i_lo + 1) as usize;
        if n > MAX_BINS {
            return Err(Error::LossRangeTooWide { bins: n, limit: MAX_BINS });
        }
        let points: Vec<(f64, f64)> = (i_lo..=i_hi + 1).map(|i| self.cdf_sf(i as f64 * g)).collect();
        // Mass of (l_a, l_b], taken from whichever side of the median is accurate.
        let between = |a: usize, b: usize| {
            let (ca, sa) = points[a];
            let (cb, sb) = points[b];
            let m = if cb < 0.5 { cb - ca } else { sa - sb };
            m.max(0.0)
        };
        let mut masses = vec![0.0; n];
        let infinity_mass;
        match disc.rounding {
            Rounding::Pessimistic => {
                masses[0] = points[0].0;
                for (i, m) in masses.iter_mut().enumerate().skip(1) {
                    *m = between(i - 1, i);
                }
                infinity_mass = points[n - 1].1;
            }
            Rounding::Optimistic => {
                for (i, m) in masses.iter_mut().enumerate().take(n - 1) {
                    *m = between(i, i + 1);
                }
                masses[n - 1] = points[n - 1].1;
                infinity_mass = 0.0;
            }
        }
        Ok(PrivacyLossDistribution {
            grid: g,
            offset: i_lo,
            masses,
            infinity_mass,
            direction: self.direction,
            rounding: disc.rounding,
        })
    }
}

/// Gaussian mechanism with noise `sigma` and L2 sensitivity `sensitivity`.
pub fn pld_gaussian(sigma: f64, sensitivity: f64, direction: Direction, disc: &Discretization) -> Result<PrivacyLossDistribution> {
    if !(sigma > 0.0 && sigma.is_finite()) || !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::Argument(format!("need sigma > 0 and sensitivity > 0, got {sigma}, {sensitivity}")));
    }
    SubsampledGaussianLoss {
        sigma: sigma / sensitivity,
        q: 1.0,
        direction,
    }
    .discretize(disc)
}

/// Poisson-subsampled Gaussian mechanism with unit sensitivity.
pub fn pld_subsampled_gaussian(sigma: f64, q: f64, direction: Direction, disc: &Discretization) -> Result<PrivacyLossDistribution> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Argument(format!("sampling rate must be in (0, 1], got {q}")));
    }
    SubsampledGaussianLoss { sigma, q, direction }.discretize(disc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismKind {
    Gaussian { sigma: f64, sensitivity: f64 },
    SubsampledGaussian { sigma: f64, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    #[serde(flatten)]
    pub kind: MechanismKind,
    pub repetitions: u64,
}

impl MechanismSpec {
    pub fn gaussian(sigma: f64, sensitivity: f64) -> Self {
        Self {
            kind: MechanismKind::Gaussian { sigma, sensitivity },
            repetitions: 1,
        }
    }

    pub fn subsampled_gaussian(sigma: f64, q: f64, steps: u64) -> Self {
        Self {
            kind: MechanismKind::SubsampledGaussian { sigma, q },
            repetitions: steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Argument("repetitions must be at least 1".into()));
        }
        match self.kind {
            MechanismKind::Gaussian { sigma, sensitivity } if sigma > 0.0 && sensitivity > 0.0 => Ok(()),
            MechanismKind::SubsampledGaussian { sigma, q } if sigma > 0.0 && (0.0..=1.0).contains(&q) => Ok(()),
            _ => Err(Error::Argument(format!("invalid mechanism {self:?}"))),
        }
    }

    /// Single-use distribution in one direction.
    pub fn pld(&self, direction: Direction, disc: &Discretization) -> Result<PrivacyLossDistribution> {
        self.validate()?;
        match self.kind {
            MechanismKind::Gaussian { sigma, sensitivity } => pld_gaussian(sigma, sensitivity, direction, disc),
            MechanismKind::SubsampledGaussian { q: 0.0, .. } => {
                Ok(PrivacyLossDistribution::identity(disc.grid, direction, disc.rounding))
            }
            MechanismKind::SubsampledGaussian { sigma, q } => pld_subsampled_gaussian(sigma, q, direction, disc),
        }
    }
}

/// Composed distribution of all mechanisms, one direction.
pub fn composed_pld(specs: &[MechanismSpec], direction: Direction, disc: &Discretization) -> Result<PrivacyLossDistribution> {
    let plds = specs.iter().map(|s| s.pld(direction, disc)).collect::<Result<Vec<_>>>()?;
    let parts: Vec<(&PrivacyLossDistribution, u64)> = plds.iter().zip(specs).map(|(p, s)| (p, s.repetitions)).collect();
    compose(&parts, disc.tail_mass)
}

/// ε of the composition at `delta`, the worse of the two directions.
pub fn epsilon_for(specs: &[MechanismSpec], delta: f64, disc: &Discretization) -> Result<f64> {
    let mut eps = 0.0f64;
    for direction in [Direction::Remove, Direction::Add] {
        eps = eps.max(composed_pld(specs, direction, disc)?.epsilon_at(delta)?);
    }
    Ok(eps)
}

/// `epochs · ⌈n / batch⌉`.
pub fn steps_for(epochs: u64, n: u64, batch: u64) -> u64 {
    epochs * n.div_ceil(batch.max(1))
}

/// Bisection on σ until `0 ≤ target − ε(σ) < 1e-3 · target`.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64, disc: &Discretization) -> Result<f64> {
    calibrate_sigma_in(target_epsilon, delta, q, steps, disc, (0.2, 100.0))
}

pub fn calibrate_sigma_in(target_epsilon: f64, delta: f64, q: f64, steps: u64, disc: &Discretization, bracket: (f64, f64)) -> Result<f64> {
    calibrate_with(target_epsilon, delta, disc, bracket, |sigma| vec![MechanismSpec::subsampled_gaussian(sigma, q, steps)])
}

/// A σ in `bracket` for which the composition `specs(σ)` is
/// (target_epsilon, delta)-DP with ε within 0.1% below the target. ε must
/// decrease in σ.
pub fn calibrate_with(
    target_epsilon: f64,
    delta: f64,
    disc: &Discretization,
    bracket: (f64, f64),
    specs: impl Fn(f64) -> Vec<MechanismSpec>,
) -> Result<f64> {
    if !(target_epsilon > 0.0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!("need ε > 0 and δ in (0, 1), got {target_epsilon}, {delta}")));
    }
    if !(bracket.0 > 0.0 && bracket.0 < bracket.1) {
        return Err(Error::Argument(format!("invalid sigma bracket {bracket:?}")));
    }
    let eps = |sigma: f64| -> Result<f64> {
        match epsilon_for(&specs(sigma), delta, disc) {
            // Both only happen for very small σ.
            Err(Error::UnboundedEpsilon { .. } | Error::LossRangeTooWide { .. }) => Ok(f64::INFINITY),
            other => other,
        }
    };
    let tol = 1e-3 * target_epsilon;
    let (mut lo, mut hi) = bracket;
    let (e_lo, e_hi) = (eps(lo)?, eps(hi)?);
    if !(e_lo >= target_epsilon && e_hi <= target_epsilon) {
        return Err(Error::Calibration(format!(
            "sigma bracket [{lo}, {hi}] gives epsilon [{e_hi}, {e_lo}], which does not contain {target_epsilon}"
        )));
    }
    for _ in 0..200 {
        // Bisect in log σ; ε spans orders of magnitude across the bracket.
        let mid = (lo * hi).sqrt();
        let e = eps(mid)?;
        if e <= target_epsilon && target_epsilon - e < tol {
            return Ok(mid);
        }
        if e > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!("no sigma within tolerance after bisection; bracket [{lo}, {hi}]")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismBudget {
    pub mechanism: MechanismSpec,
    /// ε of this mechanism alone at the report's δ.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub epsilon: f64,
    pub delta: f64,
    /// Pessimistic minus optimistic ε; the exact ε lies in `[epsilon − bound, epsilon]`.
    pub epsilon_error_bound: f64,
    pub grid: f64,
    pub tail_mass: f64,
    pub mechanisms: Vec<MechanismBudget>,
}

impl BudgetReport {
    pub fn to_text(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Full budget of a composition: pessimistic ε, its error bound and each
/// mechanism's stand-alone ε. Fails if the bound exceeds `tolerance`.
pub fn budget(specs: &[MechanismSpec], delta: f64, disc: &Discretization, tolerance: Option<f64>) -> Result<BudgetReport> {
    if specs.is_empty() {
        return Err(Error::Argument("no mechanisms to account".into()));
    }
    let pessimistic = disc.with_rounding(Rounding::Pessimistic);
    let epsilon = epsilon_for(specs, delta, &pessimistic)?;
    let optimistic = epsilon_for(specs, delta, &disc.with_rounding(Rounding::Optimistic))?;
    let bound = (epsilon - optimistic).max(0.0);
    if let Some(tolerance) = tolerance {
        if bound > tolerance {
            return Err(Error::GridTooCoarse { bound, tolerance });
        }
    }
    let mechanisms = if specs.len() == 1 {
        vec![MechanismBudget {
            mechanism: specs[0],
            epsilon,
        }]
    } else {
        specs
            .iter()
            .map(|s| {
                Ok(MechanismBudget {
                    mechanism: *s,
                    epsilon: epsilon_for(std::slice::from_ref(s), delta, &pessimistic)?,
                })
            })
            .collect::<Result<_>>()?
    };
    Ok(BudgetReport {
        epsilon,
        delta,
        epsilon_error_bound: bound,
        grid: disc.grid,
        tail_mass: disc.tail_mass,
        mechanisms,
    })
}
