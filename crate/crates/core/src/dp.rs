//! Clipping, Gaussian noise, and Rényi-DP accounting.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA_GRID: [f64; 9] = [1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0];

/// How the per-coordinate noise standard deviation depends on the number of
/// participants `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseScaling {
    /// `C * sigma`.
    #[default]
    Standard,
    /// `C * sigma * sqrt(K)`.
    PaperLiteral,
}

impl NoiseScaling {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseScaling::Standard => "standard",
            NoiseScaling::PaperLiteral => "paper_literal",
        }
    }
}

impl std::str::FromStr for NoiseScaling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standard" => Ok(NoiseScaling::Standard),
            "paper_literal" => Ok(NoiseScaling::PaperLiteral),
            other => Err(format!("expected standard or paper_literal, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpParams {
    pub clip_norm: f64,
    pub sigma: f64,
    pub noise_scaling: NoiseScaling,
    pub alpha_grid: Vec<f64>,
}

impl Default for DpParams {
    fn default() -> Self {
        DpParams {
            clip_norm: 1.0,
            sigma: 1.0,
            noise_scaling: NoiseScaling::Standard,
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
        }
    }
}

impl DpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Parameter(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise multiplier {} must be non-negative", self.sigma)));
        }
        check_alpha_grid(&self.alpha_grid)
    }

    /// Per-coordinate noise standard deviation with `k` participants.
    pub fn noise_std(&self, k: usize) -> f64 {
        let base = self.clip_norm * self.sigma;
        match self.noise_scaling {
            NoiseScaling::Standard => base,
            NoiseScaling::PaperLiteral => base * (k as f64).sqrt(),
        }
    }

    /// Noise multiplier the accountant sees: `noise_std / C`.
    pub fn effective_sigma(&self, k: usize) -> f64 {
        self.noise_std(k) / self.clip_norm
    }
}

fn check_alpha_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Parameter("alpha grid is empty".into()));
    }
    if grid.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
        return Err(Error::Parameter("every alpha must be a finite number above 1".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("alpha grid must be strictly ascending".into()));
    }
    Ok(())
}

/// Scales `v` down to L2 norm at most `clip_norm`; leaves it alone otherwise.
pub fn clip_l2(v: &mut [f64], clip_norm: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > clip_norm {
        let factor = clip_norm / norm;
        v.iter_mut().for_each(|x| *x *= factor);
    }
}

/// Adds `N(0, std^2)` to every coordinate. A zero `std` draws nothing.
pub fn add_gaussian_noise<R: Rng + ?Sized>(v: &mut [f64], std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    for x in v {
        *x += std * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Noise for a clipped vector under `params` with `k` participants.
pub fn gaussian_noise<R: Rng + ?Sized>(v: &mut [f64], params: &DpParams, k: usize, rng: &mut R) {
    add_gaussian_noise(v, params.noise_std(k), rng);
}

/// RDP of one Gaussian release: `alpha / (2 sigma^2)`; infinite at `sigma = 0`.
pub fn rdp_per_round(alpha: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Parameter(format!("RDP order {alpha} must exceed 1")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Parameter(format!("noise multiplier {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

/// `eps + ln((alpha-1)/alpha) - (ln delta + ln alpha)/(alpha-1)`, unclamped.
pub fn to_eps_delta(alpha: f64, eps_rdp: f64, delta: f64) -> Result<f64> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("RDP order {alpha} must exceed 1")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta {delta} not in (0, 1)")));
    }
    if eps_rdp.is_nan() || eps_rdp < 0.0 {
        return Err(Error::Parameter(format!("RDP budget {eps_rdp} must be non-negative")));
    }
    if eps_rdp.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(eps_rdp + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyReport {
    pub rounds: usize,
    pub alpha: f64,
    pub eps_rdp: f64,
    /// Converted budget, floored at zero.
    pub eps_dp: f64,
    pub eps_dp_raw: f64,
    pub delta: f64,
}

impl PrivacyReport {
    pub fn is_unbounded(&self) -> bool {
        self.eps_dp.is_infinite()
    }
}

/// Accumulated RDP budget per order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    alphas: Vec<f64>,
    eps: Vec<f64>,
    rounds: usize,
}

impl PrivacyLedger {
    pub fn new(alpha_grid: &[f64]) -> Result<Self> {
        check_alpha_grid(alpha_grid)?;
        Ok(PrivacyLedger {
            alphas: alpha_grid.to_vec(),
            eps: vec![0.0; alpha_grid.len()],
            rounds: 0,
        })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Adds one round whose budget at `alphas[i]` is `per_round[i]`.
    pub fn compose(&mut self, per_round: &[f64]) -> Result<()> {
        if per_round.len() != self.alphas.len() {
            return Err(Error::Shape(format!(
                "{} per-round budgets for {} orders",
                per_round.len(),
                self.alphas.len()
            )));
        }
        if per_round.iter().any(|e| e.is_nan() || *e < 0.0) {
            return Err(Error::Parameter("per-round RDP budgets must be non-negative".into()));
        }
        for (acc, e) in self.eps.iter_mut().zip(per_round) {
            *acc += e;
        }
        self.rounds += 1;
        Ok(())
    }

    /// Adds one Gaussian round with noise multiplier `sigma`.
    pub fn compose_gaussian(&mut self, sigma: f64) -> Result<()> {
        let per_round = self
            .alphas
            .iter()
            .map(|&a| rdp_per_round(a, sigma))
            .collect::<Result<Vec<_>>>()?;
        self.compose(&per_round)
    }

    /// Smallest converted budget over the grid; ties go to the smaller order.
    pub fn best_eps(&self, delta: f64) -> Result<PrivacyReport> {
        let mut best: Option<PrivacyReport> = None;
        for (&alpha, &eps_rdp) in self.alphas.iter().zip(&self.eps) {
            let raw = to_eps_delta(alpha, eps_rdp, delta)?;
            if best.is_none_or(|b| raw < b.eps_dp_raw) {
                best = Some(PrivacyReport {
                    rounds: self.rounds,
                    alpha,
                    eps_rdp,
                    eps_dp: raw.max(0.0),
                    eps_dp_raw: raw,
                    delta,
                });
            }
        }
        Ok(best.expect("alpha grid is non-empty"))
    }
}
