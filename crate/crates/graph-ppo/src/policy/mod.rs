//! Diagonal Gaussian policies and the statistics of their update drift.
//!
//! The quantities here describe what a small policy update does to the
//! importance ratio r = pi_new(a)/pi_old(a) when a was drawn from pi_old:
//! per-dimension drift nu_i = (mu_new_i - mu_old_i)/sigma_new_i and scale
//! ratio eta_i = sigma_new_i/sigma_old_i determine log r exactly, and for
//! eta ~ 1 the aggregate log r is Gaussian with mean -||nu||^2/2 and standard
//! deviation ||nu||. That Gaussian gives a closed form for the probability
//! that a sample's ratio stays inside a clipping band, and motivates widening
//! the band by sqrt(dim) to keep that probability dimension-independent.

mod normal;

pub use normal::{erf, erfc, standard_normal_cdf};

use crate::error::{check_finite, check_finite_scalar, Error, Result};
use crate::trust_region::FisherModel;
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Below this ||nu|| the band-retention probability is defined as 1
/// (an unchanged policy never leaves the band).
pub const NU_NORM_FLOOR: f64 = 1e-12;

/// Factor-of-sqrt(2/pi) constant in the small-drift band-retention formula.
pub fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Gaussian with diagonal covariance, parameterized by (mean, log_std).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if mean.is_empty() {
            return Err(Error::RejectedInput("distribution dimension is zero".into()));
        }
        check_finite(&mean, "mean")?;
        check_finite(&log_std, "log_std")?;
        Ok(Self { mean, log_std })
    }

    /// Shared scalar log-std across all dimensions.
    pub fn with_shared_log_std(mean: Vec<f64>, log_std: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![log_std; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    /// Joint log density at `action`.
    pub fn log_prob(&self, action: &[f64]) -> Result<f64> {
        if action.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: action.len(),
            });
        }
        check_finite(action, "action")?;
        let mut lp = 0.0;
        for ((&a, &m), &s) in action.iter().zip(&self.mean).zip(&self.log_std) {
            let z = (a - m) / s.exp();
            lp += -s - 0.5 * LN_2PI - 0.5 * z * z;
        }
        Ok(lp)
    }

    /// Draws a = mean + std .* z with z standard normal.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                self.mean[i] + self.log_std[i].exp() * z
            })
            .collect()
    }

    /// Differential entropy: sum_i (log_std_i + (1 + ln 2 pi)/2).
    pub fn entropy(&self) -> f64 {
        let c = 0.5 * (1.0 + LN_2PI);
        self.log_std.iter().map(|s| s + c).sum()
    }
}

/// KL(p || q) for diagonal Gaussians, in closed form.
pub fn kl_divergence(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let sp = p.log_std[i].exp();
        let sq = q.log_std[i].exp();
        let dm = p.mean[i] - q.mean[i];
        kl += q.log_std[i] - p.log_std[i] + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
    }
    Ok(kl)
}

/// Per-dimension drift of an update from `old` to `new`:
/// nu_i = (mu_new_i - mu_old_i)/sigma_new_i, eta_i = sigma_new_i/sigma_old_i.
#[derive(Debug, Clone)]
pub struct DriftStats {
    pub nu: Vec<f64>,
    pub eta: Vec<f64>,
    pub nu_norm: f64,
}

pub fn drift_stats(old: &DiagonalGaussian, new: &DiagonalGaussian) -> Result<DriftStats> {
    if old.dim() != new.dim() {
        return Err(Error::DimensionMismatch {
            expected: old.dim(),
            got: new.dim(),
        });
    }
    let mut nu = Vec::with_capacity(old.dim());
    let mut eta = Vec::with_capacity(old.dim());
    let mut sq = 0.0;
    for i in 0..old.dim() {
        let s_new = new.log_std[i].exp();
        let s_old = old.log_std[i].exp();
        let n = (new.mean[i] - old.mean[i]) / s_new;
        nu.push(n);
        eta.push(s_new / s_old);
        sq += n * n;
    }
    Ok(DriftStats {
        nu,
        eta,
        nu_norm: sq.sqrt(),
    })
}

impl DriftStats {
    /// Largest |eta_i - 1|; zero means the update left all scales unchanged.
    pub fn max_eta_deviation(&self) -> f64 {
        self.eta
            .iter()
            .map(|e| (e - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Exact per-dimension log ratio log(pi_new_i / pi_old_i) at the sample
/// a_i = mu_old_i + sigma_old_i z_i:
///
///   (1 - eta^-2)/2 * z^2 + (nu/eta) * z - ln(eta) - nu^2/2.
///
/// Quadratic in z; the z^2 term vanishes exactly when eta = 1.
pub fn marginal_log_ratio(nu_i: f64, eta_i: f64, z_i: f64) -> Result<f64> {
    check_finite_scalar(nu_i, "nu_i")?;
    check_finite_scalar(eta_i, "eta_i")?;
    check_finite_scalar(z_i, "z_i")?;
    if eta_i <= 0.0 {
        return Err(Error::RejectedInput(format!(
            "eta_i must be positive (got {eta_i})"
        )));
    }
    let inv2 = 1.0 / (eta_i * eta_i);
    Ok(0.5 * (1.0 - inv2) * z_i * z_i + (nu_i / eta_i) * z_i - eta_i.ln() - 0.5 * nu_i * nu_i)
}

/// Parameters (mean, std) of the Gaussian that log r follows when every
/// eta_i = 1: mean = -||nu||^2/2, std = ||nu||.
pub fn log_ratio_gaussian_params(drift: &DriftStats) -> (f64, f64) {
    let n = drift.nu_norm;
    (-0.5 * n * n, n)
}

/// Interval semantics for a clipping band of nominal half-width epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandSpace {
    /// Band on log r: [-eps, +eps]. The default everywhere.
    Log,
    /// Band on r itself: [1-eps, 1+eps], i.e. [ln(1-eps), ln(1+eps)] in log
    /// space. Asymmetric around 0 by O(eps^2); exposed for the Monte-Carlo
    /// validator to report the discrepancy.
    Ratio,
}

/// Clipping band with optional sqrt(dim) widening.
#[derive(Debug, Clone, Copy)]
pub struct ClipBand {
    pub epsilon: f64,
    pub compensated: bool,
    pub space: BandSpace,
}

impl ClipBand {
    pub fn new(epsilon: f64, compensated: bool, space: BandSpace) -> Result<Self> {
        check_finite_scalar(epsilon, "epsilon")?;
        if epsilon <= 0.0 {
            return Err(Error::RejectedInput(format!(
                "epsilon must be positive (got {epsilon})"
            )));
        }
        Ok(Self {
            epsilon,
            compensated,
            space,
        })
    }

    /// Half-width after compensation: epsilon * sqrt(dim) when compensated.
    pub fn effective_epsilon(&self, dim: usize) -> f64 {
        if self.compensated {
            compensated_epsilon(self.epsilon, dim)
        } else {
            self.epsilon
        }
    }

    /// The band as an interval on log r.
    pub fn log_interval(&self, dim: usize) -> Result<(f64, f64)> {
        let e = self.effective_epsilon(dim);
        match self.space {
            BandSpace::Log => Ok((-e, e)),
            BandSpace::Ratio => {
                if e >= 1.0 {
                    return Err(Error::RejectedInput(format!(
                        "ratio-space band needs effective epsilon < 1 (got {e})"
                    )));
                }
                Ok(((1.0 - e).ln(), (1.0 + e).ln()))
            }
        }
    }

    pub fn contains_log_ratio(&self, log_r: f64, dim: usize) -> Result<bool> {
        let (lo, hi) = self.log_interval(dim)?;
        Ok(log_r >= lo && log_r <= hi)
    }
}

/// Band half-width that keeps the retention probability dimension-independent:
/// epsilon * sqrt(dim).
pub fn compensated_epsilon(epsilon: f64, dim: usize) -> f64 {
    epsilon * (dim as f64).sqrt()
}

/// Probability that a sample's ratio stays inside the log band [-eps, +eps]
/// under the eta = 1 Gaussian model of log r:
///
///   Phi(eps/||nu|| + ||nu||/2) - Phi(-eps/||nu|| + ||nu||/2).
///
/// By convention 1 when ||nu|| < 1e-12 (the limit of the expression).
pub fn unclipped_prob_exact(epsilon_eff: f64, nu_norm: f64) -> Result<f64> {
    check_finite_scalar(epsilon_eff, "epsilon_eff")?;
    check_finite_scalar(nu_norm, "nu_norm")?;
    if epsilon_eff <= 0.0 {
        return Err(Error::RejectedInput(format!(
            "epsilon_eff must be positive (got {epsilon_eff})"
        )));
    }
    if nu_norm < 0.0 {
        return Err(Error::RejectedInput(format!(
            "nu_norm must be non-negative (got {nu_norm})"
        )));
    }
    if nu_norm < NU_NORM_FLOOR {
        return Ok(1.0);
    }
    let a = epsilon_eff / nu_norm;
    let b = 0.5 * nu_norm;
    Ok(standard_normal_cdf(a + b) - standard_normal_cdf(-a + b))
}

/// Small-drift closed form of the same probability:
///
///   min( sqrt(2/pi) * eps/||nu||, 1 ).
///
/// First-order CDF expansion with the exp(-||nu||^2/8) factor dropped; 1 when
/// ||nu|| < 1e-12.
pub fn unclipped_prob_approx(epsilon_eff: f64, nu_norm: f64) -> Result<f64> {
    check_finite_scalar(epsilon_eff, "epsilon_eff")?;
    check_finite_scalar(nu_norm, "nu_norm")?;
    if epsilon_eff <= 0.0 {
        return Err(Error::RejectedInput(format!(
            "epsilon_eff must be positive (got {epsilon_eff})"
        )));
    }
    if nu_norm < 0.0 {
        return Err(Error::RejectedInput(format!(
            "nu_norm must be non-negative (got {nu_norm})"
        )));
    }
    if nu_norm < NU_NORM_FLOOR {
        return Ok(1.0);
    }
    Ok((sqrt_2_over_pi() * epsilon_eff / nu_norm).min(1.0))
}

/// Fisher information of a diagonal Gaussian in (mean, log_std) coordinates,
/// ordered (mu_1, log_std_1, mu_2, log_std_2, ...). Each marginal contributes
/// the block diag(1/sigma_i^2, 2); the log_std entry is parameter-independent,
/// which is what makes this parameterization convenient.
pub fn fisher_diag_gaussian(policy: &DiagonalGaussian) -> FisherModel {
    let mut diag = Vec::with_capacity(2 * policy.dim());
    for s in &policy.log_std {
        let sigma = s.exp();
        diag.push(1.0 / (sigma * sigma));
        diag.push(2.0);
    }
    FisherModel::from_diagonal(&diag).expect("positive diagonal by construction")
}
