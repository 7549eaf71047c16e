//! Noise levels, the discretization curriculum, the EMA decay curriculum and
//! the preconditioning coefficients that pin the consistency function to the
//! identity at the smallest noise level.
//!
//! All arithmetic is `f64` regardless of the precision the networks run in.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Constants shared by the noise schedule and the target-model EMA schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Smallest noise level (ε).
    pub sigma_min: f64,
    /// Largest noise level (T).
    pub sigma_max: f64,
    /// Curvature exponent of the noise-level spacing.
    pub rho: f64,
    /// Assumed standard deviation of the data.
    pub sigma_data: f64,
    /// Discretization step count at the start of training.
    pub s0: u32,
    /// Discretization step count at the end of training.
    pub s1: u32,
    /// EMA decay at the start of training.
    pub mu0: f64,
    /// Planned number of optimizer steps (K).
    pub total_train_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
            s0: 2,
            s1: 150,
            mu0: 0.9,
            total_train_steps: 5_000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(invalid!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min,
                self.sigma_max
            ));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return Err(invalid!("rho must be >= 1, got {}", self.rho));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(invalid!("sigma_data must be > 0, got {}", self.sigma_data));
        }
        if self.s0 < 2 || self.s0 > self.s1 {
            return Err(invalid!("need 2 <= s0 <= s1, got s0={} s1={}", self.s0, self.s1));
        }
        if !(self.mu0 > 0.0 && self.mu0 < 1.0) {
            return Err(invalid!("mu0 must lie in (0, 1), got {}", self.mu0));
        }
        if self.total_train_steps < 1 {
            return Err(invalid!("total_train_steps must be >= 1"));
        }
        Ok(())
    }

    fn check_step(&self, k: u64) -> Result<()> {
        if k > self.total_train_steps {
            return Err(invalid!(
                "training step {k} outside [0, {}]",
                self.total_train_steps
            ));
        }
        Ok(())
    }
}

/// Noise levels `t_1 < … < t_n` spaced uniformly in `t^(1/rho)`.
///
/// The endpoints are exactly `sigma_min` and `sigma_max`.
pub fn karras_sigmas(n_steps: usize, cfg: &ScheduleConfig) -> Result<Vec<f64>> {
    if n_steps < 2 {
        return Err(invalid!("karras_sigmas needs at least 2 levels, got {n_steps}"));
    }
    cfg.validate()?;
    let inv_rho = 1.0 / cfg.rho;
    let lo = libm::pow(cfg.sigma_min, inv_rho);
    let hi = libm::pow(cfg.sigma_max, inv_rho);
    let last = (n_steps - 1) as f64;
    let mut sigmas: Vec<f64> = (0..n_steps)
        .map(|i| libm::pow(lo + (i as f64 / last) * (hi - lo), cfg.rho))
        .collect();
    sigmas[0] = cfg.sigma_min;
    sigmas[n_steps - 1] = cfg.sigma_max;
    Ok(sigmas)
}

/// Number of discretization levels `N(k)` used at training step `k`.
pub fn step_schedule(k: u64, cfg: &ScheduleConfig) -> Result<u32> {
    cfg.validate()?;
    cfg.check_step(k)?;
    let s0 = f64::from(cfg.s0);
    let s1 = f64::from(cfg.s1);
    let progress = k as f64 / cfg.total_train_steps as f64;
    let radicand = progress * ((s1 + 1.0) * (s1 + 1.0) - s0 * s0) + s0 * s0;
    let n = libm::ceil(libm::sqrt(radicand) - 1.0) + 1.0;
    Ok(n as u32)
}

/// Target-model EMA decay `μ(k) = exp(s0 · ln μ0 / N(k))`.
pub fn ema_decay(k: u64, cfg: &ScheduleConfig) -> Result<f64> {
    let n = step_schedule(k, cfg)?;
    Ok(libm::exp(f64::from(cfg.s0) * libm::log(cfg.mu0) / f64::from(n)))
}

/// Scalars for `f(x, t) = c_skip·x + c_out·g(c_in·x, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
}

/// Preconditioning coefficients at noise level `t`.
///
/// `c_skip(ε) = 1` and `c_out(ε) = 0` exactly, so the composite function is
/// the identity at the smallest noise level.
pub fn boundary_coeffs(t: f64, cfg: &ScheduleConfig) -> Result<BoundaryCoeffs> {
    if !(t >= cfg.sigma_min && t.is_finite()) {
        return Err(invalid!(
            "noise level {t} is below sigma_min {}",
            cfg.sigma_min
        ));
    }
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let shifted = t - cfg.sigma_min;
    let norm = libm::sqrt(sd2 + t * t);
    Ok(BoundaryCoeffs {
        c_skip: sd2 / (shifted * shifted + sd2),
        c_out: cfg.sigma_data * shifted / norm,
        c_in: 1.0 / norm,
    })
}
