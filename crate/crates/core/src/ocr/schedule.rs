use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest mixing coefficient accepted anywhere; the residual divides by `1 - λ`.
pub const LAMBDA_CAP: f64 = 0.99;

/// Annealing `λ(t) = λ0 · [1 - (1 + α t/T)^(-β)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub total_iters: u64,
}

fn default_alpha() -> f64 {
    10.0
}

fn default_beta() -> f64 {
    0.75
}

impl LambdaSchedule {
    pub fn new(lambda0: f64, total_iters: u64) -> Self {
        Self { lambda0, alpha: default_alpha(), beta: default_beta(), total_iters }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return Err(Error::Config(format!("lambda0 must be in (0,1), got {}", self.lambda0)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0)
        {
            return Err(Error::Config(format!(
                "alpha/beta must be finite and non-negative, got {}/{}",
                self.alpha, self.beta
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("schedule needs at least one iteration".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, t: u64) -> Result<f64> {
        if t > self.total_iters {
            return Err(Error::Contract(format!(
                "iteration {t} outside schedule of {} iterations",
                self.total_iters
            )));
        }
        let progress = t as f64 / self.total_iters as f64;
        let lambda = self.lambda0 * (1.0 - (1.0 + self.alpha * progress).powf(-self.beta));
        Ok(lambda.min(LAMBDA_CAP))
    }
}

/// How λ is chosen per training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleStrategy {
    /// Constant `fixed_lambda`.
    Fixed,
    /// Fresh `U(0, λ0)` draw every iteration.
    Random,
    /// The annealing schedule.
    #[default]
    Eq4,
    /// The annealing schedule run backwards in time.
    ReversedEq4,
}

/// Strategy plus the values it needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaPolicy {
    pub strategy: ScheduleStrategy,
    pub schedule: LambdaSchedule,
    pub fixed_lambda: f64,
}

impl LambdaPolicy {
    /// λ for 1-based iteration `t ∈ [1, T]`. Starting at 1 keeps the annealed
    /// value strictly positive so the residual is always defined.
    pub fn lambda(&self, t: u64, rng: &mut impl Rng) -> Result<f64> {
        let total = self.schedule.total_iters;
        if t == 0 || t > total {
            return Err(Error::Contract(format!("iteration {t} outside [1, {total}]")));
        }
        let lambda = match self.strategy {
            ScheduleStrategy::Fixed => self.fixed_lambda,
            ScheduleStrategy::Random => {
                let u: f64 = rng.random();
                // (0, λ0]
                self.schedule.lambda0 * (1.0 - u)
            }
            ScheduleStrategy::Eq4 => self.schedule.lambda_at(t)?,
            ScheduleStrategy::ReversedEq4 => self.schedule.lambda_at(total + 1 - t)?,
        };
        Ok(lambda.min(LAMBDA_CAP))
    }
}
