use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stack_images;
use crate::autodiff::Tensor;
use crate::data::{mix_seed, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::Model;
use crate::ocr::{argmax_rows, cross_entropy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub eps: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_steps() -> usize {
    10
}

fn default_step_size() -> f64 {
    0.01
}

fn default_batch() -> usize {
    128
}

impl AttackConfig {
    /// Iteration count 10, strength 0.01, step 0.01.
    pub fn standard(method: AttackMethod, seed: u64) -> Self {
        Self { method, eps: 0.01, steps: 10, step_size: 0.01, seed, batch_size: default_batch() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be finite and >= 0, got {}", self.step_size)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("attack steps and batch size must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_steps(&self) -> usize {
        match self.method {
            AttackMethod::Fgsm => 1,
            _ => self.steps,
        }
    }
}

/// Result of attacking one batch: the last iterate and, per sample, whether
/// the clean input and every visited point (including a random start) were
/// classified correctly.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackBatch {
    pub adversarial: Vec<f64>,
    pub robust: Vec<bool>,
}

fn input_gradient(model: &Model, x: &[f64], rows: usize, labels: &[usize]) -> Result<Vec<f64>> {
    let dim = x.len() / rows;
    let input = Tensor::new(&[rows, dim], x.to_vec(), true)?;
    let loss = cross_entropy(&model.logits(&input)?, labels)?;
    loss.backward()?;
    model.zero_grad();
    input.grad().ok_or_else(|| Error::Numeric("attack produced no input gradient".into()))
}

fn predictions(model: &Model, x: &[f64], rows: usize) -> Result<Vec<usize>> {
    let input = Tensor::constant(&[rows, x.len() / rows], x.to_vec())?;
    argmax_rows(&model.logits(&input)?)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the configured attack on a row-major `[labels.len(), D]` batch.
pub fn perturb_batch(
    model: &Model,
    x0: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AttackBatch> {
    cfg.validate()?;
    let rows = labels.len();
    if rows == 0 || x0.len() % rows != 0 {
        return Err(Error::Shape(format!("{} values for {rows} samples", x0.len())));
    }
    let eps = cfg.eps;
    let project = |x: &mut [f64]| {
        for (v, &o) in x.iter_mut().zip(x0) {
            *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
    };
    let mut robust: Vec<bool> = predictions(model, x0, rows)?.iter().zip(labels).map(|(p, y)| p == y).collect();
    let mut x = x0.to_vec();
    if cfg.method == AttackMethod::Pgd {
        for v in x.iter_mut() {
            *v += rng.random_range(-1.0..=1.0) * eps;
        }
        project(&mut x);
        for (r, (p, y)) in robust.iter_mut().zip(predictions(model, &x, rows)?.iter().zip(labels)) {
            *r &= p == y;
        }
    }
    let step = match cfg.method {
        AttackMethod::Fgsm => eps,
        _ => cfg.step_size,
    };
    for _ in 0..cfg.effective_steps() {
        let g = input_gradient(model, &x, rows, labels)?;
        for (v, gi) in x.iter_mut().zip(&g) {
            *v += step * sign(*gi);
        }
        project(&mut x);
        assert!(
            x.iter().zip(x0).all(|(&v, &o)| (0.0..=1.0).contains(&v) && (v - o).abs() <= eps + 1e-12),
            "attack iterate left the eps-ball or the pixel range"
        );
        for (r, (p, y)) in robust.iter_mut().zip(predictions(model, &x, rows)?.iter().zip(labels)) {
            *r &= p == y;
        }
    }
    Ok(AttackBatch { adversarial: x, robust })
}

/// Robust top-1 on clean images of `d` under the configured attack. A sample
/// counts as robust only if it and every attack iterate are classified correctly.
pub fn attack(model: &Model, d: &DomainDataset, cfg: &AttackConfig) -> Result<f64> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(Error::Contract("attack on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xa77a_c4]));
    let mut robust = 0usize;
    for (imgs, labels) in d.images.chunks(cfg.batch_size).zip(d.labels.chunks(cfg.batch_size)) {
        let x0 = stack_images(imgs, false)?;
        let out = perturb_batch(model, x0.values(), labels, cfg, &mut rng)?;
        robust += out.robust.iter().filter(|&&r| r).count();
    }
    Ok(robust as f64 / d.len() as f64)
}
