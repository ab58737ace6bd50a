use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::top_k_from_logits;
use super::stack_images;
use crate::augment::{strong_augment, weak_augment, AugmentConfig};
use crate::data::{corrupt, mix_seed, CorruptionKind, CorruptionSpec, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::{sgd_step, Model, OptimizerState};
use crate::ocr::{mean_softmax_entropy, residual, residual_entropy_loss, LambdaSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtaMethod {
    /// The backbone has no normalization statistics to re-estimate, so this
    /// is the frozen source model.
    BnOnly,
    Entropy,
    EntropyOcr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub method: TtaMethod,
    pub continual: bool,
    pub optimizer: OptimizerState,
    pub batch_size: usize,
    /// Gradient steps per test batch; 0 freezes the model.
    pub steps: usize,
    pub ocr_weight: f64,
    pub lambda0: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            method: TtaMethod::Entropy,
            continual: false,
            optimizer: OptimizerState { lr: 0.001, momentum: 0.0, weight_decay: 0.0 },
            batch_size: 32,
            steps: 1,
            ocr_weight: 1.0,
            lambda0: 0.5,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("tta batch size must be positive".into()));
        }
        if !(self.ocr_weight >= 0.0 && self.ocr_weight.is_finite()) {
            return Err(Error::Config(format!("ocr weight must be finite and >= 0, got {}", self.ocr_weight)));
        }
        LambdaSchedule::new(self.lambda0, 1).validate()
    }
}

/// The five corruptions at one severity, applied to `clean` in a fixed order.
pub fn corruption_stream(clean: &DomainDataset, severity: u8, seed: u64) -> Result<Vec<DomainDataset>> {
    CorruptionKind::ALL
        .iter()
        .map(|&kind| corrupt(clean, &CorruptionSpec { kind, severity }, mix_seed(&[seed, kind as u64])))
        .collect()
}

/// One unsupervised update on a test batch.
fn adapt_step(
    model: &mut Model,
    cfg: &TtaConfig,
    x: &crate::autodiff::Tensor,
    batch: &[crate::augment::Image],
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut loss = mean_softmax_entropy(&model.logits(x)?)?;
    if cfg.method == TtaMethod::EntropyOcr && cfg.ocr_weight > 0.0 {
        let mut weak = Vec::with_capacity(batch.len());
        let mut strong = Vec::with_capacity(batch.len());
        for img in batch {
            weak.push(weak_augment(img, &cfg.augment, rng)?);
            strong.push(strong_augment(img, &cfg.augment, rng)?);
        }
        let z_o = model.backbone.forward(&stack_images(&weak, false)?)?;
        let z_a = model.backbone.forward(&stack_images(&strong, false)?)?;
        let ocr = residual_entropy_loss(&model.head.forward(&residual(&z_o, &z_a, lambda)?)?)?;
        loss = loss.add(&ocr.scale(cfg.ocr_weight))?;
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric("non-finite test-time adaptation loss".into()));
    }
    model.zero_grad();
    loss.backward()?;
    drop(loss);
    sgd_step(&cfg.optimizer, &mut model.params_mut())?;
    model.zero_grad();
    Ok(())
}

/// Online top-1 per segment. Each batch is predicted before the model is
/// updated on it. Without `continual` the model, optimizer state, λ clock
/// and augmentation stream restart from the source for every segment.
pub fn tta_adapt(source: &Model, stream: &[DomainDataset], cfg: &TtaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let updates = cfg.method != TtaMethod::BnOnly && cfg.steps > 0;
    let batches_of = |d: &DomainDataset| d.len().div_ceil(cfg.batch_size) as u64;
    let fresh = || {
        let mut m = source.clone();
        m.reset_optimizer_state();
        (m, ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x77a])), 0u64)
    };
    let continual_total: u64 = stream.iter().map(|d| batches_of(d) * cfg.steps as u64).sum();

    let (mut model, mut rng, mut t) = fresh();
    let mut accs = Vec::with_capacity(stream.len());
    for (s, seg) in stream.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Contract(format!("stream segment {s} is empty")));
        }
        if !cfg.continual && s > 0 {
            (model, rng, t) = fresh();
        }
        let total = if cfg.continual { continual_total } else { batches_of(seg) * cfg.steps as u64 };
        let schedule = LambdaSchedule::new(cfg.lambda0, total.max(1));
        let mut correct = 0.0;
        for (imgs, labels) in seg.images.chunks(cfg.batch_size).zip(seg.labels.chunks(cfg.batch_size)) {
            let x = stack_images(imgs, false)?;
            let logits = model.logits(&x)?;
            correct += top_k_from_logits(logits.values(), model.classes(), labels, &[1])?[0] * labels.len() as f64;
            if updates {
                for _ in 0..cfg.steps {
                    t += 1;
                    let lambda = schedule.lambda_at(t)?;
                    adapt_step(&mut model, cfg, &x, imgs, lambda, &mut rng)?;
                }
            }
        }
        accs.push(correct / seg.len() as f64);
    }
    Ok(accs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_domain_sized, DomainSpec};
    use crate::harness::evaluate;

    fn setup() -> (Model, Vec<DomainDataset>) {
        let spec = DomainSpec { palette: [0.8, 0.6, 1.0], background: 0.2, noise_sigma: 0.05, seed: 8 };
        let clean = gen_domain_sized(3, 6, &spec, 0, 8).unwrap();
        let model = Model::init(&[192, 16, 8], 3, 4).unwrap();
        (model, corruption_stream(&clean, 5, 1).unwrap())
    }

    fn cfg(method: TtaMethod, continual: bool) -> TtaConfig {
        TtaConfig {
            method,
            continual,
            batch_size: 5,
            augment: AugmentConfig { crop_padding: 1, ..Default::default() },
            ..TtaConfig::default()
        }
    }

    #[test]
    fn frozen_methods_match_plain_evaluation() {
        let (model, stream) = setup();
        let frozen: Vec<f64> = stream.iter().map(|d| evaluate(&model, d, &[1]).unwrap()[0]).collect();
        assert_eq!(tta_adapt(&model, &stream, &cfg(TtaMethod::BnOnly, true)).unwrap(), frozen);
        let zero_steps = TtaConfig { steps: 0, ..cfg(TtaMethod::EntropyOcr, true) };
        assert_eq!(tta_adapt(&model, &stream, &zero_steps).unwrap(), frozen);
    }

    #[test]
    fn reset_mode_is_order_independent() {
        let (model, stream) = setup();
        for method in [TtaMethod::Entropy, TtaMethod::EntropyOcr] {
            let c = cfg(method, false);
            let forward = tta_adapt(&model, &stream, &c).unwrap();
            let reversed: Vec<DomainDataset> = stream.iter().rev().cloned().collect();
            let mut backward = tta_adapt(&model, &reversed, &c).unwrap();
            backward.reverse();
            assert_eq!(forward, backward);
        }
    }

    #[test]
    fn continual_updates_change_later_segments() {
        let (model, stream) = setup();
        let online = tta_adapt(&model, &stream, &cfg(TtaMethod::Entropy, false)).unwrap();
        let continual = tta_adapt(&model, &stream, &cfg(TtaMethod::Entropy, true)).unwrap();
        assert_eq!(online[0], continual[0]);
        assert_eq!(online.len(), 5);
    }
}
