use std::fs;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Benchmark, ExperimentConfig, MonitorSplit};
use super::eval::{logits_of, top_k_from_logits, MetricsRow, METRICS_HEADER};
use super::{stack_images, EVAL_CHUNK};
use crate::augment::{strong_augment, weak_augment, Image};
use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::data::{mix_seed, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::{sgd_step, Model, OptimizerState};
use crate::ocr::{
    argmax_rows, mi_labels_residual, order_preservation_score, residual, softmax_entropies, total_loss, BatchParts,
    LambdaPolicy, ScheduleStrategy,
};

// Stream tags for the per-run random number generators.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_EVAL_VIEWS: u64 = 3;
const STREAM_LAMBDA: u64 = 4;

pub struct TrainOutcome {
    pub model: Model,
    pub initial: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub iterations: u64,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint()
    }

    pub fn final_row(&self) -> &MetricsRow {
        self.metrics.last().expect("metrics always hold the initial row")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub method: String,
    pub seed: u64,
    pub iterations: u64,
    pub ocr_layer: String,
    #[serde(rename = "final")]
    pub final_row: MetricsRow,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Target domain for accuracy plus fixed weak/strong views of the monitor
/// split, shared by every metrics row.
struct MonitorViews<'a> {
    target: &'a DomainDataset,
    labels: &'a [usize],
    weak: Vec<Image>,
    strong: Vec<Image>,
}

impl<'a> MonitorViews<'a> {
    fn new(bench: &'a Benchmark, cfg: &ExperimentConfig) -> Result<Self> {
        let split = match cfg.monitor_split {
            MonitorSplit::SourceHoldout => &bench.holdout,
            MonitorSplit::Target => &bench.target,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_EVAL_VIEWS]));
        let mut weak = Vec::with_capacity(split.len());
        let mut strong = Vec::with_capacity(split.len());
        for img in &split.images {
            weak.push(weak_augment(img, &cfg.augment, &mut rng)?);
            strong.push(strong_augment(img, &cfg.augment, &mut rng)?);
        }
        Ok(Self { target: &bench.target, labels: &split.labels, weak, strong })
    }

    fn row(&self, model: &Model, layer: usize, iter: u64, train_loss: f64, lambda: f64) -> Result<MetricsRow> {
        let classes = model.classes();
        let logits = logits_of(model, &self.target.images)?;
        let ks: Vec<usize> = [1, 3, 5].iter().map(|&k| k.min(classes)).collect();
        let top = top_k_from_logits(&logits, classes, &self.target.labels, &ks)?;

        let depth = model.backbone.depth();
        let (mut tau_sum, mut entropy_sum, mut ocr_sum) = (0.0, 0.0, 0.0);
        let mut residual_pred = Vec::with_capacity(self.labels.len());
        for (wk, st) in self.weak.chunks(EVAL_CHUNK).zip(self.strong.chunks(EVAL_CHUNK)) {
            let rows = wk.len() as f64;
            let h_o = model.backbone.forward_range(&stack_images(wk, false)?, 0, layer)?;
            let h_a = model.backbone.forward_range(&stack_images(st, false)?, 0, layer)?;
            let to_logits = |h: &Tensor| model.head.forward(&model.backbone.forward_range(h, layer, depth)?);
            tau_sum += order_preservation_score(&to_logits(&h_o)?, &to_logits(&h_a)?)? * rows;
            let logits_n = to_logits(&residual(&h_o, &h_a, lambda)?)?;
            let h: f64 = softmax_entropies(&logits_n)?.iter().sum();
            entropy_sum += h;
            ocr_sum -= h;
            residual_pred.extend(argmax_rows(&logits_n)?);
        }
        let n = self.labels.len() as f64;
        Ok(MetricsRow {
            iter,
            train_loss,
            ocr_loss: ocr_sum / n,
            lambda,
            top1: top[0],
            top3: top[1],
            top5: top[2],
            order_tau: tau_sum / n,
            residual_mi: mi_labels_residual(&residual_pred, self.labels, classes)?,
            residual_entropy_ratio: (entropy_sum / n) / (classes as f64).ln(),
        })
    }
}

/// Deterministic λ reported in metrics rows: the schedule value at the
/// current iteration (the constant for the fixed strategy, `λ0` for random).
fn monitor_lambda(policy: &LambdaPolicy, t: u64) -> Result<f64> {
    let t = t.max(1);
    match policy.strategy {
        ScheduleStrategy::Fixed => Ok(policy.fixed_lambda),
        ScheduleStrategy::Random => Ok(policy.schedule.lambda0),
        ScheduleStrategy::Eq4 => policy.schedule.lambda_at(t),
        ScheduleStrategy::ReversedEq4 => policy.schedule.lambda_at(policy.schedule.total_iters + 1 - t),
    }
}

/// Trains on a freshly generated benchmark and writes outputs when
/// `output_dir` is set.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let bench = cfg.benchmark.build(cfg.seed)?;
    let outcome = train_on(cfg, &bench)?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
        outcome.checkpoint().save(dir.join("checkpoint.bin"))?;
        let summary = summarize(cfg, &outcome);
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(outcome)
}

pub fn summarize(cfg: &ExperimentConfig, outcome: &TrainOutcome) -> Summary {
    Summary {
        method: serde_json::to_value(cfg.method.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        seed: cfg.seed,
        iterations: outcome.iterations,
        ocr_layer: cfg.ocr_layer.clone().unwrap_or_else(|| format!("layer{}", cfg.hidden_dims.len())),
        final_row: *outcome.final_row(),
    }
}

/// Training loop on a prebuilt benchmark.
pub fn train_on(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = cfg.benchmark.classes;
    let mut model = Model::init(&cfg.net_dims(), classes, cfg.seed)?;
    let initial = model.to_checkpoint();
    let depth = model.backbone.depth();
    let layer = match &cfg.ocr_layer {
        Some(name) => model.backbone.representation_index(name)?,
        None => depth,
    };

    let train_images: Vec<&Image> = bench.sources.iter().flat_map(|d| &d.images).collect();
    let train_labels: Vec<usize> = bench.sources.iter().flat_map(|d| d.labels.iter().copied()).collect();
    if train_images.iter().any(|img| img.len() != cfg.input_dim()) {
        return Err(Error::Config("source images do not match the configured input size".into()));
    }
    let n = train_images.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total_iters = (cfg.epochs * batches) as u64;
    let policy = LambdaPolicy {
        strategy: cfg.schedule_strategy,
        schedule: cfg.schedule.with_total(total_iters.max(1)),
        fixed_lambda: cfg.fixed_lambda,
    };
    let interval = if cfg.eval_interval == 0 { batches } else { cfg.eval_interval } as u64;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_SHUFFLE]));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_AUGMENT]));
    let mut lambda_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_LAMBDA]));
    let monitor = MonitorViews::new(bench, cfg)?;
    let mut metrics = vec![monitor.row(&model, layer, 0, f64::NAN, monitor_lambda(&policy, 0)?)?];

    let needs_aug = cfg.method.kind.uses_augmented_view();
    let mut order: Vec<usize> = (0..n).collect();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(cfg.batch_size) {
            t += 1;
            let mut weak = Vec::with_capacity(idx.len());
            let mut strong = Vec::with_capacity(idx.len());
            for &i in idx {
                weak.push(weak_augment(train_images[i], &cfg.augment, &mut aug_rng)?);
                if needs_aug {
                    strong.push(strong_augment(train_images[i], &cfg.augment, &mut aug_rng)?);
                }
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let lambda = policy.lambda(t, &mut lambda_rng)?;

            let to_logits = |h: &Tensor| model.head.forward(&model.backbone.forward_range(h, layer, depth)?);
            let z_o = model.backbone.forward_range(&stack_images(&weak, false)?, 0, layer)?;
            let z_a = if needs_aug {
                Some(model.backbone.forward_range(&stack_images(&strong, false)?, 0, layer)?)
            } else {
                None
            };
            let logits_o = to_logits(&z_o)?;
            let parts = BatchParts {
                logits_o: &logits_o,
                labels: &labels,
                z_o: &z_o,
                z_a: z_a.as_ref(),
                to_logits: &to_logits,
                lambda,
            };
            let loss = total_loss(&cfg.method, &parts)?;
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {t} (epoch {}): supervised {}, regularizer {}, lambda {lambda}",
                    epoch + 1,
                    loss.supervised,
                    loss.regularizer
                )));
            }
            model.zero_grad();
            loss.total.backward()?;
            drop(parts);
            drop(loss);
            let opt = OptimizerState { lr: cfg.lr_schedule.lr_at(cfg.optimizer.lr, t, total_iters), ..cfg.optimizer };
            sgd_step(&opt, &mut model.params_mut())?;
            loss_sum += value;
            loss_count += 1;

            if t % interval == 0 || t == total_iters {
                let mean = loss_sum / loss_count as f64;
                metrics.push(monitor.row(&model, layer, t, mean, monitor_lambda(&policy, t)?)?);
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
    }
    model.zero_grad();
    Ok(TrainOutcome { model, initial, metrics, iterations: total_iters })
}

/// Trains with the regularizer attached to the named representation and
/// returns the final target top-1.
pub fn layer_ablation(cfg: &ExperimentConfig, layer: &str) -> Result<f64> {
    let probe = crate::nets::mlp_init(&cfg.net_dims(), 0)?;
    probe.representation_index(layer)?;
    let cfg = ExperimentConfig { ocr_layer: Some(layer.to_string()), ..cfg.clone() };
    Ok(train(&cfg)?.final_row().top1)
}
