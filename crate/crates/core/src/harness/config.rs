use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{gen_domain_sized, mix_seed, DomainDataset, DomainSpec, MAX_CLASSES};
use crate::error::{Error, Result};
use crate::nets::OptimizerState;
use crate::ocr::{ConsistencyMethod, LambdaSchedule, ScheduleStrategy};

/// Annealing parameters; the iteration count is derived from epochs and batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lambda0: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lambda0: 0.5, alpha: 10.0, beta: 0.75 }
    }
}

impl ScheduleConfig {
    pub fn with_total(&self, total_iters: u64) -> LambdaSchedule {
        LambdaSchedule { lambda0: self.lambda0, alpha: self.alpha, beta: self.beta, total_iters }
    }
}

/// Source domains, held-out target domain and sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub target_per_class: usize,
    /// Held-out samples per class and source domain, never trained on.
    pub holdout_per_class: usize,
    pub image_side: usize,
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            classes: 7,
            train_per_class: 200,
            target_per_class: 100,
            holdout_per_class: 20,
            image_side: 32,
            sources: vec![
                DomainSpec { palette: [1.0, 0.35, 0.35], background: 0.10, noise_sigma: 0.04, seed: 101 },
                DomainSpec { palette: [0.35, 1.0, 0.35], background: 0.25, noise_sigma: 0.06, seed: 202 },
                DomainSpec { palette: [0.35, 0.35, 1.0], background: 0.05, noise_sigma: 0.08, seed: 303 },
            ],
            target: DomainSpec { palette: [0.9, 0.85, 0.25], background: 0.4, noise_sigma: 0.05, seed: 404 },
        }
    }
}

impl BenchmarkConfig {
    /// Reduced-resolution variant used by the acceptance suite and benches.
    pub fn desk() -> Self {
        Self { train_per_class: 60, target_per_class: 40, holdout_per_class: 80, image_side: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!("classes must be in [2, {MAX_CLASSES}], got {}", self.classes)));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("need at least one source domain".into()));
        }
        if self.train_per_class == 0 || self.target_per_class == 0 || self.holdout_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        if self.image_side < 8 {
            return Err(Error::Config(format!("image side must be >= 8, got {}", self.image_side)));
        }
        for s in self.sources.iter().chain(std::iter::once(&self.target)) {
            s.validate()?;
        }
        Ok(())
    }

    /// Domain spec with its seed mixed with the run seed and a split tag.
    fn seeded(spec: &DomainSpec, run_seed: u64, split: u64) -> DomainSpec {
        DomainSpec { seed: mix_seed(&[spec.seed, run_seed, split]), ..*spec }
    }

    pub fn build(&self, run_seed: u64) -> Result<Benchmark> {
        self.validate()?;
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                gen_domain_sized(self.classes, self.train_per_class, &Self::seeded(s, run_seed, 0), i as u32, self.image_side)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut holdout: Option<DomainDataset> = None;
        for (i, s) in self.sources.iter().enumerate() {
            let d = gen_domain_sized(self.classes, self.holdout_per_class, &Self::seeded(s, run_seed, 1), i as u32, self.image_side)?;
            match holdout.as_mut() {
                None => holdout = Some(d),
                Some(h) => {
                    h.images.extend(d.images);
                    h.labels.extend(d.labels);
                }
            }
        }
        let holdout = holdout.expect("at least one source domain");
        let target = gen_domain_sized(
            self.classes,
            self.target_per_class,
            &Self::seeded(&self.target, run_seed, 0),
            self.sources.len() as u32,
            self.image_side,
        )?;
        Ok(Benchmark { sources, holdout, target })
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub sources: Vec<DomainDataset>,
    /// Unseen samples from all source domains, concatenated.
    pub holdout: DomainDataset,
    pub target: DomainDataset,
}

/// Learning-rate decay over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 + cos(π (t-1)/T)) / 2` for 1-based `t`.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, t: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = t.saturating_sub(1) as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Split on which order and residual statistics are monitored; accuracies
/// are always measured on the target domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitorSplit {
    #[default]
    SourceHoldout,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: ConsistencyMethod,
    pub schedule: ScheduleConfig,
    pub schedule_strategy: ScheduleStrategy,
    /// λ used by the `fixed` strategy.
    pub fixed_lambda: f64,
    pub augment: AugmentConfig,
    /// Backbone widths after the input layer; the last entry is the representation size.
    pub hidden_dims: Vec<usize>,
    pub optimizer: OptimizerState,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    /// Representation the regularizer is attached to (`input`, `layer1`, ...);
    /// `None` means the backbone output.
    pub ocr_layer: Option<String>,
    /// Iterations between metric rows; 0 means once per epoch.
    pub eval_interval: usize,
    pub monitor_split: MonitorSplit,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: ConsistencyMethod::default(),
            schedule: ScheduleConfig::default(),
            schedule_strategy: ScheduleStrategy::Eq4,
            fixed_lambda: 0.5,
            augment: AugmentConfig::default(),
            hidden_dims: vec![256, 128, 64],
            optimizer: OptimizerState::default(),
            lr_schedule: LrSchedule::Constant,
            epochs: 12,
            batch_size: 64,
            seed: 0,
            benchmark: BenchmarkConfig::default(),
            ocr_layer: None,
            eval_interval: 0,
            monitor_split: MonitorSplit::SourceHoldout,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// The acceptance-suite configuration: the desk benchmark, a narrower
    /// backbone and a longer cosine-annealed run with stronger weight decay.
    pub fn desk() -> Self {
        Self {
            hidden_dims: vec![128, 64, 32],
            optimizer: OptimizerState { lr: 0.02, momentum: 0.9, weight_decay: 0.01 },
            lr_schedule: LrSchedule::Cosine,
            epochs: 40,
            benchmark: BenchmarkConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn input_dim(&self) -> usize {
        3 * self.benchmark.image_side * self.benchmark.image_side
    }

    pub fn net_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.hidden_dims.iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.augment.validate()?;
        self.optimizer.validate()?;
        self.benchmark.validate()?;
        self.schedule.with_total(1).validate()?;
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("hidden dims must be non-empty and positive, got {:?}", self.hidden_dims)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.fixed_lambda > 0.0 && self.fixed_lambda <= crate::ocr::LAMBDA_CAP) {
            return Err(Error::Config(format!("fixed lambda must be in (0, 0.99], got {}", self.fixed_lambda)));
        }
        if self.augment.crop_padding >= self.benchmark.image_side {
            return Err(Error::Config("crop padding must be smaller than the image side".into()));
        }
        Ok(())
    }
}
