//! Experiment orchestration: training, evaluation, attacks, Fourier
//! sensitivity and test-time adaptation.

mod attack;
mod config;
mod eval;
mod fourier;
mod train;
mod tta;

pub use attack::{attack, perturb_batch, AttackBatch, AttackConfig, AttackMethod};
pub use config::{Benchmark, BenchmarkConfig, ExperimentConfig, LrSchedule, MonitorSplit, ScheduleConfig};
pub use eval::{evaluate, logits_of, top_k_from_logits, MetricsRow, METRICS_HEADER};
pub use fourier::{fourier_basis, fourier_map, fourier_map_csv};
pub use train::{layer_ablation, metrics_csv, summarize, train, train_on, Summary, TrainOutcome};
pub use tta::{corruption_stream, tta_adapt, TtaConfig, TtaMethod};

use crate::augment::Image;
use crate::autodiff::Tensor;
use crate::error::Result;

/// Rows of flattened channel-major pixels.
pub(crate) fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>, requires_grad: bool) -> Result<Tensor> {
    let mut values = Vec::new();
    let mut rows = 0;
    let mut dim = 0;
    for img in images {
        dim = img.len();
        values.extend_from_slice(&img.data);
        rows += 1;
    }
    Tensor::new(&[rows, dim], values, requires_grad)
}

/// Evaluation is chunked to bound graph memory.
pub(crate) const EVAL_CHUNK: usize = 256;
