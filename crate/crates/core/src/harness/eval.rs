use serde::Serialize;

use super::{stack_images, EVAL_CHUNK};
use crate::augment::Image;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nets::Model;

pub const METRICS_HEADER: &str =
    "iter,train_loss,ocr_loss,lambda,top1,top3,top5,order_tau,residual_mi,residual_entropy_ratio";

/// One monitoring row. `train_loss` is the mean total loss over the
/// iterations since the previous row (NaN for the initial row). Accuracies
/// are target-domain; order and residual statistics use the monitor split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub train_loss: f64,
    /// OCR loss on the monitor views at the monitored λ.
    pub ocr_loss: f64,
    pub lambda: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub order_tau: f64,
    pub residual_mi: f64,
    pub residual_entropy_ratio: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.iter,
            self.train_loss,
            self.ocr_loss,
            self.lambda,
            self.top1,
            self.top3,
            self.top5,
            self.order_tau,
            self.residual_mi,
            self.residual_entropy_ratio
        )
    }
}

/// Logits for a list of images, flattened row-major `[n, C]`.
pub fn logits_of<'a>(model: &Model, images: impl IntoIterator<Item = &'a Image>) -> Result<Vec<f64>> {
    let images: Vec<&Image> = images.into_iter().collect();
    let mut out = Vec::with_capacity(images.len() * model.classes());
    for chunk in images.chunks(EVAL_CHUNK) {
        let x = stack_images(chunk.iter().copied(), false)?;
        out.extend_from_slice(model.logits(&x)?.values());
    }
    Ok(out)
}

/// Fraction of rows whose label is among the `k` largest scores; ties go
/// to the lower class index.
pub fn top_k_from_logits(logits: &[f64], classes: usize, labels: &[usize], k_list: &[usize]) -> Result<Vec<f64>> {
    if classes == 0 || logits.len() != classes * labels.len() {
        return Err(Error::Shape(format!("{} logits for {} labels x {classes} classes", logits.len(), labels.len())));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k > classes) {
        return Err(Error::Contract(format!("top-{k} undefined for {classes} classes")));
    }
    if labels.is_empty() {
        return Err(Error::Contract("top-k of an empty sample".into()));
    }
    let ranks: Vec<usize> = logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let s = row[y];
            row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < y)).count()
        })
        .collect();
    Ok(k_list
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / labels.len() as f64)
        .collect())
}

pub fn evaluate(model: &Model, d: &DomainDataset, k_list: &[usize]) -> Result<Vec<f64>> {
    top_k_from_logits(&logits_of(model, &d.images)?, model.classes(), &d.labels, k_list)
}
