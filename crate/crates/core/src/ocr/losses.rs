use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::PrototypeHead;

use super::schedule::LAMBDA_CAP;

/// `z_n = (z_a - λ z_o) / (1 - λ)`; differentiable in both views.
pub fn residual(z_o: &Tensor, z_a: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0 && lambda <= LAMBDA_CAP) {
        return Err(Error::Config(format!("lambda must be in (0, {LAMBDA_CAP}], got {lambda}")));
    }
    Ok(z_a.sub(&z_o.scale(lambda))?.scale(1.0 / (1.0 - lambda)))
}

/// `λ z_o + (1 - λ) z_n`, the inverse of [`residual`].
pub fn recompose(z_o: &Tensor, z_n: &Tensor, lambda: f64) -> Result<Tensor> {
    z_o.scale(lambda).add(&z_n.scale(1.0 - lambda))
}

/// Mean Shannon entropy (nats) of the row softmaxes, as a graph node.
pub fn mean_softmax_entropy(logits: &Tensor) -> Result<Tensor> {
    let (rows, _) = logits.dims2()?;
    let log_p = logits.log_softmax()?;
    Ok(log_p.exp().mul(&log_p)?.sum().scale(-1.0 / rows as f64))
}

/// Negative mean prediction entropy of already-computed residual logits.
pub fn residual_entropy_loss(logits_n: &Tensor) -> Result<Tensor> {
    Ok(mean_softmax_entropy(logits_n)?.scale(-1.0))
}

/// `-mean_b H(softmax(F(z_n)))`; bounded below by `-ln C`.
pub fn ocr_loss(head: &PrototypeHead, z_n: &Tensor) -> Result<Tensor> {
    residual_entropy_loss(&head.forward(z_n)?)
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, cols) = logits.dims2()?;
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    let mut one_hot = vec![0.0; rows * cols];
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::Contract(format!("label {y} out of range for {cols} classes")));
        }
        one_hot[r * cols + y] = 1.0;
    }
    let one_hot = Tensor::constant(&[rows, cols], one_hot)?;
    Ok(logits.log_softmax()?.mul(&one_hot)?.sum().scale(-1.0 / rows as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepNorm {
    L1,
    L2,
}

/// Mean absolute (L1) or mean squared (L2) difference between the views,
/// averaged over every element of the batch.
pub fn rep_consistency_loss(z_o: &Tensor, z_a: &Tensor, norm: RepNorm) -> Result<Tensor> {
    let diff = z_a.sub(z_o)?;
    let per_elem = match norm {
        RepNorm::L2 => diff.mul(&diff)?,
        // |d| = relu(d) + relu(-d)
        RepNorm::L1 => diff.relu().add(&diff.scale(-1.0).relu())?,
    };
    Ok(per_elem.mean())
}

/// Row argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, cols) = logits.dims2()?;
    Ok(logits
        .values()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Cross-entropy of `softmax(F(z_a))` against the hard, gradient-free
/// pseudo-label `argmax F(z_o)`.
pub fn pred_consistency_loss(head: &PrototypeHead, z_o: &Tensor, z_a: &Tensor) -> Result<Tensor> {
    pred_consistency_from_logits(&head.forward(z_o)?, &head.forward(z_a)?)
}

pub fn pred_consistency_from_logits(logits_o: &Tensor, logits_a: &Tensor) -> Result<Tensor> {
    if logits_o.shape() != logits_a.shape() {
        return Err(Error::Shape("view logits differ in shape".into()));
    }
    let pseudo = argmax_rows(&logits_o.detach())?;
    cross_entropy(logits_a, &pseudo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyKind {
    #[default]
    None,
    Ocr,
    RepresentationL1,
    RepresentationL2,
    PredictionCe,
}

impl ConsistencyKind {
    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| {
            Error::Config(format!(
                "unknown consistency method '{name}' (expected none, ocr, representation-l1, representation-l2, prediction-ce)"
            ))
        })
    }

    /// Whether the method needs the strongly augmented view.
    pub fn uses_augmented_view(self) -> bool {
        self != ConsistencyKind::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMethod {
    pub kind: ConsistencyKind,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl Default for ConsistencyMethod {
    fn default() -> Self {
        Self { kind: ConsistencyKind::None, weight: 1.0 }
    }
}

impl ConsistencyMethod {
    pub fn new(kind: ConsistencyKind, weight: f64) -> Self {
        Self { kind, weight }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::Config(format!(
                "consistency weight must be finite and >= 0, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// Inputs of one training step. `z_o`/`z_a` live at whatever representation
/// the regularizer is attached to and `to_logits` maps that representation
/// to class scores (the shared head, possibly preceded by the remaining
/// backbone layers).
pub struct BatchParts<'a> {
    pub logits_o: &'a Tensor,
    pub labels: &'a [usize],
    pub z_o: &'a Tensor,
    pub z_a: Option<&'a Tensor>,
    pub to_logits: &'a dyn Fn(&Tensor) -> Result<Tensor>,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub supervised: f64,
    /// Unweighted regularizer value (0 for `none`).
    pub regularizer: f64,
}

/// Supervised cross-entropy on the original view plus the weighted regularizer.
pub fn total_loss(method: &ConsistencyMethod, parts: &BatchParts<'_>) -> Result<LossParts> {
    method.validate()?;
    let supervised = cross_entropy(parts.logits_o, parts.labels)?;
    let reg = match method.kind {
        ConsistencyKind::None => None,
        kind => {
            let z_a = parts.z_a.ok_or_else(|| {
                Error::Contract(format!("{kind:?} needs the augmented representation"))
            })?;
            Some(match kind {
                ConsistencyKind::Ocr => {
                    let z_n = residual(parts.z_o, z_a, parts.lambda)?;
                    residual_entropy_loss(&(parts.to_logits)(&z_n)?)?
                }
                ConsistencyKind::RepresentationL1 => rep_consistency_loss(parts.z_o, z_a, RepNorm::L1)?,
                ConsistencyKind::RepresentationL2 => rep_consistency_loss(parts.z_o, z_a, RepNorm::L2)?,
                ConsistencyKind::PredictionCe => pred_consistency_from_logits(
                    &(parts.to_logits)(parts.z_o)?,
                    &(parts.to_logits)(z_a)?,
                )?,
                ConsistencyKind::None => unreachable!(),
            })
        }
    };
    let supervised_value = supervised.item();
    match reg {
        Some(r) if method.weight != 0.0 => Ok(LossParts {
            regularizer: r.item(),
            total: supervised.add(&r.scale(method.weight))?,
            supervised: supervised_value,
        }),
        Some(r) => Ok(LossParts { regularizer: r.item(), total: supervised, supervised: supervised_value }),
        None => Ok(LossParts { regularizer: 0.0, total: supervised, supervised: supervised_value }),
    }
}
