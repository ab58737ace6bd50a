//! Order-preservation and information meters.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Kendall's τ-b between two equally long score vectors.
///
/// Rows with no comparable pairs (all values tied) score 1 when both sides
/// are fully tied and 0 otherwise.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            match (dx == 0.0, dy == 0.0) {
                (true, true) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (true, false) => ties_x += 1,
                (false, true) => ties_y += 1,
                (false, false) => {
                    if (dx > 0.0) == (dy > 0.0) {
                        concordant += 1
                    } else {
                        discordant += 1
                    }
                }
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2) as i64;
    let denom = (((pairs - ties_x) * (pairs - ties_y)) as f64).sqrt();
    if denom == 0.0 {
        return if ties_x == pairs && ties_y == pairs { 1.0 } else { 0.0 };
    }
    (concordant - discordant) as f64 / denom
}

/// Mean row-wise Kendall τ between two `[b, C]` logit matrices.
pub fn order_preservation_score(logits_o: &Tensor, logits_a: &Tensor) -> Result<f64> {
    let (rows, cols) = logits_o.dims2()?;
    if logits_a.shape() != logits_o.shape() {
        return Err(Error::Shape(format!(
            "logit shapes {:?} and {:?} differ",
            logits_o.shape(),
            logits_a.shape()
        )));
    }
    if cols < 2 {
        return Err(Error::Shape("order preservation needs at least 2 classes".into()));
    }
    let total: f64 = logits_o
        .values()
        .chunks(cols)
        .zip(logits_a.values().chunks(cols))
        .map(|(a, b)| kendall_tau(a, b))
        .sum();
    Ok(total / rows as f64)
}

/// Per-row softmax entropy in nats.
pub fn softmax_entropies(logits: &Tensor) -> Result<Vec<f64>> {
    let (_, cols) = logits.dims2()?;
    Ok(logits
        .values()
        .chunks(cols)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            -exps
                .iter()
                .map(|e| e / z)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect())
}

/// Plug-in mutual information of a joint count table, computed two ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualInformation {
    /// `Σ p(a,b) ln[p(a,b) / (p(a) p(b))]`
    pub kl_form: f64,
    /// `H(B) - H(B | A)` with rows as `A`.
    pub entropy_form: f64,
}

fn entropy(probs: impl Iterator<Item = f64>) -> f64 {
    -probs.filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// MI (nats) of a row-major `rows x cols` table of counts.
pub fn mutual_information(counts: &[f64], rows: usize, cols: usize) -> Result<MutualInformation> {
    if counts.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "{} counts for a {rows}x{cols} table",
            counts.len()
        )));
    }
    if counts.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return Err(Error::Contract("counts must be finite and non-negative".into()));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("empty joint table".into()));
    }
    let row_p: Vec<f64> = counts.chunks(cols).map(|r| r.iter().sum::<f64>() / total).collect();
    let col_p: Vec<f64> = (0..cols)
        .map(|c| (0..rows).map(|r| counts[r * cols + c]).sum::<f64>() / total)
        .collect();

    let mut kl = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let p = counts[r * cols + c] / total;
            if p > 0.0 {
                kl += p * (p / (row_p[r] * col_p[c])).ln();
            }
        }
    }

    let h_cols = entropy(col_p.iter().copied());
    let h_cols_given_rows: f64 = counts
        .chunks(cols)
        .zip(&row_p)
        .filter(|(_, &pr)| pr > 0.0)
        .map(|(row, &pr)| {
            let n: f64 = row.iter().sum();
            pr * entropy(row.iter().map(|c| c / n))
        })
        .sum();

    Ok(MutualInformation { kl_form: kl, entropy_form: h_cols - h_cols_given_rows })
}

/// Discrete MI between predicted residual labels and true labels, in nats.
/// Both estimator forms are evaluated and must agree to 1e-9.
pub fn mi_labels_residual(pred_labels: &[usize], true_labels: &[usize], classes: usize) -> Result<f64> {
    if pred_labels.is_empty() {
        return Err(Error::Contract("mutual information of an empty sample".into()));
    }
    if pred_labels.len() != true_labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} labels",
            pred_labels.len(),
            true_labels.len()
        )));
    }
    let mut counts = vec![0.0; classes * classes];
    for (&p, &y) in pred_labels.iter().zip(true_labels) {
        if p >= classes || y >= classes {
            return Err(Error::Contract(format!("label out of range [0,{classes})")));
        }
        counts[p * classes + y] += 1.0;
    }
    let mi = mutual_information(&counts, classes, classes)?;
    if (mi.kl_form - mi.entropy_form).abs() > 1e-9 {
        return Err(Error::Numeric(format!(
            "MI forms disagree: {} vs {}",
            mi.kl_form, mi.entropy_form
        )));
    }
    Ok(mi.kl_form.max(0.0))
}
