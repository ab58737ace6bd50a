use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::{logits_of, top_k_from_logits};
use crate::augment::{Image, CHANNELS};
use crate::data::{mix_seed, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::Model;

/// Real unit-norm 2-D basis image for frequency `(u, v)` on a `side x side`
/// grid: `cas(2π(u·y + v·x)/side) / side` with `cas = cos + sin`. Distinct
/// frequencies modulo `side` give orthogonal images; `(0, 0)` is the
/// constant `1/side`.
pub fn fourier_basis(side: usize, u: i64, v: i64) -> Vec<f64> {
    let n = side as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let theta = 2.0 * PI * ((u * y as i64 + v * x as i64).rem_euclid(side as i64)) as f64 / n;
            out.push((theta.cos() + theta.sin()) / n);
        }
    }
    out
}

/// `grid x grid` error rates under `eps`-scaled basis noise. Cell `(i, j)`
/// holds frequency `(i - grid/2, j - grid/2)`, so the zero frequency sits
/// at the center.
pub fn fourier_map(model: &Model, d: &DomainDataset, grid: usize, eps: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (h, w) = d.side();
    if d.is_empty() || h != w {
        return Err(Error::Contract("fourier map needs a non-empty square-image dataset".into()));
    }
    if grid == 0 || grid > h {
        return Err(Error::Config(format!("grid must be in [1, {h}], got {grid}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be finite and >= 0, got {eps}")));
    }
    let half = (grid / 2) as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xf0_0f1e]));
    let mut map = vec![vec![0.0; grid]; grid];
    for (i, row) in map.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let basis = fourier_basis(h, i as i64 - half, j as i64 - half);
            let noisy: Vec<Image> = d
                .images
                .iter()
                .map(|img| {
                    let r = if rng.random::<bool>() { eps } else { -eps };
                    let mut out = img.clone();
                    for c in 0..CHANNELS {
                        for (k, b) in basis.iter().enumerate() {
                            out.data[c * h * w + k] += r * b;
                        }
                    }
                    out.clamp01()
                })
                .collect();
            let logits = logits_of(model, &noisy)?;
            *cell = 1.0 - top_k_from_logits(&logits, model.classes(), &d.labels, &[1])?[0];
        }
    }
    Ok(map)
}

pub fn fourier_map_csv(map: &[Vec<f64>]) -> String {
    map.iter()
        .map(|row| row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}
