//! Shared fixtures for the benchmarks.

use ocr_core::data::gen_domain_sized;
use ocr_core::{DomainDataset, DomainSpec, Result, Tensor};

/// Deterministic pseudo-random values in [-1, 1).
pub fn filled(shape: &[usize], seed: u64, requires_grad: bool) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let values = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape, values, requires_grad)
}

pub fn domain(classes: usize, per_class: usize, side: usize) -> Result<DomainDataset> {
    let spec = DomainSpec { palette: [0.8, 0.6, 1.0], background: 0.2, noise_sigma: 0.05, seed: 1 };
    gen_domain_sized(classes, per_class, &spec, 0, side)
}
