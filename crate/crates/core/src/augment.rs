//! Seeded image transforms: a weak view (pad-crop + flip) for the original
//! representation and a strong view (weak + color jitter, grayscale, blur)
//! for the augmented one. All randomness comes from the caller's RNG.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Channel-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                CHANNELS,
                height,
                width,
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; CHANNELS * height * width] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    let dst = out.idx(c, y, x);
                    out.data[dst] = self.get(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop_padding: usize,
    /// Maximum relative per-channel scale change and absolute shift.
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub blur_kernel: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_padding: 2,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            blur_sigma_range: (0.1, 1.5),
            blur_kernel: 5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.grayscale_prob) {
            return Err(Error::Config(format!(
                "grayscale probability must be in [0,1], got {}",
                self.grayscale_prob
            )));
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return Err(Error::Config(format!(
                "jitter strength must be >= 0, got {}",
                self.jitter_strength
            )));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid blur sigma range ({lo}, {hi})")));
        }
        check_kernel(self.blur_kernel)
    }
}

fn check_kernel(ksize: usize) -> Result<()> {
    if ksize < 3 || ksize % 2 == 0 {
        return Err(Error::Config(format!("blur kernel must be odd and >= 3, got {ksize}")));
    }
    Ok(())
}

/// Zero-pad by `crop_padding`, take a random window of the original size,
/// then flip horizontally with probability 1/2.
pub fn weak_augment(x: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Image> {
    let pad = cfg.crop_padding;
    if pad >= x.height.min(x.width) {
        return Err(Error::Config(format!(
            "crop padding {pad} must be smaller than the image side {}",
            x.height.min(x.width)
        )));
    }
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let flip = rng.random_bool(0.5);

    let mut out = Image::filled(x.height, x.width, 0.0);
    for c in 0..CHANNELS {
        for y in 0..x.height {
            // source row in the unpadded image
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= x.height as isize {
                continue;
            }
            for col in 0..x.width {
                let sx = (col + dx) as isize - pad as isize;
                if sx < 0 || sx >= x.width as isize {
                    continue;
                }
                let dst = out.idx(c, y, col);
                out.data[dst] = x.get(c, sy as usize, sx as usize);
            }
        }
    }
    Ok(if flip { out.flip_horizontal() } else { out })
}

/// Weak view, then per-channel affine jitter, random grayscale and a
/// Gaussian blur with `sigma ~ U(lo, hi)`. Output is clamped to `[0, 1]`.
pub fn strong_augment(x: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Image> {
    cfg.validate()?;
    let mut img = weak_augment(x, cfg, rng)?;

    let s = cfg.jitter_strength;
    let plane = img.height * img.width;
    for c in 0..CHANNELS {
        let scale = 1.0 + s * (2.0 * rng.random::<f64>() - 1.0);
        let shift = s * (2.0 * rng.random::<f64>() - 1.0);
        for v in &mut img.data[c * plane..(c + 1) * plane] {
            *v = (*v * scale + shift).clamp(0.0, 1.0);
        }
    }

    if rng.random::<f64>() < cfg.grayscale_prob {
        img = grayscale(&img);
    }

    let (lo, hi) = cfg.blur_sigma_range;
    let u: f64 = rng.random();
    let sigma = lo + (hi - lo) * u;
    Ok(gaussian_blur(&img, sigma, cfg.blur_kernel)?.clamp01())
}

/// Replaces every channel with the luma `0.299 R + 0.587 G + 0.114 B`.
pub fn grayscale(x: &Image) -> Image {
    let plane = x.height * x.width;
    let mut out = x.clone();
    for i in 0..plane {
        let l = 0.299 * x.data[i] + 0.587 * x.data[plane + i] + 0.114 * x.data[2 * plane + i];
        for c in 0..CHANNELS {
            out.data[c * plane + i] = l;
        }
    }
    out
}

/// Normalized 1-D Gaussian weights of odd length `ksize`.
pub fn gaussian_kernel(sigma: f64, ksize: usize) -> Result<Vec<f64>> {
    check_kernel(ksize)?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = (ksize / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflect padding (`-1 -> 1`, `n -> n-2`).
pub fn gaussian_blur(x: &Image, sigma: f64, ksize: usize) -> Result<Image> {
    let k = gaussian_kernel(sigma, ksize)?;
    let r = (ksize / 2) as isize;
    let (h, w) = (x.height, x.width);
    let mut tmp = x.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for col in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, wt)| wt * x.get(c, y, reflect(col as isize + j as isize - r, w)))
                    .sum();
                let i = tmp.idx(c, y, col);
                tmp.data[i] = acc;
            }
        }
    }
    let mut out = tmp.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for col in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, wt)| wt * tmp.get(c, reflect(y as isize + j as isize - r, h), col))
                    .sum();
                let i = out.idx(c, y, col);
                out.data[i] = acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        let n = CHANNELS * h * w;
        Image::new(h, w, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    /// Seed whose first flip draw comes out as requested (padding 0 ⇒ the
    /// crop offsets are always 0 and consume their draws identically).
    fn seed_with_flip(want: bool) -> u64 {
        (0..)
            .find(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let _ = rng.random_range(0..=0usize);
                let _ = rng.random_range(0..=0usize);
                rng.random_bool(0.5) == want
            })
            .unwrap()
    }

    #[test]
    fn weak_identity_without_padding_or_flip() {
        let x = ramp(6, 5);
        let cfg = AugmentConfig { crop_padding: 0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed_with_flip(false));
        assert_eq!(weak_augment(&x, &cfg, &mut rng).unwrap(), x);

        let mut rng = ChaCha8Rng::seed_from_u64(seed_with_flip(true));
        let flipped = weak_augment(&x, &cfg, &mut rng).unwrap();
        assert_ne!(flipped, x);
        assert_eq!(flipped.flip_horizontal(), x);
    }

    #[test]
    fn weak_is_deterministic() {
        let x = ramp(8, 8);
        let cfg = AugmentConfig::default();
        let a = weak_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = weak_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let bad = AugmentConfig { crop_padding: 8, ..cfg };
        assert!(matches!(weak_augment(&x, &bad, &mut ChaCha8Rng::seed_from_u64(3)), Err(Error::Config(_))));
    }

    #[test]
    fn strong_with_identity_settings_equals_weak() {
        let x = ramp(8, 8);
        let cfg = AugmentConfig {
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            blur_sigma_range: (1e-3, 1e-3),
            ..Default::default()
        };
        let weak = weak_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let strong = strong_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(weak, strong);
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let x = ramp(4, 4);
        let cfg = AugmentConfig { grayscale_prob: 1.0, ..Default::default() };
        let g = strong_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let plane = 16;
        for i in 0..plane {
            assert_eq!(g.data[i], g.data[plane + i]);
            assert_eq!(g.data[i], g.data[2 * plane + i]);
        }
    }

    #[test]
    fn blur_examples() {
        let k = gaussian_kernel(1.0, 5).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut delta = Image::filled(9, 9, 0.0);
        let i = delta.idx(1, 4, 4);
        delta.data[i] = 1.0;
        let out = gaussian_blur(&delta, 1.0, 5).unwrap();
        // hand convolution: center weight of the separable kernel, squared
        let w0 = 1.0 / (1.0 + 2.0 * (-0.5f64).exp() + 2.0 * (-2.0f64).exp());
        assert!((out.get(1, 4, 4) - w0 * w0).abs() < 1e-15);
        assert!((w0 * w0 - 0.16210282).abs() < 1e-8);

        let flat = Image::filled(7, 6, 0.37);
        let out = gaussian_blur(&flat, 1.3, 5).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-12));

        let x = ramp(6, 6);
        let out = gaussian_blur(&x, 0.01, 5).unwrap();
        assert!(x.data.iter().zip(&out.data).all(|(a, b)| (a - b).abs() <= 1e-6));

        assert!(matches!(gaussian_blur(&x, 1.0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    proptest! {
        #[test]
        fn transforms_stay_in_unit_range(seed in any::<u64>(), vals in proptest::collection::vec(0.0f64..=1.0, 3 * 36)) {
            let x = Image::new(6, 6, vals).unwrap();
            let cfg = AugmentConfig { crop_padding: 1, jitter_strength: 0.8, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = weak_augment(&x, &cfg, &mut rng).unwrap();
            let s = strong_augment(&x, &cfg, &mut rng).unwrap();
            prop_assert!(w.data.iter().chain(&s.data).all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn pipelines_are_seed_deterministic(seed in any::<u64>()) {
            let x = ramp(8, 8);
            let cfg = AugmentConfig::default();
            let a = strong_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = strong_augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
