//! Procedural multi-domain shape datasets, corruptions, and the `OCRDATA1`
//! file format.
//!
//! The label attribute is the shape drawn; the domain-specific attributes
//! are the color palette, the background level and the pixel noise. Shape
//! placement is seeded per sample index only, so two domains generated from
//! the same seed contain the same masks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{gaussian_blur, Image, CHANNELS};
use crate::checkpoint::Reader;
use crate::error::{Error, Result};

pub const DATA_MAGIC: &[u8; 8] = b"OCRDATA1";
pub const DATA_VERSION: u32 = 1;
pub const DEFAULT_SIDE: usize = 32;
pub const MAX_CLASSES: usize = 16;

pub const SHAPE_NAMES: [&str; MAX_CLASSES] = [
    "disk",
    "square",
    "triangle",
    "cross",
    "ring",
    "bar",
    "L",
    "diamond",
    "horizontal-bar",
    "x",
    "hollow-square",
    "t",
    "half-disk",
    "inverted-triangle",
    "two-dots",
    "checker",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Per-channel foreground gains in `[0.2, 1]`, shared by all classes.
    pub palette: [f64; 3],
    pub background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.palette.iter().any(|g| !(0.2..=1.0).contains(g)) {
            return Err(Error::Config(format!("palette gains must be in [0.2,1], got {:?}", self.palette)));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config(format!("background must be in [0,1], got {}", self.background)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub classes: usize,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub domain_id: u32,
    pub spec: DomainSpec,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> (usize, usize) {
        self.images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0))
    }

    pub fn feature_dim(&self) -> usize {
        self.images.first().map(Image::len).unwrap_or(0)
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Rounds to the nearest `f32` so datasets survive the file format bit-exactly.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Whether normalized coordinate `(u, v)` (y pointing down) lies inside shape `class`.
pub fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => (-0.8..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.8) / 1.6,
        3 => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        4 => (0.3025..=1.0).contains(&r2),
        5 => u.abs() <= 0.25 && v.abs() <= 0.95,
        6 => {
            ((-0.8..=-0.35).contains(&u) && v.abs() <= 0.9)
                || ((0.45..=0.9).contains(&v) && u.abs() <= 0.8)
        }
        7 => u.abs() + v.abs() <= 1.0,
        8 => v.abs() <= 0.25 && u.abs() <= 0.95,
        9 => u.abs() <= 0.9 && v.abs() <= 0.9 && ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3),
        10 => (0.55..=0.9).contains(&u.abs().max(v.abs())),
        11 => ((-0.9..=-0.5).contains(&v) && u.abs() <= 0.9) || (u.abs() <= 0.22 && v.abs() <= 0.9),
        12 => r2 <= 1.0 && v >= 0.0,
        13 => (-0.8..=0.8).contains(&v) && u.abs() <= 0.9 * (0.8 - v) / 1.6,
        14 => (u + 0.5).powi(2) + v * v <= 0.16 || (u - 0.5).powi(2) + v * v <= 0.16,
        15 => u.abs() <= 0.9 && v.abs() <= 0.9 && ((u > 0.0) == (v > 0.0)),
        _ => false,
    }
}

/// Binary mask of sample `index` drawn from `seed`; independent of palette,
/// background and noise.
pub fn shape_mask(class: usize, seed: u64, index: u64, side: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, index, 0x6d61_736b]));
    let s = side as f64;
    let cy = s * (0.5 + rng.random_range(-0.12..0.12));
    let cx = s * (0.5 + rng.random_range(-0.12..0.12));
    let radius = s * rng.random_range(0.24..0.36);
    let mut mask = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let v = (y as f64 + 0.5 - cy) / radius;
            let u = (x as f64 + 0.5 - cx) / radius;
            mask[y * side + x] = shape_contains(class, u, v);
        }
    }
    mask
}

pub fn gen_domain(classes: usize, n_per_class: usize, spec: &DomainSpec, domain_id: u32) -> Result<DomainDataset> {
    gen_domain_sized(classes, n_per_class, spec, domain_id, DEFAULT_SIDE)
}

/// Generates `classes * n_per_class` images; sample `i` has label `i % classes`.
pub fn gen_domain_sized(
    classes: usize,
    n_per_class: usize,
    spec: &DomainSpec,
    domain_id: u32,
    side: usize,
) -> Result<DomainDataset> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::Config(format!("class count must be in [2, {MAX_CLASSES}], got {classes}")));
    }
    if n_per_class == 0 {
        return Err(Error::Config("need at least one sample per class".into()));
    }
    if side < 4 {
        return Err(Error::Config(format!("image side must be >= 4, got {side}")));
    }
    spec.validate()?;
    let n = classes * n_per_class;
    let plane = side * side;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let mask = shape_mask(label, spec.seed, i as u64, side);
        let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, domain_id as u64, i as u64, 0x6e6f_6973]));
        let mut data = vec![0.0; CHANNELS * plane];
        for c in 0..CHANNELS {
            for p in 0..plane {
                let base = if mask[p] { spec.palette[c] } else { spec.background };
                let eps: f64 = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * noise.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data[c * plane + p] = quantize((base + eps).clamp(0.0, 1.0));
            }
        }
        images.push(Image::new(side, side, data)?);
        labels.push(label);
    }
    Ok(DomainDataset { classes, images, labels, domain_id, spec: *spec })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    /// Severity-indexed magnitudes (index 0 is severity 1).
    ///
    /// | kind           | parameter                  | 1    | 2    | 3    | 4    | 5    |
    /// |----------------|----------------------------|------|------|------|------|------|
    /// | gaussian-noise | noise std                  | 0.04 | 0.06 | 0.08 | 0.09 | 0.10 |
    /// | gaussian-blur  | blur sigma (px)            | 0.4  | 0.6  | 0.7  | 0.8  | 1.0  |
    /// | brightness     | additive shift             | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
    /// | contrast       | contrast factor            | 0.75 | 0.5  | 0.4  | 0.3  | 0.15 |
    /// | pixelate       | block size (px)            | 2    | 3    | 4    | 6    | 8    |
    pub fn magnitude(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.7, 0.8, 1.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
        };
        table[(severity.clamp(1, 5) - 1) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!("severity must be in 1..=5, got {}", self.severity)));
        }
        Ok(())
    }
}

pub fn corrupt_image(x: &Image, c: &CorruptionSpec, rng: &mut impl Rng) -> Result<Image> {
    c.validate()?;
    let m = c.kind.magnitude(c.severity);
    let mut out = match c.kind {
        CorruptionKind::GaussianNoise => {
            let mut o = x.clone();
            for v in &mut o.data {
                *v += m * rng.sample::<f64, _>(StandardNormal);
            }
            o
        }
        CorruptionKind::GaussianBlur => {
            let ksize = (2 * (2.0 * m).ceil() as usize + 1).max(3);
            gaussian_blur(x, m, ksize)?
        }
        CorruptionKind::Brightness => {
            let mut o = x.clone();
            o.data.iter_mut().for_each(|v| *v += m);
            o
        }
        CorruptionKind::Contrast => {
            let plane = x.height * x.width;
            let mut o = x.clone();
            for ch in 0..CHANNELS {
                let px = &mut o.data[ch * plane..(ch + 1) * plane];
                let mean = px.iter().sum::<f64>() / plane as f64;
                px.iter_mut().for_each(|v| *v = (*v - mean) * m + mean);
            }
            o
        }
        CorruptionKind::Pixelate => pixelate(x, m as usize),
    };
    out.data.iter_mut().for_each(|v| *v = quantize(v.clamp(0.0, 1.0)));
    Ok(out)
}

fn pixelate(x: &Image, block: usize) -> Image {
    let mut out = x.clone();
    for c in 0..CHANNELS {
        for by in (0..x.height).step_by(block) {
            for bx in (0..x.width).step_by(block) {
                let ys = by..(by + block).min(x.height);
                let xs = bx..(bx + block).min(x.width);
                let count = (ys.len() * xs.len()) as f64;
                let mean = ys
                    .clone()
                    .flat_map(|y| xs.clone().map(move |xx| (y, xx)))
                    .map(|(y, xx)| x.get(c, y, xx))
                    .sum::<f64>()
                    / count;
                for y in ys.clone() {
                    for xx in xs.clone() {
                        let i = out.idx(c, y, xx);
                        out.data[i] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Applies a corruption to every image; labels and domain metadata are kept.
pub fn corrupt(d: &DomainDataset, c: &CorruptionSpec, seed: u64) -> Result<DomainDataset> {
    c.validate()?;
    let images = d
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64, 0x636f_7272]));
            corrupt_image(img, c, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(DomainDataset { images, ..d.clone() })
}

/// Serializes a dataset in the `OCRDATA1` layout:
///
/// ```text
/// magic "OCRDATA1" | u32 version=1 | u32 C | u32 n | u32 h | u32 w | u32 domain_id
/// n x (u16 label | 3*h*w f32 pixels, channel-major)
/// u32 json_len | DomainSpec as JSON
/// ```
pub fn dataset_to_bytes(d: &DomainDataset) -> Result<Vec<u8>> {
    let (h, w) = d.side();
    let mut out = DATA_MAGIC.to_vec();
    for v in [DATA_VERSION, d.classes as u32, d.len() as u32, h as u32, w as u32, d.domain_id] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (img, &label) in d.images.iter().zip(&d.labels) {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape("dataset images differ in size".into()));
        }
        out.extend_from_slice(&(label as u16).to_le_bytes());
        for &v in &img.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&d.spec)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<DomainDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != DATA_MAGIC {
        return Err(Error::format(0, "bad magic: expected \"OCRDATA1\""));
    }
    let version = r.u32("version")?;
    if version != DATA_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}, expected {DATA_VERSION}")));
    }
    let classes = r.u32("class count")? as usize;
    let n = r.u32("record count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let domain_id = r.u32("domain id")?;
    if classes < 2 || h == 0 || w == 0 {
        return Err(Error::format(12, format!("invalid header: C={classes}, h={h}, w={w}")));
    }
    let record_bytes = CHANNELS
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(20, format!("image size {h}x{w} overflows")))?;
    let mut images = Vec::with_capacity(n.min(1 << 20));
    let mut labels = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let at = r.pos;
        let label = r.u16("label")? as usize;
        if label >= classes {
            return Err(Error::format(at, format!("label {label} out of range for {classes} classes")));
        }
        let raw = r.take(record_bytes, "pixels")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        images.push(Image::new(h, w, data)?);
        labels.push(label);
    }
    let len = r.u32("spec length")? as usize;
    let at = r.pos;
    let spec: DomainSpec = serde_json::from_slice(r.take(len, "domain spec")?)
        .map_err(|e| Error::format(at, format!("invalid domain spec JSON: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after domain spec"));
    }
    Ok(DomainDataset { classes, images, labels, domain_id, spec })
}

pub fn save_dataset(d: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(d)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DomainDataset> {
    dataset_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(palette: [f64; 3]) -> DomainSpec {
        DomainSpec { palette, background: 0.2, noise_sigma: 0.05, seed: 7 }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = gen_domain_sized(5, 4, &spec([1.0, 0.5, 0.3]), 1, 16).unwrap();
        let b = gen_domain_sized(5, 4, &spec([1.0, 0.5, 0.3]), 1, 16).unwrap();
        assert_eq!(a, b);
        for c in 0..5 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 4);
        }
        assert!(a.images.iter().all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn identity_domain_is_clean_white_on_black() {
        let clean = DomainSpec { palette: [1.0; 3], background: 0.0, noise_sigma: 0.0, seed: 1 };
        let d = gen_domain_sized(8, 2, &clean, 0, 16).unwrap();
        for (img, &label) in d.images.iter().zip(&d.labels) {
            assert!(img.data.iter().all(|&v| v == 0.0 || v == 1.0));
            let on = img.data.iter().filter(|&&v| v == 1.0).count();
            assert!(on > 0, "class {label} rendered empty");
        }
    }

    #[test]
    fn masks_do_not_depend_on_palette() {
        let a = gen_domain_sized(7, 3, &DomainSpec { noise_sigma: 0.0, ..spec([1.0, 0.3, 0.3]) }, 0, 16).unwrap();
        let b = gen_domain_sized(7, 3, &DomainSpec { noise_sigma: 0.0, ..spec([0.3, 0.3, 1.0]) }, 1, 16).unwrap();
        let binarize = |img: &Image| -> Vec<bool> {
            let plane = 256;
            (0..plane).map(|p| (0..3).any(|c| img.data[c * plane + p] > 0.25)).collect()
        };
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(binarize(x), binarize(y));
            assert_ne!(x.data, y.data);
        }
    }

    #[test]
    fn distinct_shapes_for_all_classes() {
        let masks: Vec<Vec<bool>> = (0..MAX_CLASSES).map(|c| {
            let mut m = vec![false; 64 * 64];
            for y in 0..64 {
                for x in 0..64 {
                    m[y * 64 + x] = shape_contains(c, (x as f64 - 31.5) / 30.0, (y as f64 - 31.5) / 30.0);
                }
            }
            m
        }).collect();
        for i in 0..MAX_CLASSES {
            assert!(masks[i].iter().any(|&b| b));
            for j in i + 1..MAX_CLASSES {
                assert_ne!(masks[i], masks[j], "{} vs {}", SHAPE_NAMES[i], SHAPE_NAMES[j]);
            }
        }
    }

    #[test]
    fn config_errors() {
        assert!(matches!(gen_domain(1, 3, &spec([1.0; 3]), 0), Err(Error::Config(_))));
        assert!(matches!(gen_domain(17, 3, &spec([1.0; 3]), 0), Err(Error::Config(_))));
        assert!(gen_domain(3, 1, &spec([0.1, 1.0, 1.0]), 0).is_err());
    }

    #[test]
    fn brightness_is_plain_addition() {
        let img = Image::filled(4, 4, 0.5);
        let c = CorruptionSpec { kind: CorruptionKind::Brightness, severity: 2 };
        let out = corrupt_image(&img, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.7).abs() < 1e-7));
        assert!(corrupt_image(&img, &CorruptionSpec { severity: 6, ..c }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn mean_abs_delta(a: &DomainDataset, b: &DomainDataset) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (x, y) in a.images.iter().zip(&b.images) {
            for (p, q) in x.data.iter().zip(&y.data) {
                s += (p - q).abs();
                n += 1;
            }
        }
        s / n as f64
    }

    #[test]
    fn corruption_severity_is_monotone_and_keeps_labels() {
        for side in [16, 32] {
            check_monotone(&gen_domain_sized(4, 3, &spec([0.9, 0.6, 0.4]), 0, side).unwrap());
        }
    }

    fn check_monotone(d: &DomainDataset) {
        let d = d.clone();
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for severity in 1..=5 {
                let c = corrupt(&d, &CorruptionSpec { kind, severity }, 3).unwrap();
                assert_eq!(c.labels, d.labels);
                let delta = mean_abs_delta(&d, &c);
                assert!(delta >= prev, "{kind:?} severity {severity}: {delta} < {prev}");
                prev = delta;
            }
            assert!(prev > 0.0);
        }
    }

    #[test]
    fn noise_severity_increases_distortion() {
        let d = gen_domain_sized(4, 3, &spec([0.9, 0.6, 0.4]), 0, 16).unwrap();
        let noise1 = corrupt(&d, &CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 1 }, 3).unwrap();
        let noise5 = corrupt(&d, &CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 5 }, 3).unwrap();
        assert!(mean_abs_delta(&d, &noise5) > mean_abs_delta(&d, &noise1));
    }

    #[test]
    fn file_roundtrip_is_bit_exact() {
        let d = gen_domain_sized(3, 2, &spec([0.8, 0.4, 0.9]), 5, 8).unwrap();
        let d = corrupt(&d, &CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3 }, 1).unwrap();
        let bytes = dataset_to_bytes(&d).unwrap();
        let back = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        let bits = |x: &DomainDataset| x.images.iter().flat_map(|i| i.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&d));
    }

    #[test]
    fn malformed_files_are_format_errors() {
        let d = gen_domain_sized(3, 2, &spec([0.8, 0.4, 0.9]), 5, 8).unwrap();
        let bytes = dataset_to_bytes(&d).unwrap();
        for cut in [0, 5, 8, 20, 33, 100, bytes.len() - 1] {
            assert!(matches!(dataset_from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        let msg = dataset_from_bytes(&bad).unwrap_err().to_string();
        assert!(msg.contains("OCRDATA1"), "{msg}");
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(dataset_from_bytes(&bad), Err(Error::Format { offset: 8, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(dataset_from_bytes(&long), Err(Error::Format { .. })));
        let mut huge = bytes;
        huge[24..32].copy_from_slice(&[0xff; 8]);
        assert!(matches!(dataset_from_bytes(&huge), Err(Error::Format { .. })));
    }
}
