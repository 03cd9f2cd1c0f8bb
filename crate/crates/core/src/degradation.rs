//! Camera-view corruption: random masking during training and a
//! hash-seeded, reproducible corruption for evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLUR_KERNEL: usize = 11;
pub const SIGMA_RANGE: [f64; 2] = [3.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    None,
    Zero,
    Blur,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub camera_index: usize,
    pub blur_sigma: f64,
}

impl CorruptionSpec {
    pub const NONE: Self = Self { mode: CorruptionMode::None, camera_index: 0, blur_sigma: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if self.mode == CorruptionMode::Blur && !(SIGMA_RANGE[0]..=SIGMA_RANGE[1]).contains(&self.blur_sigma) {
            return Err(Error::Config(format!("blur sigma {} outside {SIGMA_RANGE:?}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// Multi-view input: one `[C, H, W]` image per camera and the dummy flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub images: Vec<Tensor>,
    pub dummy: Vec<bool>,
}

impl ViewSet {
    pub fn real_views(&self) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| !self.dummy[i]).collect()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Normalized, sampled 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur of a `[C, H, W]` image with reflect padding.
pub fn gaussian_blur(image: &Tensor, kernel_size: usize, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("blur expects [C,H,W], got {s:?}"))),
    };
    if kernel_size % 2 == 0 || !(sigma > 0.0) {
        return Err(Error::Config(format!("blur kernel {kernel_size} must be odd and sigma {sigma} positive")));
    }
    let k = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as i64;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[base + y * w + reflect(x as i64 + i as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[base + reflect(y as i64 + i as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

pub fn apply_corruption(views: &ViewSet, spec: &CorruptionSpec) -> Result<ViewSet> {
    spec.validate()?;
    let mut out = views.clone();
    if spec.mode == CorruptionMode::None {
        return Ok(out);
    }
    let img = out
        .images
        .get_mut(spec.camera_index)
        .ok_or_else(|| Error::Config(format!("camera {} does not exist", spec.camera_index)))?;
    if views.dummy[spec.camera_index] {
        return Err(Error::Config("dummy views cannot be corrupted".into()));
    }
    *img = match spec.mode {
        CorruptionMode::Zero => Tensor::zeros(img.shape()),
        CorruptionMode::Blur => gaussian_blur(img, BLUR_KERNEL, spec.blur_sigma)?,
        CorruptionMode::None => unreachable!(),
    };
    Ok(out)
}

fn draw_corruption<R: Rng>(real: &[usize], rng: &mut R) -> CorruptionSpec {
    let camera_index = real[rng.gen_range(0..real.len())];
    if rng.gen_bool(0.5) {
        CorruptionSpec { mode: CorruptionMode::Zero, camera_index, blur_sigma: 0.0 }
    } else {
        CorruptionSpec { mode: CorruptionMode::Blur, camera_index, blur_sigma: rng.gen_range(SIGMA_RANGE[0]..=SIGMA_RANGE[1]) }
    }
}

/// Training-time masking: with probability `p_m` one real view is zeroed or
/// blurred (equal odds).
pub fn sample_train_corruption<R: Rng>(views: &ViewSet, p_m: f64, rng: &mut R) -> Result<CorruptionSpec> {
    if !(0.0..=1.0).contains(&p_m) {
        return Err(Error::Config(format!("masking probability {p_m} outside [0, 1]")));
    }
    let real = views.real_views();
    if real.is_empty() || !rng.gen_bool(p_m) {
        return Ok(CorruptionSpec::NONE);
    }
    Ok(draw_corruption(&real, rng))
}

pub fn mask_views_train<R: Rng>(views: &ViewSet, p_m: f64, rng: &mut R) -> Result<(ViewSet, CorruptionSpec)> {
    let spec = sample_train_corruption(views, p_m, rng)?;
    Ok((apply_corruption(views, &spec)?, spec))
}

/// Evaluation corruption seeded from the sample id; samples with fewer
/// than two real views are left untouched.
pub fn test_corruption(views: &ViewSet, sample_id: &str) -> CorruptionSpec {
    let real = views.real_views();
    if real.len() < 2 {
        return CorruptionSpec::NONE;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(sample_id.as_bytes()));
    draw_corruption(&real, &mut rng)
}

pub fn corrupt_test(views: &ViewSet, sample_id: &str) -> Result<(ViewSet, CorruptionSpec)> {
    let spec = test_corruption(views, sample_id);
    Ok((apply_corruption(views, &spec)?, spec))
}
