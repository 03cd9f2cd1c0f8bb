//! Tiny image feature extractor: non-overlapping 8x8 patch embedding
//! followed by one 3x3 convolution with ReLU.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PadMode, ParamSet, Tape, Tensor, Var};

pub const PATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: usize,
}

impl BackboneConfig {
    pub fn feature_hw(image_w: usize, image_h: usize) -> [usize; 2] {
        [image_h / PATCH, image_w / PATCH]
    }
}

pub fn init_params(ps: &mut ParamSet, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let k = cfg.in_channels * PATCH * PATCH;
    let c = cfg.channels;
    ps.insert_xavier("bb.patch.w", &[k, c], k, c, rng)?;
    ps.insert_zeros("bb.patch.b", &[c])?;
    ps.insert_xavier("bb.conv.w", &[c, c * 9], c * 9, c, rng)?;
    ps.insert_zeros("bb.conv.b", &[c])?;
    Ok(())
}

/// Rearranges a `[Cin, H, W]` image into `[(H/8)*(W/8), Cin*64]` patch rows;
/// trailing pixels that do not fill a patch are dropped.
pub fn patchify(image: &Tensor) -> Result<Tensor> {
    let (ci, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("image must be [C,H,W], got {s:?}"))),
    };
    let (ph, pw) = (h / PATCH, w / PATCH);
    if ph == 0 || pw == 0 {
        return Err(Error::Dimension(format!("image {h}x{w} smaller than one {PATCH}x{PATCH} patch")));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(ph * pw * ci * PATCH * PATCH);
    for py in 0..ph {
        for px in 0..pw {
            for c in 0..ci {
                for dy in 0..PATCH {
                    let row = (c * h + py * PATCH + dy) * w + px * PATCH;
                    out.extend_from_slice(&d[row..row + PATCH]);
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, ci * PATCH * PATCH], out)
}

/// Feature map `[C, H/8, W/8]`.
pub fn toy_backbone(tape: &mut Tape, ps: &ParamSet, image: &Tensor) -> Result<Var> {
    let [h, w] = match image.shape() {
        [_, h, w] => BackboneConfig::feature_hw(*w, *h),
        s => return Err(Error::Dimension(format!("image must be [C,H,W], got {s:?}"))),
    };
    let patches = tape.constant(patchify(image)?);
    let pw = tape.p(ps, "bb.patch.w")?;
    let pb = tape.p(ps, "bb.patch.b")?;
    let c = tape.shape(pw)[1];
    let emb = tape.matmul(patches, pw)?;
    let emb = tape.add_row(emb, pb)?;
    let emb = tape.transpose(emb)?;
    let emb = tape.reshape(emb, &[c, h, w])?;
    let cols = tape.im2col(emb, 3, PadMode::Replicate)?;
    let cw = tape.p(ps, "bb.conv.w")?;
    let cb = tape.p(ps, "bb.conv.b")?;
    let y = tape.matmul(cw, cols)?;
    let y = tape.add_col(y, cb)?;
    let y = tape.relu(y);
    tape.reshape(y, &[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(c: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_params(&mut ps, &BackboneConfig { in_channels: 1, channels: c }, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        ps
    }

    #[test]
    fn zero_params_zero_map() {
        let ps = params(3).zeroed();
        let mut t = Tape::new();
        let img = Tensor::full(&[1, 16, 24], 0.7);
        let f = toy_backbone(&mut t, &ps, &img).unwrap();
        assert_eq!(t.shape(f), &[3, 2, 3]);
        assert!(t.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_constant_map() {
        let ps = params(4);
        let mut t = Tape::new();
        let f = toy_backbone(&mut t, &ps, &Tensor::full(&[1, 24, 32], 0.3)).unwrap();
        for ch in t.value(f).data().chunks(12) {
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn single_patch_matches_linear_map() {
        let mut ps = params(2);
        // conv: identity on the center tap, so output = relu(patch embedding)
        let conv = ps.tensor_mut("bb.conv.w").unwrap();
        conv.data_mut().fill(0.0);
        conv.data_mut()[4] = 1.0;
        conv.data_mut()[18 + 9 + 4] = 1.0;
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|i| (i as f64 * 0.21).sin()).collect()).unwrap();
        let w = ps.tensor("bb.patch.w").unwrap().clone();
        let mut t = Tape::new();
        let f = toy_backbone(&mut t, &ps, &img).unwrap();
        for c in 0..2 {
            let lin: f64 = (0..64).map(|i| img.data()[i] * w.at2(i, c)).sum();
            assert!((t.value(f).data()[c] - lin.max(0.0)).abs() < 1e-12);
        }
    }
}
