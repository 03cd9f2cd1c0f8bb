//! Convolutional BEV segmentation decoders: stacked 3x3 conv + group norm
//! + ReLU blocks and a 1x1 classifier, at full grid resolution.

use rand_chacha::ChaCha8Rng;

use super::HeadConfig;
use crate::error::{Error, Result};
use crate::tensor::{PadMode, ParamSet, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SegMasks {
    /// `[n_map, H, W]`
    pub map_logits: Tensor,
    /// `[n_obj + 1, H, W]`
    pub object_logits: Tensor,
}

impl SegMasks {
    /// Per-cell argmax labels of a `[K, H, W]` logit tensor.
    pub fn argmax(logits: &Tensor) -> Vec<usize> {
        let k = logits.shape()[0];
        let p = logits.numel() / k.max(1);
        (0..p)
            .map(|i| (0..k).fold(0, |best, c| if logits.data()[c * p + i] > logits.data()[best * p + i] { c } else { best }))
            .collect()
    }
}

pub fn init_params(ps: &mut ParamSet, prefix: &str, cfg: &HeadConfig, channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let c = channels;
    for i in 0..cfg.seg_blocks {
        ps.insert_xavier(&format!("{prefix}.b{i}.w"), &[c, c * 9], c * 9, c, rng)?;
        ps.insert_zeros(&format!("{prefix}.b{i}.b"), &[c])?;
        ps.insert_full(&format!("{prefix}.b{i}.gn.g"), &[c], 1.0)?;
        ps.insert_zeros(&format!("{prefix}.b{i}.gn.b"), &[c])?;
    }
    ps.insert_xavier(&format!("{prefix}.cls.w"), &[classes, c], c, classes, rng)?;
    ps.insert_zeros(&format!("{prefix}.cls.b"), &[classes])?;
    Ok(())
}

/// `bev` is `[P, C]` with `P = rows * cols`; returns logits `[K, P]`.
pub fn seg_decode(tape: &mut Tape, ps: &ParamSet, prefix: &str, cfg: &HeadConfig, bev: Var, grid: [usize; 2]) -> Result<Var> {
    let (p, c) = match tape.shape(bev) {
        [p, c] if *p == grid[0] * grid[1] => (*p, *c),
        s => return Err(Error::Dimension(format!("BEV features {s:?} do not match grid {grid:?}"))),
    };
    cfg.validate(c)?;
    let mut x = tape.transpose(bev)?;
    for i in 0..cfg.seg_blocks {
        let img = tape.reshape(x, &[c, grid[0], grid[1]])?;
        let cols = tape.im2col(img, 3, PadMode::Zero)?;
        let w = tape.p(ps, &format!("{prefix}.b{i}.w"))?;
        let b = tape.p(ps, &format!("{prefix}.b{i}.b"))?;
        let y = tape.matmul(w, cols)?;
        let y = tape.add_col(y, b)?;
        let y = tape.group_norm(y, cfg.seg_groups, NORM_EPS)?;
        let g = tape.p(ps, &format!("{prefix}.b{i}.gn.g"))?;
        let gb = tape.p(ps, &format!("{prefix}.b{i}.gn.b"))?;
        let y = tape.mul_col(y, g)?;
        let y = tape.add_col(y, gb)?;
        x = tape.relu(y);
    }
    let w = tape.p(ps, &format!("{prefix}.cls.w"))?;
    let b = tape.p(ps, &format!("{prefix}.cls.b"))?;
    let y = tape.matmul(w, x)?;
    let y = tape.add_col(y, b)?;
    debug_assert_eq!(tape.shape(y)[1], p);
    Ok(y)
}
