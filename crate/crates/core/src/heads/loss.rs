//! Matching-based detection loss, segmentation cross-entropy and the
//! weighted multi-task total.

use serde::{Deserialize, Serialize};

use super::detect::{box_target, DetOutput};
use super::matching::hungarian;
use super::{Box3D, NUM_OBJ_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub seg: f64,
    pub focal_gamma: f64,
    /// Weight of foreground targets; background uses `1 - alpha`.
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, reg: 0.25, seg: 2.0, focal_gamma: 2.0, focal_alpha: 0.25 }
    }
}

/// Softmax focal loss summed over rows and divided by `normalizer`.
/// `targets[i]` is a class index into the columns of `logits`.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[usize], background: usize, gamma: f64, alpha: f64, normalizer: f64) -> Result<Var> {
    if !(gamma >= 0.0) || !(0.0..=1.0).contains(&alpha) || !(normalizer > 0.0) {
        return Err(Error::Config(format!("focal loss: gamma {gamma}, alpha {alpha}, normalizer {normalizer}")));
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let logp = tape.pick(lsm, targets)?;
    let weights: Vec<f64> = targets.iter().map(|&t| if t == background { 1.0 - alpha } else { alpha }).collect();
    let w = tape.constant(Tensor::new(vec![targets.len()], weights)?);
    let mut term = tape.mul(logp, w)?;
    if gamma > 0.0 {
        let p = tape.exp(logp);
        let neg = tape.scale(p, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let modulator = if gamma.fract() == 0.0 && gamma <= 8.0 {
            let mut m = one_minus;
            for _ in 1..gamma as usize {
                m = tape.mul(m, one_minus)?;
            }
            m
        } else {
            let l = tape.ln(one_minus);
            let l = tape.scale(l, gamma);
            tape.exp(l)
        };
        term = tape.mul(term, modulator)?;
    }
    let s = tape.sum_all(term);
    Ok(tape.scale(s, -1.0 / normalizer))
}

#[derive(Clone, Debug)]
pub struct DetLoss {
    pub cls: Var,
    pub reg: Var,
    /// `(gt index, query index)` pairs.
    pub assignment: Vec<(usize, usize)>,
}

/// Cost matrix `[n_gt][n_q]`: `λ_cls · (−p(class)) + λ_reg · L1`.
pub fn match_cost(class_logits: &Tensor, boxes: &Tensor, gts: &[Box3D], grid: &BevGridSpec, weights: &LossWeights, velocity: bool) -> Result<Vec<Vec<f64>>> {
    let k = NUM_OBJ_CLASSES + 1;
    let d = boxes.shape()[1];
    let probs: Vec<Vec<f64>> = class_logits
        .data()
        .chunks(k)
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect();
    Ok(gts
        .iter()
        .map(|g| {
            let t = box_target(g, grid, velocity);
            probs
                .iter()
                .zip(boxes.data().chunks(d))
                .map(|(p, b)| {
                    let l1: f64 = b.iter().zip(&t).map(|(x, y)| (x - y).abs()).sum();
                    -weights.cls * p[g.class_id] + weights.reg * l1
                })
                .collect()
        })
        .collect())
}

/// Unweighted `(cls, reg)` terms, both normalized by the number of matched
/// ground-truth boxes (at least 1).
pub fn detection_loss(tape: &mut Tape, out: &DetOutput, gts: &[Box3D], grid: &BevGridSpec, weights: &LossWeights) -> Result<DetLoss> {
    let nq = tape.shape(out.class_logits)[0];
    let d = tape.shape(out.boxes)[1];
    let velocity = d >= 10;
    if gts.len() > nq {
        return Err(Error::Config(format!("{} ground-truth boxes exceed {nq} queries", gts.len())));
    }
    let cost = match_cost(tape.value(out.class_logits), tape.value(out.boxes), gts, grid, weights, velocity)?;
    let assignment = hungarian(&cost)?;
    let norm = assignment.len().max(1) as f64;

    let mut targets = vec![NUM_OBJ_CLASSES; nq];
    for &(g, q) in &assignment {
        targets[q] = gts[g].class_id;
    }
    let cls = focal_loss(tape, out.class_logits, &targets, NUM_OBJ_CLASSES, weights.focal_gamma, weights.focal_alpha, norm)?;

    let reg = if assignment.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = assignment.iter().map(|a| a.1).collect();
        let mut tgt = Vec::with_capacity(rows.len() * d);
        for &(g, _) in &assignment {
            tgt.extend(box_target(&gts[g], grid, velocity));
        }
        let pred = tape.gather_rows(out.boxes, &rows)?;
        let tgt = tape.constant(Tensor::new(vec![rows.len(), d], tgt)?);
        let diff = tape.sub(pred, tgt)?;
        let a = tape.abs(diff);
        let s = tape.sum_all(a);
        tape.scale(s, 1.0 / norm)
    };
    Ok(DetLoss { cls, reg, assignment })
}

/// Mean per-cell softmax cross-entropy of `logits[K, P]` against labels.
pub fn segmentation_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (k, p) = match tape.shape(logits) {
        [k, p] => (*k, *p),
        s => return Err(Error::Dimension(format!("segmentation logits must be [K, P], got {s:?}"))),
    };
    if labels.len() != p || labels.iter().any(|&l| l >= k) {
        return Err(Error::Dimension(format!("{} labels for {p} cells and {k} classes", labels.len())));
    }
    let t = tape.transpose(logits)?;
    let lsm = tape.log_softmax(t, 1)?;
    let picked = tape.pick(lsm, labels)?;
    let m = tape.mean_all(picked);
    Ok(tape.scale(m, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub seg_map: f64,
    pub seg_obj: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn det(&self, w: &LossWeights) -> f64 {
        w.cls * self.cls + w.reg * self.reg
    }

    pub fn seg(&self) -> f64 {
        self.seg_map + self.seg_obj
    }

    /// `det + λ · seg` recomputed from the parts.
    pub fn recomposed(&self, w: &LossWeights) -> f64 {
        self.det(w) + w.seg * self.seg()
    }
}

/// `L = (λ_cls·cls + λ_reg·reg) + λ·(seg_map + seg_obj)`.
pub fn total_loss(tape: &mut Tape, cls: Var, reg: Var, seg_map: Var, seg_obj: Var, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let a = tape.scale(cls, w.cls);
    let b = tape.scale(reg, w.reg);
    let det = tape.add(a, b)?;
    let seg = tape.add(seg_map, seg_obj)?;
    let seg = tape.scale(seg, w.seg);
    let total = tape.add(det, seg)?;
    let v = |t: &Tape, x: Var| t.value(x).data()[0];
    let bd = LossBreakdown {
        cls: v(tape, cls),
        reg: v(tape, reg),
        seg_map: v(tape, seg_map),
        seg_obj: v(tape, seg_obj),
        total: v(tape, total),
    };
    if !bd.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {bd:?}")));
    }
    Ok((total, bd))
}
