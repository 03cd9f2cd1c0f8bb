//! nuScenes-style detection metrics: center-distance AP over several
//! thresholds, true-positive error metrics and the NDS composite.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::wrap_angle;
use crate::heads::{Box3D, ObjectClass};

pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
const RECALL_SAMPLES: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub distance_thresholds: Vec<f64>,
    pub classes: Vec<ObjectClass>,
    pub tp_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { distance_thresholds: vec![0.5, 1.0, 2.0, 4.0], classes: ObjectClass::ALL.to_vec(), tp_threshold: 2.0 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distance_thresholds.is_empty() || self.distance_thresholds.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("distance thresholds must be positive".into()));
        }
        if self.distance_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("distance thresholds must be ascending".into()));
        }
        if !(self.tp_threshold > 0.0) {
            return Err(Error::Config("TP threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Predictions and ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub preds: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

fn center_dist(a: &Box3D, b: &Box3D) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// One prediction after greedy matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub frame: usize,
    pub pred: usize,
    pub score: f64,
    /// Matched ground truth index within the frame.
    pub gt: Option<usize>,
}

/// Greedy matching of one class across frames: predictions in descending
/// score order (stable) take the nearest unmatched ground truth of the same
/// class and frame within `threshold` meters.
pub fn match_class(frames: &[Frame], class_id: usize, threshold: f64) -> Vec<MatchResult> {
    let mut preds: Vec<(usize, usize, f64)> = Vec::new();
    for (f, fr) in frames.iter().enumerate() {
        for (i, p) in fr.preds.iter().enumerate() {
            if p.class_id == class_id {
                preds.push((f, i, p.score));
            }
        }
    }
    preds.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    preds
        .into_iter()
        .map(|(f, i, score)| {
            let p = &frames[f].preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in frames[f].gts.iter().enumerate() {
                if g.class_id != class_id || taken[f][j] {
                    continue;
                }
                let d = center_dist(p, g);
                if d <= threshold && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            if let Some((j, _)) = best {
                taken[f][j] = true;
            }
            MatchResult { frame: f, pred: i, score, gt: best.map(|b| b.0) }
        })
        .collect()
}

/// Piecewise-linear interpolation with clamping on the left and `right`
/// beyond the last sample; `xs` must be non-decreasing.
fn interp(x: f64, xs: &[f64], ys: &[f64], right: f64) -> f64 {
    if xs.is_empty() {
        return right;
    }
    if x < xs[0] {
        return ys[0];
    }
    if x > xs[xs.len() - 1] {
        return right;
    }
    let k = xs.partition_point(|&v| v <= x);
    if k == 0 {
        return ys[0];
    }
    if k == xs.len() {
        return ys[k - 1];
    }
    let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
    if x1 == x0 {
        return y1;
    }
    y0 + (x - x0) * (y1 - y0) / (x1 - x0)
}

/// Precision sampled at 101 evenly spaced recall levels.
pub fn precision_curve(tp_labels: &[bool], num_gt: usize) -> Vec<f64> {
    if num_gt == 0 || tp_labels.is_empty() {
        return vec![0.0; RECALL_SAMPLES];
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rec = Vec::with_capacity(tp_labels.len());
    let mut prec = Vec::with_capacity(tp_labels.len());
    for &t in tp_labels {
        if t {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        prec.push(tp / (tp + fp));
        rec.push(tp / num_gt as f64);
    }
    (0..RECALL_SAMPLES)
        .map(|i| interp(i as f64 / (RECALL_SAMPLES - 1) as f64, &rec, &prec, 0.0))
        .collect()
}

/// AP from labels already sorted by descending score: the sampled
/// precision above the minimum recall, shifted by the minimum precision
/// and renormalized.
pub fn average_precision(tp_labels: &[bool], num_gt: usize) -> f64 {
    let curve = precision_curve(tp_labels, num_gt);
    let start = (100.0 * MIN_RECALL).round() as usize + 1;
    let tail = &curve[start..];
    let s: f64 = tail.iter().map(|&p| (p - MIN_PRECISION).max(0.0) / (1.0 - MIN_PRECISION)).sum();
    (s / tail.len() as f64).clamp(0.0, 1.0)
}

/// Volume IoU of two boxes after aligning their centers and headings.
pub fn aligned_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|i| a.size[i].min(b.size[i])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    inter / (va + vb - inter)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub trans: f64,
    pub scale: f64,
    pub orient: f64,
    pub vel: f64,
    pub attr: f64,
}

impl TpErrors {
    pub fn as_array(&self) -> [f64; 5] {
        [self.trans, self.scale, self.orient, self.vel, self.attr]
    }
}

/// Mean errors over matched `(prediction, ground truth)` pairs; 1 for each
/// metric when there are no pairs.
pub fn tp_errors(pairs: &[(&Box3D, &Box3D)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors { trans: 1.0, scale: 1.0, orient: 1.0, vel: 1.0, attr: 1.0 };
    }
    let n = pairs.len() as f64;
    let mut e = TpErrors::default();
    for (p, g) in pairs {
        e.trans += center_dist(p, g);
        e.scale += 1.0 - aligned_iou(p, g);
        e.orient += wrap_angle(p.yaw - g.yaw).abs();
        e.vel += (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1]);
    }
    TpErrors { trans: e.trans / n, scale: e.scale / n, orient: e.orient / n, vel: e.vel / n, attr: 0.0 }
}

pub fn nds(map: f64, mtp: &[f64; 5]) -> f64 {
    (5.0 * map + mtp.iter().map(|&e| 1.0 - e.min(1.0)).sum::<f64>()) / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// One AP per distance threshold.
    pub ap: Vec<f64>,
    pub mean_ap: f64,
    pub errors: TpErrors,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
}

impl MetricReport {
    pub fn mtp(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }

    pub fn recomputed_nds(&self) -> f64 {
        nds(self.map, &self.mtp())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for d in &self.thresholds {
            let _ = write!(s, ",AP@{d}");
        }
        s.push_str(",mAP,mATE,mASE,mAOE,mAVE,mAAE,NDS\n");
        for (name, c) in &self.per_class {
            s.push_str(name);
            for a in &c.ap {
                let _ = write!(s, ",{a}");
            }
            let e = c.errors;
            let _ = writeln!(s, ",{},{},{},{},{},{},", c.mean_ap, e.trans, e.scale, e.orient, e.vel, e.attr);
        }
        s.push_str("all");
        for i in 0..self.thresholds.len() {
            let n = self.per_class.len().max(1) as f64;
            let _ = write!(s, ",{}", self.per_class.values().map(|c| c.ap[i]).sum::<f64>() / n);
        }
        let _ = writeln!(s, ",{},{},{},{},{},{},{}", self.map, self.mate, self.mase, self.maoe, self.mave, self.maae, self.nds);
        s
    }
}

/// Classes without any ground truth are left out of every mean.
pub fn evaluate(frames: &[Frame], cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let mut per_class = BTreeMap::new();
    for &class in &cfg.classes {
        let cid = class.id();
        let num_gt: usize = frames.iter().map(|f| f.gts.iter().filter(|g| g.class_id == cid).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let ap: Vec<f64> = cfg
            .distance_thresholds
            .iter()
            .map(|&d| {
                let labels: Vec<bool> = match_class(frames, cid, d).iter().map(|m| m.gt.is_some()).collect();
                average_precision(&labels, num_gt)
            })
            .collect();
        let matches = match_class(frames, cid, cfg.tp_threshold);
        let pairs: Vec<(&Box3D, &Box3D)> = matches
            .iter()
            .filter_map(|m| m.gt.map(|g| (&frames[m.frame].preds[m.pred], &frames[m.frame].gts[g])))
            .collect();
        let mean_ap = ap.iter().sum::<f64>() / ap.len() as f64;
        per_class.insert(class.name().to_string(), ClassMetrics { ap, mean_ap, errors: tp_errors(&pairs), num_gt });
    }
    let n = per_class.len();
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| if n == 0 { 0.0 } else { per_class.values().map(f).sum::<f64>() / n as f64 };
    let map = mean(&|c| c.mean_ap);
    let (mate, mase, maoe, mave) = if n == 0 {
        (1.0, 1.0, 1.0, 1.0)
    } else {
        (mean(&|c| c.errors.trans), mean(&|c| c.errors.scale), mean(&|c| c.errors.orient), mean(&|c| c.errors.vel))
    };
    let maae = 0.0;
    let nds = nds(map, &[mate, mase, maoe, mave, maae]);
    Ok(MetricReport { thresholds: cfg.distance_thresholds.clone(), per_class, map, mate, mase, maoe, mave, maae, nds })
}
