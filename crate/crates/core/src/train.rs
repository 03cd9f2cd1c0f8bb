//! Toy training loop: full forward and backward passes on fixed scenes with
//! optional view masking.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::degradation::{mask_views_train, ViewSet};
use crate::encoder::SceneGeometry;
use crate::error::{Error, Result};
use crate::heads::{Box3D, LossBreakdown};
use crate::model::{self, ModelConfig};
use crate::named_rng;
use crate::sim::{rasterize_gt, render_views, GtMasks, Scene};
use crate::tensor::{ParamSet, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// View-masking probability.
    pub p_m: f64,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine: bool,
    /// Decoupled decay, AdamW only.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 2e-4, optimizer: Optimizer::AdamW, p_m: 0.25, cosine: false, weight_decay: 0.01, seed: 0 }
    }
}

/// One scene prepared for training or evaluation.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub geom: SceneGeometry,
    pub views: ViewSet,
    pub gts: Vec<Box3D>,
    pub masks: GtMasks,
}

impl TrainSample {
    pub fn from_scene(id: &str, scene: &Scene, cfg: &ModelConfig) -> Result<Self> {
        let grid = &scene.config.grid;
        Ok(Self {
            id: id.to_string(),
            geom: model::scene_geometry(cfg, grid, &scene.rigs)?,
            views: ViewSet { images: render_views(scene), dummy: scene.rigs.iter().map(|r| r.is_dummy).collect() },
            gts: scene.agents.clone(),
            masks: rasterize_gt(scene, grid),
        })
    }
}

/// Loss of one sample with the given (possibly corrupted) images.
pub fn sample_loss(ps: &ParamSet, cfg: &ModelConfig, s: &TrainSample, images: &[Tensor]) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let fwd = model::forward(&mut tape, ps, cfg, &s.geom, images, &[], None, false)?;
    Ok(model::loss(&mut tape, &fwd, cfg, &s.geom.grid, &s.gts, &s.masks)?.1)
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains in place and returns one loss record per step.
pub fn train(ps: &mut ParamSet, cfg: &ModelConfig, samples: &[TrainSample], tc: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if !(tc.lr > 0.0) {
        return Err(Error::Config(format!("learning rate {} must be positive", tc.lr)));
    }
    if !(0.0..=1.0).contains(&tc.p_m) || !(tc.weight_decay >= 0.0) {
        return Err(Error::Config(format!("p_m {} or weight decay {} out of range", tc.p_m, tc.weight_decay)));
    }
    let mut mask_rng = named_rng(tc.seed, "masking");
    let mut drop_rng = named_rng(tc.seed, "dropout");
    let mut adam = Adam { m: BTreeMap::new(), v: BTreeMap::new() };
    let mut curve = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let s = &samples[step % samples.len()];
        let (views, _) = mask_views_train(&s.views, tc.p_m, &mut mask_rng)?;
        let mut tape = Tape::new();
        let fwd = model::forward(&mut tape, ps, cfg, &s.geom, &views.images, &[], Some(&mut drop_rng), false)?;
        let (loss, bd) = model::loss(&mut tape, &fwd, cfg, &s.geom.grid, &s.gts, &s.masks)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        let grads = tape.backward(loss)?;
        ps.zero_grads();
        tape.accumulate_param_grads(&grads, ps)?;
        let lr = if tc.cosine { 0.5 * tc.lr * (1.0 + (std::f64::consts::PI * step as f64 / tc.steps as f64).cos()) } else { tc.lr };
        let t = (step + 1) as i32;
        for p in ps.iter_mut() {
            if !p.learnable {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("step {step}: gradient of `{}`", p.name)));
            }
            match tc.optimizer {
                Optimizer::Sgd => {
                    for (x, gi) in p.tensor.data_mut().iter_mut().zip(&g) {
                        *x -= lr * gi;
                    }
                }
                Optimizer::AdamW => {
                    let n = g.len();
                    let m = adam.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = adam.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
                    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
                    for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        *x -= lr * ((m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS) + tc.weight_decay * *x);
                    }
                }
            }
        }
        curve.push(bd);
    }
    ps.zero_grads();
    Ok(curve)
}

pub fn loss_curve_csv(curve: &[LossBreakdown]) -> String {
    let mut s = String::from("step,total,cls,reg,seg_map,seg_obj\n");
    for (i, b) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{},{}", b.total, b.cls, b.reg, b.seg_map, b.seg_obj);
    }
    s
}

/// The fixed toy setting: 2 aimed cameras at 128x96, 10 agents on a
/// 20x20 grid over +-25.6 m.
pub fn toy_scene_config(seed: u64) -> crate::sim::SceneConfig {
    use crate::geometry::BevGridSpec;
    use crate::sim::{Layout, SceneConfig, Traffic};
    let mut cfg = SceneConfig::new(Layout::FourWay, 2, Traffic::Med, BevGridSpec::square(25.6, 20, 4), seed);
    cfg.image_size = [128, 96];
    cfg.aim_cameras = true;
    cfg.num_agents = Some(10);
    cfg
}

pub fn toy_sample(seed: u64, cfg: &ModelConfig) -> Result<TrainSample> {
    let sc = toy_scene_config(seed);
    let scene = crate::sim::generate_scene(&sc, &mut named_rng(seed, "scene"))?;
    TrainSample::from_scene(&format!("toy-{seed}"), &scene, cfg)
}

/// Detection metrics over `samples`, optionally with the deterministic
/// single-view test corruption applied to each.
pub fn evaluate_samples(ps: &ParamSet, cfg: &ModelConfig, samples: &[TrainSample], corrupt: bool) -> Result<crate::metrics::MetricReport> {
    let mut frames = Vec::with_capacity(samples.len());
    for s in samples {
        let views = if corrupt { crate::degradation::corrupt_test(&s.views, &s.id)?.0 } else { s.views.clone() };
        let mut tape = Tape::new();
        let fwd = model::forward(&mut tape, ps, cfg, &s.geom, &views.images, &[], None, false)?;
        let preds = model::decode(&tape, &fwd, &s.geom.grid)?;
        frames.push(crate::metrics::Frame { preds, gts: s.gts.clone() });
    }
    crate::metrics::evaluate(&frames, &crate::metrics::MetricConfig::default())
}

/// Tiny model on a 2-camera, 10x10-grid scene with every parameter jittered
/// by U(-0.1, 0.1), so zero-initialized layers contribute real gradients.
pub fn gradcheck_setup(seed: u64) -> Result<(ModelConfig, TrainSample, ParamSet)> {
    use rand::Rng;
    let cfg = ModelConfig::tiny();
    let mut sc = toy_scene_config(seed);
    sc.grid = crate::geometry::BevGridSpec::square(25.6, 10, 4);
    sc.image_size = [64, 48];
    sc.num_agents = Some(4);
    let scene = crate::sim::generate_scene(&sc, &mut named_rng(seed, "scene"))?;
    let sample = TrainSample::from_scene(&format!("gradcheck-{seed}"), &scene, &cfg)?;
    let mut ps = model::init_params(&cfg, &sc.grid, seed)?;
    let mut rng = named_rng(seed, "jitter");
    for p in ps.iter_mut() {
        for x in p.tensor.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    Ok((cfg, sample, ps))
}

/// End-to-end gradient check of the total loss.
pub fn model_gradcheck(seed: u64, opts: &crate::tensor::GradCheckOptions) -> Result<crate::tensor::GradCheckReport> {
    let (cfg, s, ps) = gradcheck_setup(seed)?;
    crate::tensor::grad_check(
        |tape, ps| {
            let fwd = model::forward(tape, ps, &cfg, &s.geom, &s.views.images, &[], None, false)?;
            Ok(model::loss(tape, &fwd, &cfg, &s.geom.grid, &s.gts, &s.masks)?.0)
        },
        &ps,
        opts,
    )
}
