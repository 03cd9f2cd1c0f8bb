//! End-to-end model: shared toy backbone, BEV encoder and both heads.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncodeTrace, EncoderConfig, SceneGeometry};
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraRig};
use crate::heads::{self, detect, seg, Box3D, DetOutput, HeadConfig, LossBreakdown, NUM_MAP_CLASSES, NUM_OBJ_CLASSES};
use crate::named_rng;
use crate::sim::backbone::{self, BackboneConfig};
use crate::sim::GtMasks;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self { encoder: EncoderConfig::desk(), heads: HeadConfig::desk(), image_channels: 1 }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.encoder.channels = 8;
        c.encoder.ffn_hidden = 8;
        c.encoder.gat.hidden = 8;
        c.encoder.gat.heads = 2;
        c.encoder.gat.layers = 2;
        c.heads.num_queries = 6;
        c.heads.ffn_hidden = 8;
        c.heads.seg_groups = 2;
        c
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig { in_channels: self.image_channels, channels: self.encoder.channels }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate(self.encoder.channels)
    }
}

pub fn init_params(cfg: &ModelConfig, grid: &BevGridSpec, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng: ChaCha8Rng = named_rng(seed, "init");
    let mut ps = ParamSet::new();
    let c = cfg.encoder.channels;
    backbone::init_params(&mut ps, &cfg.backbone(), &mut rng)?;
    encoder::init_params(&mut ps, &cfg.encoder, grid, &mut rng)?;
    detect::init_params(&mut ps, &cfg.heads, c, &mut rng)?;
    seg::init_params(&mut ps, "seg.map", &cfg.heads, c, NUM_MAP_CLASSES, &mut rng)?;
    seg::init_params(&mut ps, "seg.obj", &cfg.heads, c, NUM_OBJ_CLASSES + 1, &mut rng)?;
    Ok(ps)
}

/// Geometry for camera images of the rigs' size, with the backbone stride.
pub fn scene_geometry(cfg: &ModelConfig, grid: &BevGridSpec, rigs: &[CameraRig]) -> Result<SceneGeometry> {
    let first = rigs.first().ok_or_else(|| Error::Config("scene has no cameras".into()))?;
    if rigs.iter().any(|r| r.width != first.width || r.height != first.height) {
        return Err(Error::Config("all cameras must share one image size".into()));
    }
    let hw = BackboneConfig::feature_hw(first.width, first.height);
    SceneGeometry::new(grid, rigs, hw, cfg.encoder.points)
}

pub struct Forward {
    pub bev: Var,
    pub det: DetOutput,
    /// `[n_map, P]`
    pub map_logits: Var,
    /// `[n_obj + 1, P]`
    pub obj_logits: Var,
    pub trace: Option<EncodeTrace>,
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    ps: &ParamSet,
    cfg: &ModelConfig,
    geom: &SceneGeometry,
    images: &[Tensor],
    history: &[Tensor],
    rng: Option<&mut ChaCha8Rng>,
    trace: bool,
) -> Result<Forward> {
    if images.len() != geom.num_cams() {
        return Err(Error::Dimension(format!("{} images for {} cameras", images.len(), geom.num_cams())));
    }
    let mut maps = Vec::with_capacity(images.len());
    for img in images {
        maps.push(backbone::toy_backbone(tape, ps, img)?);
    }
    let (bev, trace) = encoder::encode(tape, ps, &cfg.encoder, geom, &maps, history, rng, trace)?;
    let grid = &geom.grid;
    let det = detect::detect(tape, ps, &cfg.heads, bev, grid)?;
    let cells = [grid.rows(), grid.cols()];
    let map_logits = seg::seg_decode(tape, ps, "seg.map", &cfg.heads, bev, cells)?;
    let obj_logits = seg::seg_decode(tape, ps, "seg.obj", &cfg.heads, bev, cells)?;
    Ok(Forward { bev, det, map_logits, obj_logits, trace })
}

pub fn loss(tape: &mut Tape, fwd: &Forward, cfg: &ModelConfig, grid: &BevGridSpec, gts: &[Box3D], masks: &GtMasks) -> Result<(Var, LossBreakdown)> {
    let w = &cfg.heads.weights;
    let det = heads::detection_loss(tape, &fwd.det, gts, grid, w)?;
    let seg_map = heads::segmentation_loss(tape, fwd.map_logits, &masks.map)?;
    let seg_obj = heads::segmentation_loss(tape, fwd.obj_logits, &masks.object)?;
    heads::total_loss(tape, det.cls, det.reg, seg_map, seg_obj, w)
}

pub fn decode(tape: &Tape, fwd: &Forward, grid: &BevGridSpec) -> Result<Vec<Box3D>> {
    heads::decode_boxes(tape.value(fwd.det.class_logits), tape.value(fwd.det.boxes), grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::NUM_OBJ_CLASSES;

    fn rigs() -> Vec<CameraRig> {
        vec![
            CameraRig::from_pose([-20.0, 0.0, 6.0], 0.0, -0.3, 64.0, 64, 48).unwrap(),
            CameraRig::from_pose([0.0, -20.0, 7.0], 1.5, -0.4, 64.0, 64, 48).unwrap(),
        ]
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig::tiny();
        let grid = BevGridSpec::square(25.6, 6, 3);
        let ps = init_params(&cfg, &grid, 1).unwrap();
        let geom = scene_geometry(&cfg, &grid, &rigs()).unwrap();
        let images = vec![Tensor::full(&[1, 48, 64], 0.3); 2];
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &ps, &cfg, &geom, &images, &[], None, true).unwrap();
        assert_eq!(tape.shape(fwd.bev), &[36, cfg.encoder.channels]);
        assert_eq!(tape.shape(fwd.det.class_logits), &[cfg.heads.num_queries, NUM_OBJ_CLASSES + 1]);
        assert_eq!(tape.shape(fwd.map_logits), &[NUM_MAP_CLASSES, 36]);
        assert_eq!(tape.shape(fwd.obj_logits), &[NUM_OBJ_CLASSES + 1, 36]);
        assert_eq!(fwd.trace.as_ref().unwrap().layers.len(), cfg.encoder.layers);
        assert_eq!(decode(&tape, &fwd, &grid).unwrap().len(), cfg.heads.num_queries);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::tiny();
        let grid = BevGridSpec::square(25.6, 6, 3);
        let a = init_params(&cfg, &grid, 5).unwrap();
        assert_eq!(a, init_params(&cfg, &grid, 5).unwrap());
        assert_ne!(a, init_params(&cfg, &grid, 6).unwrap());
    }

    #[test]
    fn mixed_image_sizes_rejected() {
        let mut r = rigs();
        r[1] = CameraRig::from_pose([0.0, -20.0, 7.0], 1.5, -0.4, 64.0, 80, 48).unwrap();
        assert!(scene_geometry(&ModelConfig::tiny(), &BevGridSpec::square(25.6, 6, 3), &r).is_err());
        assert!(scene_geometry(&ModelConfig::tiny(), &BevGridSpec::square(25.6, 6, 3), &[]).is_err());
    }
}
