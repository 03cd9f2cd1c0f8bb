//! Synthetic roadside scenes: camera rigs drawn from typical infrastructure
//! mounting ranges, agents on a road layout, flat-shaded camera images and
//! rasterized BEV ground truth.

pub mod backbone;
pub mod layout;
pub mod render;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{toy_backbone, BackboneConfig};
pub use layout::{Layout, MapClass};
pub use render::{render_view, render_views};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraRig};
use crate::heads::{Box3D, ObjectClass, NUM_MAP_CLASSES, NUM_OBJ_CLASSES};
use crate::tensor::Tensor;

pub const MAX_CAMERAS: usize = 4;
pub const HEIGHT_RANGE: [f64; 2] = [3.0, 10.0];
/// Degrees; negative looks down.
pub const PITCH_RANGE_DEG: [f64; 2] = [-35.0, -5.0];
/// Time between the history frame and the current frame, seconds.
pub const FRAME_DT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Traffic {
    Low,
    Med,
    High,
}

impl Traffic {
    /// Inclusive range of agent counts requested from the sampler.
    pub fn count_range(self) -> [usize; 2] {
        match self {
            Self::Low => [2, 8],
            Self::Med => [10, 20],
            Self::High => [32, 48],
        }
    }
}

fn default_image_size() -> [usize; 2] {
    [800, 600]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub layout: Layout,
    pub num_cameras: usize,
    pub traffic_level: Traffic,
    pub grid: BevGridSpec,
    pub seed: u64,
    /// `[width, height]` in pixels; focal length equals the width.
    #[serde(default = "default_image_size")]
    pub image_size: [usize; 2],
    /// Point cameras roughly at the scene center instead of a uniform yaw.
    #[serde(default)]
    pub aim_cameras: bool,
    /// Exact agent count, overriding the traffic level.
    #[serde(default)]
    pub num_agents: Option<usize>,
}

impl SceneConfig {
    pub fn new(layout: Layout, num_cameras: usize, traffic_level: Traffic, grid: BevGridSpec, seed: u64) -> Self {
        Self { layout, num_cameras, traffic_level, grid, seed, image_size: default_image_size(), aim_cameras: false, num_agents: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cameras == 0 || self.num_cameras > MAX_CAMERAS {
            return Err(Error::Config(format!("num_cameras {} outside 1..={MAX_CAMERAS}", self.num_cameras)));
        }
        if self.image_size[0] < 8 || self.image_size[1] < 8 {
            return Err(Error::Config(format!("image size {:?} too small", self.image_size)));
        }
        self.grid.validate()?;
        if self.grid.z_max <= HEIGHT_RANGE[1] {
            return Err(Error::Config(format!("z_max {} must exceed the highest camera ({} m)", self.grid.z_max, HEIGHT_RANGE[1])));
        }
        Ok(())
    }
}

pub fn sample_rigs(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CameraRig>> {
    config.validate()?;
    let corners = config.layout.camera_corners();
    let [w, h] = config.image_size;
    (0..config.num_cameras)
        .map(|i| {
            let [cx, cy] = corners[i];
            let x = cx + rng.gen_range(-1.0..=1.0);
            let y = cy + rng.gen_range(-1.0..=1.0);
            let z = rng.gen_range(HEIGHT_RANGE[0]..=HEIGHT_RANGE[1]);
            let pitch = rng.gen_range(PITCH_RANGE_DEG[0]..=PITCH_RANGE_DEG[1]).to_radians();
            let yaw = if config.aim_cameras {
                (-y).atan2(-x) + rng.gen_range(-25f64..=25.0).to_radians()
            } else {
                rng.gen_range(0.0..2.0 * PI)
            };
            CameraRig::from_pose([x, y, z], yaw, pitch, w as f64, w, h)
        })
        .collect()
}

/// Separating-axis test on two rotated footprints.
pub fn footprints_overlap(a: &Box3D, b: &Box3D) -> bool {
    let ca = a.corners_bev();
    let cb = b.corners_bev();
    for poly in [&ca, &cb] {
        for i in 0..4 {
            let (p, q) = (poly[i], poly[(i + 1) % 4]);
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |c: &[[f64; 2]; 4]| {
                c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&ca);
            let (b0, b1) = proj(&cb);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

fn footprint_inside(b: &Box3D, grid: &BevGridSpec) -> bool {
    b.corners_bev().iter().all(|&[x, y]| grid.contains(x, y))
}

fn pick_class(rng: &mut ChaCha8Rng) -> ObjectClass {
    let r: f64 = rng.gen();
    match r {
        r if r < 0.5 => ObjectClass::Car,
        r if r < 0.65 => ObjectClass::Truck,
        r if r < 0.85 => ObjectClass::Pedestrian,
        _ => ObjectClass::Cyclist,
    }
}

fn propose(class: ObjectClass, layout: Layout, grid: &BevGridSpec, rng: &mut ChaCha8Rng) -> Result<Box3D> {
    let arms = layout.arms();
    let arm = arms[rng.gen_range(0..arms.len())];
    let half = grid.half_extent()[0].max(grid.half_extent()[1]);
    let lo = if arm.through { -half } else { 0.0 };
    let along = rng.gen_range(lo..=half);
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (lat, yaw, speed) = if class == ObjectClass::Pedestrian {
        let lat = side * rng.gen_range(layout::ROAD_HALF_WIDTH + 0.3..=layout::ROAD_HALF_WIDTH + layout::SIDEWALK_WIDTH - 0.3);
        (lat, rng.gen_range(-PI..PI), rng.gen_range(0.0..=1.5))
    } else {
        let lat = side * rng.gen_range(1.5..=layout::ROAD_HALF_WIDTH - 1.5);
        // right-hand traffic: the negative-lateral side drives along the arm
        let heading = arm.heading() + if side < 0.0 { 0.0 } else { PI } + rng.gen_range(-0.05..=0.05);
        let vmax = if class == ObjectClass::Cyclist { 5.0 } else { 10.0 };
        (lat, heading, rng.gen_range(0.0..=vmax))
    };
    let x = along * arm.dir[0] - lat * arm.dir[1];
    let y = along * arm.dir[1] + lat * arm.dir[0];
    let [l, w, h] = class.size_prior();
    let mut b = Box3D::new(class, [x, y, h / 2.0], [l, w, h], yaw)?;
    b.velocity = [speed * yaw.cos(), speed * yaw.sin()];
    Ok(b)
}

/// Non-overlapping agents fully inside the perception range.
pub fn sample_agents(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let [lo, hi] = config.traffic_level.count_range();
    let target = config.num_agents.unwrap_or_else(|| rng.gen_range(lo..=hi));
    let mut agents: Vec<Box3D> = Vec::with_capacity(target);
    let mut attempts = 0;
    while agents.len() < target && attempts < 200 * target.max(1) {
        attempts += 1;
        let class = pick_class(rng);
        let b = propose(class, config.layout, &config.grid, rng)?;
        if footprint_inside(&b, &config.grid) && !agents.iter().any(|a| footprints_overlap(a, &b)) {
            agents.push(b);
        }
    }
    Ok(agents)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub rigs: Vec<CameraRig>,
    pub agents: Vec<Box3D>,
}

impl Scene {
    /// Agents one frame earlier under constant velocity.
    pub fn previous_agents(&self) -> Vec<Box3D> {
        self.agents
            .iter()
            .map(|a| {
                let mut p = a.clone();
                p.center[0] -= a.velocity[0] * FRAME_DT;
                p.center[1] -= a.velocity[1] * FRAME_DT;
                p
            })
            .collect()
    }

    pub fn previous(&self) -> Scene {
        Scene { config: self.config.clone(), rigs: self.rigs.clone(), agents: self.previous_agents() }
    }
}

pub fn generate_scene(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let rigs = sample_rigs(config, rng)?;
    let agents = sample_agents(config, rng)?;
    Ok(Scene { config: config.clone(), rigs, agents })
}

/// Per-cell class labels of the static map and the objects.
#[derive(Clone, Debug, PartialEq)]
pub struct GtMasks {
    pub rows: usize,
    pub cols: usize,
    /// Values in `0..n_map`.
    pub map: Vec<usize>,
    /// Values in `0..=n_obj`; `n_obj` is background.
    pub object: Vec<usize>,
}

impl GtMasks {
    fn one_hot(labels: &[usize], k: usize, rows: usize, cols: usize) -> Tensor {
        let p = rows * cols;
        let mut t = Tensor::zeros(&[k, rows, cols]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[l * p + i] = 1.0;
        }
        t
    }

    pub fn map_one_hot(&self) -> Tensor {
        Self::one_hot(&self.map, NUM_MAP_CLASSES, self.rows, self.cols)
    }

    pub fn object_one_hot(&self) -> Tensor {
        Self::one_hot(&self.object, NUM_OBJ_CLASSES + 1, self.rows, self.cols)
    }
}

pub fn rasterize_gt(scene: &Scene, grid: &BevGridSpec) -> GtMasks {
    let p = grid.num_cells();
    let mut map = Vec::with_capacity(p);
    let mut object = vec![NUM_OBJ_CLASSES; p];
    for (i, o) in object.iter_mut().enumerate() {
        let [x, y] = grid.cell_center(i);
        map.push(scene.config.layout.classify(x, y) as usize);
        for a in &scene.agents {
            if a.contains_bev(x, y) {
                *o = a.class_id;
            }
        }
    }
    GtMasks { rows: grid.rows(), cols: grid.cols(), map, object }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn config(traffic: Traffic, seed: u64) -> SceneConfig {
        SceneConfig::new(Layout::FourWay, 4, traffic, BevGridSpec::desk(), seed)
    }

    #[test]
    fn rig_ranges_and_determinism() {
        let cfg = config(Traffic::Low, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..250 {
            for r in sample_rigs(&cfg, &mut rng).unwrap() {
                assert!((3.0 - 1e-9..=10.0 + 1e-9).contains(&r.position[2]));
                let deg = r.pitch.to_degrees();
                assert!((-35.0 - 1e-9..=-5.0 + 1e-9).contains(&deg), "{deg}");
            }
        }
        let a = sample_rigs(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_rigs(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn agents_respect_constraints() {
        for seed in 0..5 {
            let cfg = config(Traffic::Low, seed);
            let s = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(s.agents.len() <= 8);
            for (i, a) in s.agents.iter().enumerate() {
                assert!(footprint_inside(a, &cfg.grid));
                for b in &s.agents[i + 1..] {
                    assert!(!footprints_overlap(a, b));
                }
            }
        }
    }

    #[test]
    fn overlap_test() {
        let a = Box3D::new(ObjectClass::Car, [0.0, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap();
        let b = Box3D::new(ObjectClass::Car, [3.9, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap();
        let c = Box3D::new(ObjectClass::Car, [3.2, 2.9, 0.8], [4.0, 2.0, 1.6], PI / 4.0).unwrap();
        assert!(footprints_overlap(&a, &b));
        assert!(!footprints_overlap(&a, &c));
    }

    #[test]
    fn box_raster_matches_cell_oracle() {
        let grid = BevGridSpec::desk();
        let cfg = config(Traffic::Low, 0);
        let b = Box3D::new(ObjectClass::Car, [0.0, 0.0, 0.8], [2.0, 4.0, 1.6], 0.0).unwrap();
        let scene = Scene { config: cfg, rigs: vec![], agents: vec![b.clone()] };
        let gt = rasterize_gt(&scene, &grid);
        for p in 0..grid.num_cells() {
            let [x, y] = grid.cell_center(p);
            let inside = x.abs() <= 1.0 && y.abs() <= 2.0;
            assert_eq!(gt.object[p] == ObjectClass::Car.id(), inside);
        }
        // 0.512 m cells: centers at ±0.256, ±0.768 in x and 8 rows in y
        assert_eq!(gt.object.iter().filter(|&&o| o == 0).count(), 4 * 8);
        let empty = Scene { agents: vec![], ..scene };
        assert!(rasterize_gt(&empty, &grid).object.iter().all(|&o| o == NUM_OBJ_CLASSES));
        assert_eq!(rasterize_gt(&empty, &grid).map_one_hot().shape()[0], 7);
    }
}
