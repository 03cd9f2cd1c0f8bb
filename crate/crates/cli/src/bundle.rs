//! Scene bundles: a directory holding `scene.json`, one tensor dump and one
//! PGM per camera view, and the rasterized ground truth.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use relbev_core::geometry::{CameraRig, RigRecord};
use relbev_core::heads::{Box3D, NUM_MAP_CLASSES, NUM_OBJ_CLASSES};
use relbev_core::sim::{rasterize_gt, render_views, Scene, SceneConfig};
use relbev_core::tensor::{read_tensor, write_tensor};
use relbev_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::pgm;

pub const SCENE_FILE: &str = "scene.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub config: SceneConfig,
    pub rigs: Vec<RigRecord>,
    pub agents: Vec<Box3D>,
}

pub fn sample_id(scene: &Scene) -> String {
    format!("scene-{}", scene.config.seed)
}

pub fn view_file(cam: usize) -> String {
    format!("cam{cam}.rbt")
}

pub fn write_bundle(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = SceneFile { config: scene.config.clone(), rigs: scene.rigs.iter().map(RigRecord::from).collect(), agents: scene.agents.clone() };
    std::fs::write(dir.join(SCENE_FILE), serde_json::to_string_pretty(&file)? + "\n")?;
    for (n, img) in render_views(scene).iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(view_file(n)))?);
        write_tensor(&mut w, img)?;
        let [_, h, wd] = img.shape() else { return Err(Error::Dimension("view must be [C, H, W]".into())) };
        pgm::write(&dir.join(format!("cam{n}.pgm")), *wd, *h, &pgm::quantize(&img.data()[..h * wd]))?;
    }
    let gt = rasterize_gt(scene, &scene.config.grid);
    let scale = |labels: &[usize], k: usize| labels.iter().map(|&l| (l * 255 / (k - 1)) as u8).collect::<Vec<_>>();
    pgm::write(&dir.join("gt_map.pgm"), gt.cols, gt.rows, &scale(&gt.map, NUM_MAP_CLASSES))?;
    pgm::write(&dir.join("gt_object.pgm"), gt.cols, gt.rows, &scale(&gt.object, NUM_OBJ_CLASSES + 1))?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = if dir.is_dir() { dir.join(SCENE_FILE) } else { dir.to_path_buf() };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let file: SceneFile = serde_json::from_str(&text)?;
    file.config.validate()?;
    let rigs = file.rigs.iter().map(CameraRig::try_from).collect::<Result<Vec<_>>>()?;
    if rigs.len() != file.config.num_cameras {
        return Err(Error::Config(format!("{} rigs for {} cameras", rigs.len(), file.config.num_cameras)));
    }
    for a in &file.agents {
        a.validate()?;
    }
    Ok(Scene { config: file.config, rigs, agents: file.agents })
}

pub fn load_views(dir: &Path, num_cams: usize) -> Result<Vec<Tensor>> {
    (0..num_cams)
        .map(|n| {
            let path = dir.join(view_file(n));
            let f = File::open(&path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
            read_tensor(&mut BufReader::new(f))
        })
        .collect()
}
