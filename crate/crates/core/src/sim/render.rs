//! Flat-shaded rendering of agent boxes into grayscale camera images.

use super::Scene;
use crate::geometry::CameraRig;
use crate::heads::{Box3D, ObjectClass};
use crate::tensor::Tensor;

/// Boxes with any corner closer than this (or behind the camera) are culled.
pub const NEAR_PLANE: f64 = 0.1;

pub fn class_intensity(class_id: usize) -> f64 {
    match ObjectClass::from_id(class_id) {
        Some(ObjectClass::Car) => 0.95,
        Some(ObjectClass::Truck) => 0.8,
        Some(ObjectClass::Pedestrian) => 0.05,
        Some(ObjectClass::Cyclist) => 0.15,
        None => 0.5,
    }
}

/// Vertical gradient, brighter towards the bottom of the image.
pub fn background(width: usize, height: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, height, width]);
    for (v, row) in t.data_mut().chunks_mut(width).enumerate() {
        row.fill(0.25 + 0.35 * (v as f64 + 0.5) / height as f64);
    }
    t
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Inclusive point-in-convex-polygon test for a counter-clockwise hull.
pub fn inside_convex(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    hull.len() >= 3 && (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// Image-plane hull of a box, or `None` when culled.
pub fn projected_hull(agent: &Box3D, rig: &CameraRig) -> Option<Vec<[f64; 2]>> {
    let mut pts = Vec::with_capacity(8);
    for c in agent.corners_3d() {
        let pr = rig.project(c);
        if !(pr.depth > NEAR_PLANE) {
            return None;
        }
        pts.push(pr.uv);
    }
    Some(convex_hull(&pts))
}

pub fn render_view(scene: &Scene, rig: &CameraRig) -> Tensor {
    let (w, h) = (rig.width, rig.height);
    if rig.is_dummy {
        return Tensor::zeros(&[1, h, w]);
    }
    let mut img = background(w, h);
    let mut order: Vec<(f64, &Box3D)> = scene.agents.iter().map(|a| (rig.to_camera(a.center)[2], a)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, agent) in order {
        let Some(hull) = projected_hull(agent, rig) else { continue };
        if hull.len() < 3 {
            continue;
        }
        let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            u0 = u0.min(p[0]);
            u1 = u1.max(p[0]);
            v0 = v0.min(p[1]);
            v1 = v1.max(p[1]);
        }
        let cu0 = (u0 - 0.5).ceil().max(0.0) as usize;
        let cv0 = (v0 - 0.5).ceil().max(0.0) as usize;
        let cu1 = ((u1 - 0.5).floor()).min(w as f64 - 1.0);
        let cv1 = ((v1 - 0.5).floor()).min(h as f64 - 1.0);
        if cu1 < 0.0 || cv1 < 0.0 {
            continue;
        }
        let value = class_intensity(agent.class_id);
        let data = img.data_mut();
        for v in cv0..=cv1 as usize {
            for u in cu0..=cu1 as usize {
                if inside_convex(&hull, [u as f64 + 0.5, v as f64 + 0.5]) {
                    data[v * w + u] = value;
                }
            }
        }
    }
    img
}

/// Renders every rig; views are independent and rendered in parallel.
pub fn render_views(scene: &Scene) -> Vec<Tensor> {
    use rayon::prelude::*;
    scene.rigs.par_iter().map(|r| render_view(scene, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGridSpec;
    use crate::sim::{Layout, SceneConfig, Traffic};

    fn scene(agents: Vec<Box3D>) -> Scene {
        let cfg = SceneConfig::new(Layout::Straight, 1, Traffic::Low, BevGridSpec::desk(), 0);
        Scene { config: cfg, rigs: vec![], agents }
    }

    fn rig() -> CameraRig {
        CameraRig::from_pose([-20.0, 0.0, 6.0], 0.0, -0.25, 160.0, 160, 120).unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        assert_eq!(render_view(&scene(vec![]), &rig()), background(160, 120));
    }

    #[test]
    fn box_pixels_match_hull_oracle() {
        let a = Box3D::new(ObjectClass::Car, [0.0, 1.0, 0.8], [4.5, 1.9, 1.6], 0.4).unwrap();
        let r = rig();
        let img = render_view(&scene(vec![a.clone()]), &r);
        let bg = background(160, 120);
        let hull = projected_hull(&a, &r).unwrap();
        let mut painted = 0;
        for v in 0..120 {
            for u in 0..160 {
                let inside = inside_convex(&hull, [u as f64 + 0.5, v as f64 + 0.5]);
                let i = v * 160 + u;
                if inside {
                    painted += 1;
                    assert_eq!(img.data()[i], class_intensity(0));
                } else {
                    assert_eq!(img.data()[i], bg.data()[i]);
                }
            }
        }
        assert!(painted > 20);
    }

    #[test]
    fn agents_behind_camera_are_culled() {
        let a = Box3D::new(ObjectClass::Truck, [-30.0, 0.0, 1.5], [8.0, 2.5, 3.0], 0.0).unwrap();
        assert_eq!(render_view(&scene(vec![a]), &rig()), background(160, 120));
    }

    #[test]
    fn hull_of_square() {
        let h = convex_hull(&[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        assert_eq!(h.len(), 4);
        assert!(inside_convex(&h, [0.5, 0.5]));
        assert!(inside_convex(&h, [1.0, 0.5]));
        assert!(!inside_convex(&h, [1.01, 0.5]));
    }
}
