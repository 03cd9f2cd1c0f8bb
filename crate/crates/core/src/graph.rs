//! Bipartite camera→cell relation graph and its 8-D geometric edge descriptor.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraRig, VisibilityMask};
use crate::tensor::Tensor;

/// `[Δx/Rx, Δy/Ry, z/z_max, ‖d‖/√(Rx²+Ry²), cos δ, sin δ, cos φ, sin φ]`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeGeometry(pub [f64; 8]);

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Below this planar distance the heading difference is defined as 0.
pub const COINCIDENT_EPS: f64 = 1e-9;

pub fn edge_geometry(cell: [f64; 2], rig: &CameraRig, grid: &BevGridSpec) -> Result<EdgeGeometry> {
    if rig.is_dummy {
        return Err(Error::Config("edge geometry requested for a dummy camera".into()));
    }
    let [rx, ry] = grid.half_extent();
    let dx = cell[0] - rig.position[0];
    let dy = cell[1] - rig.position[1];
    let dist = dx.hypot(dy);
    let delta = if dist < COINCIDENT_EPS { 0.0 } else { wrap_angle(dy.atan2(dx) - rig.yaw) };
    let (sd, cd) = delta.sin_cos();
    let (sp, cp) = rig.pitch.sin_cos();
    Ok(EdgeGeometry([
        dx / rx,
        dy / ry,
        rig.position[2] / grid.z_max,
        dist / rx.hypot(ry),
        cd,
        sd,
        cp,
        sp,
    ]))
}

/// Mean over all `H*W` token positions of a `[C, H, W]` map.
pub fn pool_camera_node(feature_map: &Tensor) -> Result<Vec<f64>> {
    let (c, k) = match feature_map.shape() {
        [c, h, w] => (*c, h * w),
        s => return Err(Error::Dimension(format!("feature map must be [C,H,W], got {s:?}"))),
    };
    if k == 0 {
        return Err(Error::Dimension("cannot pool an empty feature map".into()));
    }
    Ok(feature_map
        .data()
        .chunks(k)
        .take(c)
        .map(|ch| ch.iter().sum::<f64>() / k as f64)
        .collect())
}

fn calibration_key(r: &CameraRig) -> impl Iterator<Item = f64> + '_ {
    r.extrinsics.iter().flatten().chain(r.intrinsics.iter().flatten()).copied().chain([r.width as f64, r.height as f64])
}

/// Real cameras sorted by calibration (ties by index), then dummies.
pub fn canonical_order(rigs: &[CameraRig]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rigs.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&rigs[a], &rigs[b]);
        ra.is_dummy
            .cmp(&rb.is_dummy)
            .then_with(|| calibration_key(ra).zip(calibration_key(rb)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.cmp(&b))
    });
    order
}

/// Edge structure and descriptors; depends on geometry only.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    pub num_cells: usize,
    pub num_cams: usize,
    /// `(camera, cell)`, sorted by cell, then by position in `cam_order`.
    pub edges: Vec<(usize, usize)>,
    /// Camera indices ordered by calibration, independent of how the rig
    /// list is ordered. Every reduction over cameras follows it, so
    /// reordering the rigs permutes results without changing any bits.
    pub cam_order: Vec<usize>,
    /// `[num_edges, 8]`
    pub edge_attrs: Tensor,
    pub visibility: VisibilityMask,
}

impl GraphTopology {
    pub fn build(rigs: &[CameraRig], visibility: &VisibilityMask, grid: &BevGridSpec) -> Result<Self> {
        if visibility.num_cams != rigs.len() || visibility.num_cells != grid.num_cells() {
            return Err(Error::Dimension(format!(
                "visibility is {}x{} but scene has {} cells and {} cameras",
                visibility.num_cells,
                visibility.num_cams,
                grid.num_cells(),
                rigs.len()
            )));
        }
        let cam_order = canonical_order(rigs);
        let mut edges = Vec::new();
        let mut attrs = Vec::new();
        for p in 0..visibility.num_cells {
            for &n in &cam_order {
                if rigs[n].is_dummy || !visibility.get(p, n) {
                    continue;
                }
                edges.push((n, p));
                attrs.extend_from_slice(&edge_geometry(grid.cell_center(p), &rigs[n], grid)?.0);
            }
        }
        let e = edges.len();
        Ok(Self {
            num_cells: visibility.num_cells,
            num_cams: rigs.len(),
            edges,
            cam_order,
            edge_attrs: Tensor::from_parts(vec![e, 8], attrs),
            visibility: visibility.clone(),
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_cams(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn edge_cells(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph {
    /// `[num_cells, C]`
    pub bev_nodes: Tensor,
    /// `[num_cams, C]`
    pub cam_nodes: Tensor,
    pub topology: GraphTopology,
}

impl RelationGraph {
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.topology.edges
    }

    pub fn edge_attrs(&self) -> &Tensor {
        &self.topology.edge_attrs
    }

    pub fn visibility(&self) -> &VisibilityMask {
        &self.topology.visibility
    }
}

pub fn build_graph(
    rigs: &[CameraRig],
    feature_maps: &[Tensor],
    bev_queries: &Tensor,
    visibility: &VisibilityMask,
    grid: &BevGridSpec,
) -> Result<RelationGraph> {
    if feature_maps.len() != rigs.len() {
        return Err(Error::Dimension(format!("{} feature maps for {} rigs", feature_maps.len(), rigs.len())));
    }
    let c = match bev_queries.shape() {
        [p, c] if *p == grid.num_cells() => *c,
        s => return Err(Error::Dimension(format!("BEV queries must be [{}, C], got {s:?}", grid.num_cells()))),
    };
    let mut cam = Vec::with_capacity(rigs.len() * c);
    for f in feature_maps {
        let pooled = pool_camera_node(f)?;
        if pooled.len() != c {
            return Err(Error::Dimension(format!("feature map has {} channels, queries have {c}", pooled.len())));
        }
        cam.extend(pooled);
    }
    Ok(RelationGraph {
        bev_nodes: bev_queries.clone(),
        cam_nodes: Tensor::from_parts(vec![rigs.len(), c], cam),
        topology: GraphTopology::build(rigs, visibility, grid)?,
    })
}

#[derive(Serialize, Deserialize)]
pub struct GraphDumpEdge {
    pub cam: usize,
    pub cell: usize,
    pub attrs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct GraphDump {
    pub num_cells: usize,
    pub num_cams: usize,
    pub bev_nodes: Vec<Vec<f64>>,
    pub cam_nodes: Vec<Vec<f64>>,
    pub edges: Vec<GraphDumpEdge>,
}

impl From<&RelationGraph> for GraphDump {
    fn from(g: &RelationGraph) -> Self {
        let rows = |t: &Tensor| -> Vec<Vec<f64>> {
            let c = t.shape().get(1).copied().unwrap_or(0).max(1);
            t.data().chunks(c).map(<[f64]>::to_vec).collect()
        };
        Self {
            num_cells: g.topology.num_cells,
            num_cams: g.topology.num_cams,
            bev_nodes: rows(&g.bev_nodes),
            cam_nodes: rows(&g.cam_nodes),
            edges: g
                .edges()
                .iter()
                .zip(g.edge_attrs().data().chunks(8))
                .map(|(&(cam, cell), a)| GraphDumpEdge { cam, cell, attrs: a.to_vec() })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{point_sampling, reference_pillars, visibility};

    fn grid() -> BevGridSpec {
        BevGridSpec::square(51.2, 4, 2)
    }

    fn rig(pos: [f64; 3], yaw: f64, pitch: f64) -> CameraRig {
        CameraRig::from_pose(pos, yaw, pitch, 800.0, 800, 600).unwrap()
    }

    #[test]
    fn pooling() {
        let t = Tensor::full(&[3, 2, 2], 1.5);
        assert_eq!(pool_camera_node(&t).unwrap(), vec![1.5; 3]);
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_camera_node(&t).unwrap(), vec![2.5]);
        assert_eq!(pool_camera_node(&Tensor::zeros(&[2, 3, 1])).unwrap(), vec![0.0; 2]);
        assert!(pool_camera_node(&Tensor::zeros(&[2, 0, 3])).is_err());
    }

    #[test]
    fn coincident_cell() {
        let mut g = grid();
        g.z_max = 12.0;
        let r = rig([1.0, 2.0, 6.0], 1.1, -0.3);
        let e = edge_geometry([1.0, 2.0], &r, &g).unwrap();
        let (s, c) = (-0.3f64).sin_cos();
        // the pose is recovered from the extrinsics, so allow round-off
        for (a, b) in e.0[..6].iter().zip([0.0, 0.0, 0.5, 0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{e:?}");
        }
        assert!((e.0[6] - c).abs() < 1e-15 && (e.0[7] - s).abs() < 1e-15);
    }

    #[test]
    fn scalar_oracle_case() {
        let mut g = grid();
        g.z_max = 12.0;
        let r = rig([0.0, 0.0, 6.0], 0.0, -0.3);
        let e = edge_geometry([10.0, 0.0], &r, &g).unwrap();
        let want = [
            10.0 / 51.2,
            0.0,
            0.5,
            10.0 / (51.2 * 2f64.sqrt()),
            1.0,
            0.0,
            (-0.3f64).cos(),
            (-0.3f64).sin(),
        ];
        for (a, b) in e.0.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn heading_quarter_turn() {
        let r = rig([0.0, 0.0, 6.0], std::f64::consts::FRAC_PI_2, -0.3);
        let e = edge_geometry([10.0, 0.0], &r, &grid()).unwrap();
        assert!(e.0[4].abs() < 1e-12);
        assert!((e.0[5] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn dummy_edges_rejected_and_skipped() {
        let g = grid();
        assert!(edge_geometry([0.0, 0.0], &CameraRig::dummy(8, 6), &g).is_err());
        // a mask claiming visibility for a dummy still yields no edge
        let rigs = vec![rig([-60.0, 0.0, 8.0], 0.0, -0.2), CameraRig::dummy(800, 600)];
        let mask = VisibilityMask { num_cells: g.num_cells(), num_cams: 2, m: vec![true; g.num_cells() * 2] };
        let t = GraphTopology::build(&rigs, &mask, &g).unwrap();
        assert_eq!(t.num_edges(), g.num_cells());
        assert!(t.edges.iter().all(|e| e.0 == 0));
    }

    #[test]
    fn edges_follow_visibility() {
        let g = BevGridSpec::square(25.6, 8, 3);
        let rigs = vec![
            rig([-30.0, 0.0, 8.0], 0.0, -0.25),
            rig([0.0, 30.0, 6.0], -1.4, -0.3),
            CameraRig::dummy(800, 600),
        ];
        let s = point_sampling(&reference_pillars(&g), &rigs).unwrap();
        let m = visibility(&s);
        let feats = vec![Tensor::full(&[4, 2, 2], 1.0); 3];
        let q = Tensor::zeros(&[g.num_cells(), 4]);
        let graph = build_graph(&rigs, &feats, &q, &m, &g).unwrap();
        assert_eq!(graph.edges().len(), m.count());
        for &(n, p) in graph.edges() {
            assert!(m.get(p, n));
        }
        let order = &graph.topology.cam_order;
        let rank = |n: usize| order.iter().position(|&c| c == n).unwrap();
        assert!(graph.edges().windows(2).all(|w| (w[0].1, rank(w[0].0)) < (w[1].1, rank(w[1].0))));
        assert_eq!(order.last(), Some(&2));
        assert_eq!(graph.cam_nodes.shape(), &[3, 4]);
    }

    #[test]
    fn canonical_order_ignores_rig_order() {
        let a = rig([-30.0, 0.0, 8.0], 0.0, -0.25);
        let b = rig([0.0, 30.0, 6.0], -1.4, -0.3);
        let d = CameraRig::dummy(800, 600);
        let o1 = canonical_order(&[a.clone(), b.clone(), d.clone()]);
        let o2 = canonical_order(&[d, b, a]);
        // same physical camera first in both
        assert_eq!(o1[0], 2 - o2[0]);
        assert_eq!(o2[2], 0);
    }
}
