//! Camera rigs, the BEV grid, reference pillars, projection and visibility.
//!
//! World frame is right-handed and z-up with the grid centered on the scene.
//! Camera frame is x right, y down, z forward; depth is camera-frame z.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
const IDENTITY4: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Depths closer to zero than this are treated as degenerate.
pub const DEPTH_EPS: f64 = 1e-12;

/// Calibrated pinhole camera. Pose fields are derived from the extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub intrinsics: Mat3,
    /// World-to-camera rigid transform.
    pub extrinsics: Mat4,
    pub width: usize,
    pub height: usize,
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub is_dummy: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionResult {
    pub uv: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

fn rotation(e: &Mat4) -> Mat3 {
    [
        [e[0][0], e[0][1], e[0][2]],
        [e[1][0], e[1][1], e[1][2]],
        [e[2][0], e[2][1], e[2][2]],
    ]
}

impl CameraRig {
    /// Validates calibration and derives position, yaw and pitch.
    pub fn new(intrinsics: Mat3, extrinsics: Mat4, width: usize, height: usize) -> Result<Self> {
        let k = &intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Config(format!("intrinsics need positive focal lengths, got {k:?}")));
        }
        if k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::Config(format!("intrinsics must be upper triangular with [0,0,1] last row, got {k:?}")));
        }
        if extrinsics[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Config("extrinsics last row must be [0,0,0,1]".into()));
        }
        let r = rotation(&extrinsics);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|c| r[i][c] * r[j][c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Config("extrinsic rotation is not orthonormal".into()));
                }
            }
        }
        if det3(&r) <= 0.0 {
            return Err(Error::Config("extrinsic rotation is a reflection".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        let t = [extrinsics[0][3], extrinsics[1][3], extrinsics[2][3]];
        let position = [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ];
        let forward = r[2];
        let pitch = forward[2].clamp(-1.0, 1.0).asin();
        let yaw = if forward[0].hypot(forward[1]) > 1e-9 {
            forward[1].atan2(forward[0])
        } else {
            // looking straight up/down: recover heading from the right axis
            r[0][0].atan2(-r[0][1])
        };
        Ok(Self { intrinsics, extrinsics, width, height, position, yaw, pitch, is_dummy: false })
    }

    /// Camera at `position` with heading `yaw` (radians from +x towards +y)
    /// and `pitch` (negative looks down), square pixels and centered principal point.
    pub fn from_pose(position: [f64; 3], yaw: f64, pitch: f64, focal: f64, width: usize, height: usize) -> Result<Self> {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = [cp * cy, cp * sy, sp];
        let right = [sy, -cy, 0.0];
        let down = cross(forward, right);
        let r = [right, down, forward];
        let t: Vec<f64> = r.iter().map(|row| -(row[0] * position[0] + row[1] * position[1] + row[2] * position[2])).collect();
        let mut e = IDENTITY4;
        for i in 0..3 {
            e[i][..3].copy_from_slice(&r[i]);
            e[i][3] = t[i];
        }
        let k = [
            [focal, 0.0, width as f64 / 2.0],
            [0.0, focal, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        Self::new(k, e, width, height)
    }

    /// Identity-calibrated placeholder for a missing camera.
    pub fn dummy(width: usize, height: usize) -> Self {
        Self {
            intrinsics: IDENTITY3,
            extrinsics: IDENTITY4,
            width,
            height,
            position: [0.0; 3],
            yaw: 0.0,
            pitch: 0.0,
            is_dummy: true,
        }
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    pub fn project(&self, p: [f64; 3]) -> ProjectionResult {
        let c = self.to_camera(p);
        let depth = c[2];
        if depth.abs() <= DEPTH_EPS {
            return ProjectionResult { uv: [f64::NAN, f64::NAN], depth, valid: false };
        }
        let (xn, yn) = (c[0] / depth, c[1] / depth);
        let k = &self.intrinsics;
        let u = k[0][0] * xn + k[0][1] * yn + k[0][2];
        let v = k[1][1] * yn + k[1][2];
        let valid = !self.is_dummy
            && depth > DEPTH_EPS
            && u >= 0.0
            && u < self.width as f64
            && v >= 0.0
            && v < self.height as f64;
        ProjectionResult { uv: [u, v], depth, valid }
    }

    /// Inverse of [`Self::project`] for a known depth.
    pub fn back_project(&self, uv: [f64; 2], depth: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        let yn = (uv[1] - k[1][2]) / k[1][1];
        let xn = (uv[0] - k[0][2] - k[0][1] * yn) / k[0][0];
        let c = [xn * depth, yn * depth, depth];
        let e = &self.extrinsics;
        let d = [c[0] - e[0][3], c[1] - e[1][3], c[2] - e[2][3]];
        let mut p = [0.0; 3];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = e[0][j] * d[0] + e[1][j] * d[1] + e[2][j] * d[2];
        }
        p
    }

    pub fn translated(&self, delta: [f64; 3]) -> Self {
        let mut out = self.clone();
        let r = rotation(&self.extrinsics);
        for i in 0..3 {
            out.extrinsics[i][3] -= r[i][0] * delta[0] + r[i][1] * delta[1] + r[i][2] * delta[2];
            out.position[i] += delta[i];
        }
        out
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// One entry of the rig JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigRecord {
    pub intrinsics: Vec<f64>,
    pub extrinsics: Vec<f64>,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub dummy: bool,
}

impl From<&CameraRig> for RigRecord {
    fn from(r: &CameraRig) -> Self {
        Self {
            intrinsics: r.intrinsics.iter().flatten().copied().collect(),
            extrinsics: r.extrinsics.iter().flatten().copied().collect(),
            width: r.width,
            height: r.height,
            dummy: r.is_dummy,
        }
    }
}

impl TryFrom<&RigRecord> for CameraRig {
    type Error = Error;

    fn try_from(r: &RigRecord) -> Result<Self> {
        if r.intrinsics.len() != 9 || r.extrinsics.len() != 16 {
            return Err(Error::Config(format!(
                "rig record needs 9 intrinsics and 16 extrinsics, got {} and {}",
                r.intrinsics.len(),
                r.extrinsics.len()
            )));
        }
        if r.dummy {
            return Ok(Self::dummy(r.width, r.height));
        }
        let mut k = [[0.0; 3]; 3];
        let mut e = [[0.0; 4]; 4];
        for i in 0..9 {
            k[i / 3][i % 3] = r.intrinsics[i];
        }
        for i in 0..16 {
            e[i / 4][i % 4] = r.extrinsics[i];
        }
        Self::new(k, e, r.width, r.height)
    }
}

pub fn rigs_to_json(rigs: &[CameraRig]) -> Result<String> {
    let recs: Vec<RigRecord> = rigs.iter().map(RigRecord::from).collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

pub fn rigs_from_json(s: &str) -> Result<Vec<CameraRig>> {
    let recs: Vec<RigRecord> = serde_json::from_str(s)?;
    recs.iter().map(CameraRig::try_from).collect()
}

/// BEV grid: rows run along y, columns along x, cell `p = row * W + col`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// (H_bev, W_bev)
    pub cells: [usize; 2],
    pub anchor_heights: Vec<f64>,
    pub z_max: f64,
}

impl BevGridSpec {
    pub fn new(x_range: [f64; 2], y_range: [f64; 2], cells: [usize; 2], anchor_heights: Vec<f64>, z_max: f64) -> Result<Self> {
        let g = Self { x_range, y_range, cells, anchor_heights, z_max };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_range[1] > self.x_range[0] && self.y_range[1] > self.y_range[0]) {
            return Err(Error::Config("grid ranges must be increasing".into()));
        }
        if self.cells[0] == 0 || self.cells[1] == 0 {
            return Err(Error::Config("grid needs at least one cell per axis".into()));
        }
        if self.anchor_heights.is_empty() {
            return Err(Error::Config("grid needs at least one anchor height".into()));
        }
        if self.anchor_heights.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("anchor heights must be strictly increasing".into()));
        }
        if !(self.z_max > 0.0) {
            return Err(Error::Config("z_max must be positive".into()));
        }
        Ok(())
    }

    /// `n` heights spread evenly over [0.25, 3.75] m.
    pub fn default_heights(n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        (0..n).map(|j| 0.25 + 3.5 * j as f64 / (n - 1) as f64).collect()
    }

    /// 100x100 cells of 0.512 m over ±25.6 m.
    pub fn desk() -> Self {
        Self::square(25.6, 100, 8)
    }

    /// 200x200 cells over ±51.2 m with 8 anchor heights.
    pub fn m2i() -> Self {
        Self::square(51.2, 200, 8)
    }

    pub fn square(half_extent: f64, cells: usize, n_ref: usize) -> Self {
        Self {
            x_range: [-half_extent, half_extent],
            y_range: [-half_extent, half_extent],
            cells: [cells, cells],
            anchor_heights: Self::default_heights(n_ref),
            z_max: 12.0,
        }
    }

    pub fn rows(&self) -> usize {
        self.cells[0]
    }

    pub fn cols(&self) -> usize {
        self.cells[1]
    }

    pub fn num_cells(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn n_ref(&self) -> usize {
        self.anchor_heights.len()
    }

    pub fn cell_size(&self) -> [f64; 2] {
        [
            (self.x_range[1] - self.x_range[0]) / self.cells[1] as f64,
            (self.y_range[1] - self.y_range[0]) / self.cells[0] as f64,
        ]
    }

    /// Half-extents (Rx, Ry).
    pub fn half_extent(&self) -> [f64; 2] {
        [(self.x_range[1] - self.x_range[0]) / 2.0, (self.y_range[1] - self.y_range[0]) / 2.0]
    }

    pub fn cell_center(&self, p: usize) -> [f64; 2] {
        let (row, col) = (p / self.cols(), p % self.cols());
        let [dx, dy] = self.cell_size();
        [self.x_range[0] + (col as f64 + 0.5) * dx, self.y_range[0] + (row as f64 + 0.5) * dy]
    }

    /// Cell containing a ground point, if inside the range.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let [dx, dy] = self.cell_size();
        let col = ((x - self.x_range[0]) / dx).floor();
        let row = ((y - self.y_range[0]) / dy).floor();
        if col < 0.0 || row < 0.0 || col >= self.cols() as f64 || row >= self.rows() as f64 {
            return None;
        }
        Some(row as usize * self.cols() + col as usize)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_range[0] && x <= self.x_range[1] && y >= self.y_range[0] && y <= self.y_range[1]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x_range: [self.x_range[0] * s, self.x_range[1] * s],
            y_range: [self.y_range[0] * s, self.y_range[1] * s],
            cells: self.cells,
            anchor_heights: self.anchor_heights.iter().map(|h| h * s).collect(),
            z_max: self.z_max * s,
        }
    }
}

/// Pillar points `[N_ref, H_bev, W_bev, 3]`: every cell center stacked at
/// each anchor height.
pub fn reference_pillars(grid: &BevGridSpec) -> Tensor {
    let (n_ref, h, w) = (grid.n_ref(), grid.rows(), grid.cols());
    let mut data = Vec::with_capacity(n_ref * h * w * 3);
    for &z in &grid.anchor_heights {
        for p in 0..h * w {
            let [x, y] = grid.cell_center(p);
            data.extend_from_slice(&[x, y, z]);
        }
    }
    Tensor::from_parts(vec![n_ref, h, w, 3], data)
}

/// Projections of every pillar point into every camera.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSampling {
    pub num_cams: usize,
    pub n_ref: usize,
    pub num_cells: usize,
    /// `[cam][j * num_cells + p]`
    pub uv: Vec<Vec<[f64; 2]>>,
    pub valid: Vec<Vec<bool>>,
}

impl PointSampling {
    pub fn point_index(&self, j: usize, p: usize) -> usize {
        j * self.num_cells + p
    }

    pub fn is_valid(&self, cam: usize, j: usize, p: usize) -> bool {
        self.valid[cam][self.point_index(j, p)]
    }

    pub fn uv_at(&self, cam: usize, j: usize, p: usize) -> [f64; 2] {
        self.uv[cam][self.point_index(j, p)]
    }

    /// Restricts to the cameras in `order` (used for permutation checks).
    pub fn select_cams(&self, order: &[usize]) -> Self {
        Self {
            num_cams: order.len(),
            n_ref: self.n_ref,
            num_cells: self.num_cells,
            uv: order.iter().map(|&c| self.uv[c].clone()).collect(),
            valid: order.iter().map(|&c| self.valid[c].clone()).collect(),
        }
    }
}

pub fn point_sampling(pillars: &Tensor, rigs: &[CameraRig]) -> Result<PointSampling> {
    let (n_ref, cells) = match pillars.shape() {
        [n, h, w, 3] => (*n, h * w),
        s => return Err(Error::Dimension(format!("pillars must be [N_ref, H, W, 3], got {s:?}"))),
    };
    let pts = pillars.data();
    let mut uv = Vec::with_capacity(rigs.len());
    let mut valid = Vec::with_capacity(rigs.len());
    for rig in rigs {
        let mut cam_uv = Vec::with_capacity(n_ref * cells);
        let mut cam_valid = Vec::with_capacity(n_ref * cells);
        for i in 0..n_ref * cells {
            let r = rig.project([pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]]);
            cam_uv.push(r.uv);
            cam_valid.push(r.valid);
        }
        uv.push(cam_uv);
        valid.push(cam_valid);
    }
    Ok(PointSampling { num_cams: rigs.len(), n_ref, num_cells: cells, uv, valid })
}

/// Cell-by-camera boolean mask, `m[p * num_cams + n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    pub num_cells: usize,
    pub num_cams: usize,
    pub m: Vec<bool>,
}

impl VisibilityMask {
    pub fn get(&self, p: usize, n: usize) -> bool {
        self.m[p * self.num_cams + n]
    }

    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }

    pub fn visible_cams(&self, p: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_cams).filter(move |&n| self.get(p, n))
    }
}

/// A cell is visible from a camera when any of its pillar points projects validly.
pub fn visibility(samples: &PointSampling) -> VisibilityMask {
    let mut m = vec![false; samples.num_cells * samples.num_cams];
    for n in 0..samples.num_cams {
        for j in 0..samples.n_ref {
            for p in 0..samples.num_cells {
                if samples.is_valid(n, j, p) {
                    m[p * samples.num_cams + n] = true;
                }
            }
        }
    }
    VisibilityMask { num_cells: samples.num_cells, num_cams: samples.num_cams, m }
}

/// Appends dummy rigs up to `n_max`.
pub fn pad_rigs(rigs: &[CameraRig], n_max: usize) -> Result<Vec<CameraRig>> {
    if rigs.len() > n_max {
        return Err(Error::Config(format!("{} rigs exceed the maximum of {n_max}", rigs.len())));
    }
    let (w, h) = rigs.first().map_or((1, 1), |r| (r.width, r.height));
    let mut out = rigs.to_vec();
    out.resize_with(n_max, || CameraRig::dummy(w, h));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_x_rig() -> CameraRig {
        // camera at origin looking along +x: right = -y, down = -z, forward = +x
        let k = [[800.0, 0.0, 400.0], [0.0, 800.0, 300.0], [0.0, 0.0, 1.0]];
        let e = [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        CameraRig::new(k, e, 800, 600).unwrap()
    }

    #[test]
    fn axis_point_hits_principal_point() {
        let r = forward_x_rig().project([5.0, 0.0, 0.0]);
        assert!(r.valid);
        assert_eq!(r.uv, [400.0, 300.0]);
        assert_eq!(r.depth, 5.0);
    }

    #[test]
    fn behind_camera_is_invalid() {
        assert!(!forward_x_rig().project([-5.0, 0.0, 0.0]).valid);
    }

    #[test]
    fn degenerate_depth_is_invalid() {
        let r = forward_x_rig().project([0.0, 1.0, 1.0]);
        assert!(!r.valid);
    }

    #[test]
    fn image_boundary_is_half_open() {
        let rig = forward_x_rig();
        // u = 800 exactly at the right edge
        let r = rig.project([1.0, -0.5, 0.0]);
        assert_eq!(r.uv[0], 800.0);
        assert!(!r.valid);
        let r = rig.project([1.0, 0.5, 0.0]);
        assert_eq!(r.uv[0], 0.0);
        assert!(r.valid);
    }

    #[test]
    fn from_pose_matches_explicit_extrinsics() {
        let a = CameraRig::from_pose([0.0; 3], 0.0, 0.0, 800.0, 800, 600).unwrap();
        let b = forward_x_rig();
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.extrinsics[i][j] - b.extrinsics[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pose_is_recovered_from_extrinsics() {
        let rig = CameraRig::from_pose([3.0, -4.0, 7.5], 2.5, -0.4, 800.0, 800, 600).unwrap();
        assert!((rig.yaw - 2.5).abs() < 1e-12);
        assert!((rig.pitch + 0.4).abs() < 1e-12);
        for (a, b) in rig.position.iter().zip([3.0, -4.0, 7.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut e = forward_x_rig().extrinsics;
        e[0][1] = -1.1;
        assert!(CameraRig::new(forward_x_rig().intrinsics, e, 800, 600).is_err());
    }

    #[test]
    fn dummy_never_projects() {
        let d = CameraRig::dummy(800, 600);
        // identity calibration gives positive depth here; the flag still excludes it
        let r = d.project([0.5, 0.5, 3.0]);
        assert!(r.depth > 0.0);
        assert!(!r.valid);
    }

    #[test]
    fn pillars_examples() {
        let g = BevGridSpec::new([-1.0, 1.0], [-1.0, 1.0], [1, 1], vec![0.5], 10.0).unwrap();
        assert_eq!(reference_pillars(&g).data(), &[0.0, 0.0, 0.5]);

        let g = BevGridSpec::new([0.0, 2.0], [0.0, 2.0], [2, 2], vec![1.0], 10.0).unwrap();
        let p = reference_pillars(&g);
        let xs: Vec<f64> = p.data().chunks(3).map(|c| c[0]).collect();
        let ys: Vec<f64> = p.data().chunks(3).map(|c| c[1]).collect();
        assert_eq!(xs, vec![0.5, 1.5, 0.5, 1.5]);
        assert_eq!(ys, vec![0.5, 0.5, 1.5, 1.5]);

        let m2i = BevGridSpec::m2i();
        assert_eq!(reference_pillars(&m2i).shape(), &[8, 200, 200, 3]);
    }

    #[test]
    fn grid_validation() {
        assert!(BevGridSpec::new([1.0, -1.0], [-1.0, 1.0], [2, 2], vec![1.0], 1.0).is_err());
        assert!(BevGridSpec::new([-1.0, 1.0], [-1.0, 1.0], [2, 2], vec![1.0, 1.0], 1.0).is_err());
        assert!(BevGridSpec::new([-1.0, 1.0], [-1.0, 1.0], [2, 2], vec![], 1.0).is_err());
        assert!(BevGridSpec::new([-1.0, 1.0], [-1.0, 1.0], [0, 2], vec![1.0], 1.0).is_err());
    }

    #[test]
    fn sampling_and_visibility() {
        let g = BevGridSpec::new([4.0, 6.0], [-1.0, 1.0], [1, 1], vec![0.0], 10.0).unwrap();
        let pillars = reference_pillars(&g);
        let s = point_sampling(&pillars, &[forward_x_rig()]).unwrap();
        assert_eq!(s.valid[0], vec![true]);
        let m = visibility(&s);
        assert!(m.get(0, 0));

        let s = point_sampling(&pillars, &[CameraRig::dummy(800, 600), CameraRig::dummy(800, 600)]).unwrap();
        assert!(visibility(&s).m.iter().all(|&b| !b));
    }

    #[test]
    fn visibility_any_over_heights() {
        let s = PointSampling {
            num_cams: 2,
            n_ref: 4,
            num_cells: 3,
            uv: vec![vec![[0.0; 2]; 12]; 2],
            valid: vec![vec![false; 12], {
                let mut v = vec![false; 12];
                v[3 * 3 + 1] = true;
                v
            }],
        };
        let m = visibility(&s);
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 1));
        let none = PointSampling { valid: vec![vec![false; 12]; 2], ..s };
        assert_eq!(visibility(&none).count(), 0);
    }

    #[test]
    fn padding() {
        let rig = forward_x_rig();
        let four = vec![rig.clone(); 4];
        assert_eq!(pad_rigs(&four, 4).unwrap(), four);
        let padded = pad_rigs(&four[..2], 4).unwrap();
        assert_eq!(padded.len(), 4);
        assert!(padded[2].is_dummy && padded[3].is_dummy);
        assert_eq!(padded[2].intrinsics, IDENTITY3);
        assert_eq!(padded[3].extrinsics, IDENTITY4);
        let one = pad_rigs(&[], 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0].is_dummy);
        assert!(pad_rigs(&four, 3).is_err());
    }

    #[test]
    fn rig_json_roundtrip() {
        let rigs = vec![forward_x_rig(), CameraRig::dummy(800, 600)];
        let json = rigs_to_json(&rigs).unwrap();
        assert_eq!(rigs_from_json(&json).unwrap(), rigs);
    }
}
