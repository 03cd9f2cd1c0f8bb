//! Deformable sampling around projected pillar points.
//!
//! Each query predicts `points` offsets and attention logits per reference
//! height. Attention is normalized over the points of one reference; the
//! per-reference results are averaged over the references that project
//! inside the camera, so a constant feature map reproduces its value.
//! Offsets and attention are shared by all cameras.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PointSampling;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Zero offsets and uniform attention: a plain bilinear lookup at the
/// projected points.
pub fn init_params(ps: &mut ParamSet, prefix: &str, channels: usize, n_ref: usize, points: usize, _rng: &mut ChaCha8Rng) -> Result<()> {
    ps.insert_zeros(&format!("{prefix}.w_off"), &[channels, n_ref * points * 2])?;
    ps.insert_zeros(&format!("{prefix}.b_off"), &[n_ref * points * 2])?;
    ps.insert_zeros(&format!("{prefix}.w_att"), &[channels, n_ref * points])?;
    ps.insert_zeros(&format!("{prefix}.b_att"), &[n_ref * points])?;
    Ok(())
}

/// Valid sampling locations of one camera, in feature-map pixel coordinates.
#[derive(Clone, Debug)]
pub struct CameraRefs {
    /// Row of the shared offset/attention tables per sample.
    rows: Vec<usize>,
    /// Cell index per sample.
    cells: Vec<usize>,
    base: Tensor,
    /// `1 / (#valid references)` per cell, 0 where none.
    inv_count: Tensor,
}

impl CameraRefs {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_samples(&self) -> usize {
        self.rows.len()
    }

    /// `scale` maps image pixels to feature pixels per axis.
    pub fn from_sampling(samples: &PointSampling, cam: usize, points: usize, scale: [f64; 2]) -> Self {
        let (p_count, r) = (samples.num_cells, samples.n_ref);
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        let mut base = Vec::new();
        let mut counts = vec![0usize; p_count];
        for p in 0..p_count {
            for j in 0..r {
                if !samples.is_valid(cam, j, p) {
                    continue;
                }
                counts[p] += 1;
                let uv = samples.uv_at(cam, j, p);
                for k in 0..points {
                    rows.push((p * r + j) * points + k);
                    cells.push(p);
                    base.extend_from_slice(&[uv[0] * scale[0], uv[1] * scale[1]]);
                }
            }
        }
        let s = rows.len();
        let inv = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
        Self {
            rows,
            cells,
            base: Tensor::from_parts(vec![s, 2], base),
            inv_count: Tensor::from_parts(vec![p_count], inv),
        }
    }

    /// References given directly as feature-pixel locations for one cell
    /// (`None` marks a reference outside the camera).
    pub fn single_cell(ref_uvs: &[Option<[f64; 2]>], points: usize) -> Self {
        let r = ref_uvs.len();
        let mut rows = Vec::new();
        let mut base = Vec::new();
        for (j, uv) in ref_uvs.iter().enumerate() {
            if let Some(uv) = uv {
                for k in 0..points {
                    rows.push(j * points + k);
                    base.extend_from_slice(uv);
                }
            }
        }
        let valid = ref_uvs.iter().filter(|u| u.is_some()).count();
        let s = rows.len();
        let _ = r;
        Self {
            cells: vec![0; s],
            rows,
            base: Tensor::from_parts(vec![s, 2], base),
            inv_count: Tensor::from_parts(vec![1], vec![if valid == 0 { 0.0 } else { 1.0 / valid as f64 }]),
        }
    }
}

/// Offsets `[P*R*K, 2]` and per-reference normalized attention `[P*R*K, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct DeformTables {
    offsets: Var,
    attention: Var,
}

pub fn deform_tables(tape: &mut Tape, ps: &ParamSet, prefix: &str, queries: Var, n_ref: usize, points: usize) -> Result<DeformTables> {
    let p = tape.shape(queries)[0];
    let w_off = tape.p(ps, &format!("{prefix}.w_off"))?;
    let b_off = tape.p(ps, &format!("{prefix}.b_off"))?;
    let w_att = tape.p(ps, &format!("{prefix}.w_att"))?;
    let b_att = tape.p(ps, &format!("{prefix}.b_att"))?;
    if tape.shape(w_off)[1] != n_ref * points * 2 || tape.shape(w_att)[1] != n_ref * points {
        return Err(Error::Config(format!("{prefix}: parameter widths do not match {n_ref} refs x {points} points")));
    }
    let off = tape.matmul(queries, w_off)?;
    let off = tape.add_row(off, b_off)?;
    let offsets = tape.reshape(off, &[p * n_ref * points, 2])?;
    let att = tape.matmul(queries, w_att)?;
    let att = tape.add_row(att, b_att)?;
    let att = tape.reshape(att, &[p * n_ref, points])?;
    let att = tape.softmax(att, 1)?;
    let attention = tape.reshape(att, &[p * n_ref * points, 1])?;
    Ok(DeformTables { offsets, attention })
}

/// Per-cell sampled feature `[P, C]` for one camera; `None` when the camera
/// sees no reference point.
pub fn deform_camera(tape: &mut Tape, tables: DeformTables, refs: &CameraRefs, feature_map: Var, num_cells: usize) -> Result<Option<Var>> {
    if refs.is_empty() {
        return Ok(None);
    }
    let s = refs.num_samples();
    let off = tape.gather_rows(tables.offsets, &refs.rows)?;
    let base = tape.constant(refs.base.clone());
    let coords = tape.add(base, off)?;
    let sampled = tape.bilinear_sample(feature_map, coords)?;
    let att = tape.gather_rows(tables.attention, &refs.rows)?;
    let att = tape.reshape(att, &[s])?;
    let weighted = tape.mul_col(sampled, att)?;
    let per_cell = tape.scatter_add_rows(weighted, &refs.cells, num_cells)?;
    let inv = tape.constant(refs.inv_count.clone());
    Ok(Some(tape.mul_col(per_cell, inv)?))
}

/// Single-query convenience form: `query` is `C` values, `ref_uvs` one
/// feature-pixel location per reference height, `feature_map` is `[C, H, W]`.
pub fn deform_sample(
    query: &[f64],
    ref_uvs: &[Option<[f64; 2]>],
    feature_map: &Tensor,
    ps: &ParamSet,
    prefix: &str,
    points: usize,
) -> Result<Vec<f64>> {
    let c = query.len();
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, c], query.to_vec())?);
    let tables = deform_tables(&mut tape, ps, prefix, q, ref_uvs.len(), points)?;
    let refs = CameraRefs::single_cell(ref_uvs, points);
    let f = tape.constant(feature_map.clone());
    match deform_camera(&mut tape, tables, &refs, f, 1)? {
        Some(v) => Ok(tape.value(v).data().to_vec()),
        None => Ok(vec![0.0; feature_map.shape()[0]]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params(c: usize, r: usize, k: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_params(&mut ps, "d", c, r, k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ps
    }

    #[test]
    fn constant_field_is_preserved() {
        let ps = params(3, 4, 4);
        let f = Tensor::full(&[3, 5, 6], 2.5);
        let refs = [Some([1.2, 3.3]), Some([4.9, 0.7]), None, Some([2.5, 2.5])];
        let out = deform_sample(&[0.1, -0.4, 0.9], &refs, &f, &ps, "d", 4).unwrap();
        for v in out {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_point_lookup() {
        let ps = params(1, 1, 1);
        let f = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = deform_sample(&[0.0], &[Some([1.5, 1.5])], &f, &ps, "d", 1).unwrap();
        assert_eq!(out, vec![3.0]);
        let out = deform_sample(&[0.0], &[Some([1.0, 1.0])], &f, &ps, "d", 1).unwrap();
        assert_eq!(out, vec![1.5]);
    }

    #[test]
    fn learned_offsets_move_the_sample() {
        let mut ps = params(1, 1, 1);
        // b_off = (+1, 0) in feature pixels
        ps.tensor_mut("d.b_off").unwrap().data_mut()[0] = 1.0;
        let f = Tensor::new(vec![1, 1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let out = deform_sample(&[0.0], &[Some([0.5, 0.5])], &f, &ps, "d", 1).unwrap();
        assert_eq!(out, vec![20.0]);
    }

    #[test]
    fn attention_weights_points() {
        let mut ps = params(1, 1, 2);
        // second point offset by one pixel, attention logits (0, ln 3) -> weights (1/4, 3/4)
        ps.tensor_mut("d.b_off").unwrap().data_mut()[2] = 1.0;
        ps.tensor_mut("d.b_att").unwrap().data_mut()[1] = 3f64.ln();
        let f = Tensor::new(vec![1, 1, 2], vec![4.0, 8.0]).unwrap();
        let out = deform_sample(&[0.0], &[Some([0.5, 0.5])], &f, &ps, "d", 2).unwrap();
        assert!((out[0] - (0.25 * 4.0 + 0.75 * 8.0)).abs() < 1e-12);
    }
}
