//! Visibility-masked fusion weights and the relation-enhanced cross-attention
//! that mixes per-camera sampled features with them.

use crate::error::{Error, Result};
use crate::geometry::VisibilityMask;
use crate::graph::GraphTopology;
use crate::tensor::{softmax_masked_values, Tape, Tensor, Var};

/// Per-cell, per-camera logits and normalized fusion weights, both `[P, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionField {
    /// `-inf` wherever the camera does not see the cell.
    pub logits: Tensor,
    pub weights: Tensor,
    /// Cells with no visible camera; their weights are all zero.
    pub uncovered: Vec<bool>,
}

impl FusionField {
    pub fn num_cells(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_cams(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weight(&self, p: usize, n: usize) -> f64 {
        self.weights.at2(p, n)
    }

    /// Column `n` as a flat per-cell vector.
    pub fn camera_weights(&self, n: usize) -> Vec<f64> {
        (0..self.num_cells()).map(|p| self.weight(p, n)).collect()
    }
}

/// Softmax across cameras with non-visible entries forced to zero.
pub fn fusion_weights(logits: &Tensor, visibility: &VisibilityMask) -> Result<FusionField> {
    if logits.shape() != [visibility.num_cells, visibility.num_cams] {
        return Err(Error::Dimension(format!(
            "logits {:?} vs visibility {}x{}",
            logits.shape(),
            visibility.num_cells,
            visibility.num_cams
        )));
    }
    let (weights, uncovered) = softmax_masked_values(logits, &visibility.m, 1)?;
    let mut masked = logits.clone();
    for (x, &m) in masked.data_mut().iter_mut().zip(&visibility.m) {
        if !m {
            *x = f64::NEG_INFINITY;
        }
    }
    Ok(FusionField { logits: masked, weights, uncovered })
}

/// Edge mask of `topo` as a dense `[P * N]` boolean array.
pub fn edge_mask(topo: &GraphTopology) -> Vec<bool> {
    let mut m = vec![false; topo.num_cells * topo.num_cams];
    for &(cam, cell) in &topo.edges {
        m[cell * topo.num_cams + cam] = true;
    }
    m
}

/// Tape version of [`fusion_weights`] over per-edge logits `[E]`.
/// Returns the dense `[P, N]` weights and the uncovered-cell flags.
/// The softmax runs over each cell's edges in topology order.
pub fn fusion_weights_tape(tape: &mut Tape, edge_logits: Var, topo: &GraphTopology) -> Result<(Var, Vec<bool>)> {
    let (p, n) = (topo.num_cells, topo.num_cams);
    let col = tape.reshape(edge_logits, &[topo.num_edges(), 1])?;
    let cells = topo.edge_cells();
    let w = tape.segment_softmax(col, &cells, p)?;
    let idx: Vec<usize> = topo.edges.iter().map(|&(cam, cell)| cell * n + cam).collect();
    let dense = tape.scatter_add_rows(w, &idx, p * n)?;
    let mut uncovered = vec![true; p];
    for &c in &cells {
        uncovered[c] = false;
    }
    Ok((tape.reshape(dense, &[p, n])?, uncovered))
}

/// `Σ_n ω[p, n] · f_n[p]` over cameras, accumulated in `order`; invisible
/// ones contribute exact zeros. `features[n]` is `None` for cameras that
/// see no cell at all.
pub fn resca_combine(tape: &mut Tape, weights: Var, features: &[Option<Var>], order: &[usize], num_cells: usize, channels: usize) -> Result<Var> {
    let n = tape.shape(weights)[1];
    if features.len() != n || order.len() != n {
        return Err(Error::Dimension(format!("{} feature sets and {} ordered cameras for {n} cameras", features.len(), order.len())));
    }
    let mut acc: Option<Var> = None;
    for &cam in order {
        let Some(f) = &features[cam] else { continue };
        let w = tape.narrow(weights, 1, cam, 1)?;
        let w = tape.reshape(w, &[num_cells])?;
        let term = tape.mul_col(*f, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::zeros(&[num_cells, channels])),
    })
}
