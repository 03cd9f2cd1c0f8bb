//! GATv2 message passing from camera nodes to BEV cell nodes with the
//! geometric edge descriptor mixed into the attention input, followed by a
//! per-edge linear readout that yields one fusion logit per edge.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub residual: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 4, hidden: 128, dropout: 0.1, residual: true }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Config("GAT layers, heads and hidden must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("GAT hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("GAT dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub const EDGE_DIM: usize = 8;
const LEAKY_SLOPE: f64 = 0.2;

pub fn init_params(ps: &mut ParamSet, cfg: &GatConfig, channels: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden;
    ps.insert_xavier("gat.in.w", &[channels, h], channels, h, rng)?;
    ps.insert_zeros("gat.in.b", &[h])?;
    for l in 0..cfg.layers {
        ps.insert_xavier(&format!("gat.l{l}.w_src"), &[h, h], h, h, rng)?;
        ps.insert_xavier(&format!("gat.l{l}.w_dst"), &[h, h], h, h, rng)?;
        ps.insert_xavier(&format!("gat.l{l}.w_edge"), &[EDGE_DIM, h], EDGE_DIM, h, rng)?;
        ps.insert_xavier(&format!("gat.l{l}.att"), &[h], h / cfg.heads, 1, rng)?;
        ps.insert_zeros(&format!("gat.l{l}.bias"), &[h])?;
    }
    ps.insert_xavier("gat.edge.w", &[EDGE_DIM, h], EDGE_DIM, h, rng)?;
    ps.insert_zeros("gat.edge.b", &[h])?;
    ps.insert_xavier("gat.out.w", &[3 * h, 1], 3 * h, 1, rng)?;
    ps.insert_zeros("gat.out.b", &[1])?;
    Ok(())
}

/// Inverted dropout; identity when `rng` is `None` or `p == 0`.
pub(crate) fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// Per-edge logits `[E]` in the edge order of `topo`.
///
/// `bev_nodes` is `[P, C]`, `cam_nodes` is `[N, C]`.
pub fn gat_score(
    tape: &mut Tape,
    ps: &ParamSet,
    cfg: &GatConfig,
    topo: &GraphTopology,
    bev_nodes: Var,
    cam_nodes: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    cfg.validate()?;
    let h = cfg.hidden;
    let w_in = tape.p(ps, "gat.in.w")?;
    let b_in = tape.p(ps, "gat.in.b")?;
    if tape.shape(w_in)[1] != h {
        return Err(Error::Config(format!("gat.in.w has width {} but hidden is {h}", tape.shape(w_in)[1])));
    }
    let cell_proj = tape.matmul(bev_nodes, w_in)?;
    let mut cell = tape.add_row(cell_proj, b_in)?;
    let cam_proj = tape.matmul(cam_nodes, w_in)?;
    let cam = tape.add_row(cam_proj, b_in)?;

    let src = topo.edge_cams();
    let dst = topo.edge_cells();
    let g = tape.constant(topo.edge_attrs.clone());

    for l in 0..cfg.layers {
        let w_src = tape.p(ps, &format!("gat.l{l}.w_src"))?;
        let w_dst = tape.p(ps, &format!("gat.l{l}.w_dst"))?;
        let w_edge = tape.p(ps, &format!("gat.l{l}.w_edge"))?;
        let att = tape.p(ps, &format!("gat.l{l}.att"))?;
        let bias = tape.p(ps, &format!("gat.l{l}.bias"))?;

        let x_src = tape.matmul(cam, w_src)?;
        let x_dst = tape.matmul(cell, w_dst)?;
        let xs_e = tape.gather_rows(x_src, &src)?;
        let xd_e = tape.gather_rows(x_dst, &dst)?;
        let ge = tape.matmul(g, w_edge)?;
        let z = tape.add(xs_e, xd_e)?;
        let z = tape.add(z, ge)?;
        let z = tape.leaky_relu(z, LEAKY_SLOPE);
        let za = tape.mul_row(z, att)?;
        let scores = tape.sum_group(za, cfg.heads)?;
        let alpha = tape.segment_softmax(scores, &dst, topo.num_cells)?;
        let msg = tape.mul_group(xs_e, alpha)?;
        let agg = tape.scatter_add_rows(msg, &dst, topo.num_cells)?;
        let agg = tape.add_row(agg, bias)?;
        let act = tape.elu(agg);
        let act = dropout(tape, act, cfg.dropout, rng.as_deref_mut())?;
        cell = if cfg.residual { tape.add(cell, act)? } else { act };
    }

    let w_e = tape.p(ps, "gat.edge.w")?;
    let b_e = tape.p(ps, "gat.edge.b")?;
    let e_emb = tape.matmul(g, w_e)?;
    let e_emb = tape.add_row(e_emb, b_e)?;
    let e_emb = tape.elu(e_emb);
    let cell_e = tape.gather_rows(cell, &dst)?;
    let cam_e = tape.gather_rows(cam, &src)?;
    let feat = tape.concat(&[cell_e, cam_e, e_emb], 1)?;
    let w_out = tape.p(ps, "gat.out.w")?;
    let b_out = tape.p(ps, "gat.out.b")?;
    let s = tape.matmul(feat, w_out)?;
    let s = tape.add_row(s, b_out)?;
    tape.reshape(s, &[topo.num_edges()])
}

/// Scatters per-edge logits into a dense `[P, N]` tensor with `-inf` where
/// no edge exists.
pub fn dense_logits(edge_logits: &[f64], topo: &GraphTopology) -> Tensor {
    let mut out = Tensor::full(&[topo.num_cells, topo.num_cams], f64::NEG_INFINITY);
    let n = topo.num_cams;
    for (&(cam, cell), &s) in topo.edges.iter().zip(edge_logits) {
        out.data_mut()[cell * n + cam] = s;
    }
    out
}
