//! BEV transformer encoder. Each layer runs temporal self-attention,
//! relation-enhanced spatial cross-attention (ReSCA) and a feed-forward
//! block, each followed by a residual connection and layer normalization.
//! Projections of the reference pillars are computed once per scene.

pub mod deform;
pub mod fusion;
pub mod gat;
pub mod tsa;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use deform::{deform_sample, CameraRefs};
pub use fusion::{fusion_weights, FusionField};
pub use gat::{gat_score, GatConfig};

use crate::error::{Error, Result};
use crate::geometry::{point_sampling, reference_pillars, visibility, BevGridSpec, CameraRig, PointSampling, VisibilityMask};
use crate::graph::GraphTopology;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub channels: usize,
    /// Frames of temporal context including the current one.
    pub temporal_frames: usize,
    pub tsa_heads: usize,
    pub ffn_hidden: usize,
    /// Deformable sampling points per reference height.
    pub points: usize,
    pub gat: GatConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            layers: 1,
            channels: 16,
            temporal_frames: 2,
            tsa_heads: 2,
            ffn_hidden: 32,
            points: 4,
            gat: GatConfig { hidden: 16, ..GatConfig::default() },
        }
    }

    pub fn full() -> Self {
        Self {
            layers: 6,
            channels: 256,
            temporal_frames: 2,
            tsa_heads: 8,
            ffn_hidden: 512,
            points: 4,
            gat: GatConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.temporal_frames == 0 || self.ffn_hidden == 0 || self.points == 0 {
            return Err(Error::Config("encoder counts must all be at least 1".into()));
        }
        if self.tsa_heads == 0 || self.channels % self.tsa_heads != 0 {
            return Err(Error::Config(format!("{} channels not divisible by {} TSA heads", self.channels, self.tsa_heads)));
        }
        self.gat.validate()
    }
}

/// Fixed sinusoidal embedding `[rows*cols, C]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn positional_embedding(rows: usize, cols: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut out = vec![0.0; rows * cols * channels];
    let enc = |pos: usize, i: usize, width: usize| {
        let pair = (i / 2) as f64;
        let freq = 10000f64.powf(-2.0 * pair / width.max(1) as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut out[(r * cols + c) * channels..][..channels];
            for (i, v) in row[..half].iter_mut().enumerate() {
                *v = enc(r, i, half);
            }
            for (i, v) in row[half..].iter_mut().enumerate() {
                *v = enc(c, i, channels - half);
            }
        }
    }
    Tensor::from_parts(vec![rows * cols, channels], out)
}

pub fn init_params(ps: &mut ParamSet, cfg: &EncoderConfig, grid: &BevGridSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let (c, p) = (cfg.channels, grid.num_cells());
    let q: Vec<f64> = (0..p * c).map(|_| rng.gen_range(-0.1..=0.1)).collect();
    ps.insert("bev.queries", Tensor::new(vec![p, c], q)?)?;
    gat::init_params(ps, &cfg.gat, c, rng)?;
    for l in 0..cfg.layers {
        let pre = format!("enc.l{l}");
        tsa::init_params(ps, &format!("{pre}.tsa"), c, rng)?;
        deform::init_params(ps, &format!("{pre}.deform"), c, grid.n_ref(), cfg.points, rng)?;
        ps.insert_xavier(&format!("{pre}.resca.wo"), &[c, c], c, c, rng)?;
        ps.insert_xavier(&format!("{pre}.ffn.w1"), &[c, cfg.ffn_hidden], c, cfg.ffn_hidden, rng)?;
        ps.insert_zeros(&format!("{pre}.ffn.b1"), &[cfg.ffn_hidden])?;
        ps.insert_xavier(&format!("{pre}.ffn.w2"), &[cfg.ffn_hidden, c], cfg.ffn_hidden, c, rng)?;
        ps.insert_zeros(&format!("{pre}.ffn.b2"), &[c])?;
        for i in 1..=3 {
            ps.insert_full(&format!("{pre}.norm{i}.g"), &[c], 1.0)?;
            ps.insert_zeros(&format!("{pre}.norm{i}.b"), &[c])?;
        }
    }
    Ok(())
}

/// Everything about a scene that depends on geometry only.
#[derive(Clone, Debug)]
pub struct SceneGeometry {
    pub grid: BevGridSpec,
    pub samples: PointSampling,
    pub visibility: VisibilityMask,
    pub topology: GraphTopology,
    pub refs: Vec<CameraRefs>,
}

impl SceneGeometry {
    /// `feature_hw` is the `(height, width)` of every camera's feature map.
    pub fn new(grid: &BevGridSpec, rigs: &[CameraRig], feature_hw: [usize; 2], points: usize) -> Result<Self> {
        grid.validate()?;
        let samples = point_sampling(&reference_pillars(grid), rigs)?;
        let vis = visibility(&samples);
        let topology = GraphTopology::build(rigs, &vis, grid)?;
        let refs = rigs
            .iter()
            .enumerate()
            .map(|(n, rig)| {
                let scale = [feature_hw[1] as f64 / rig.width as f64, feature_hw[0] as f64 / rig.height as f64];
                CameraRefs::from_sampling(&samples, n, points, scale)
            })
            .collect();
        Ok(Self { grid: grid.clone(), samples, visibility: vis, topology, refs })
    }

    pub fn num_cams(&self) -> usize {
        self.refs.len()
    }
}

/// Per-layer intermediate values kept for inspection.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Queries entering ReSCA, `[P, C]`.
    pub queries: Tensor,
    pub fusion: FusionField,
    /// Per-camera sampled features `[P, C]`; `None` for cameras that see nothing.
    pub features: Vec<Option<Tensor>>,
    /// Fused features before the output projection and residual.
    pub resca: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct EncodeTrace {
    pub layers: Vec<LayerTrace>,
}

/// Mean-pooled camera node features `[N, C]` from `[C, H, W]` maps.
pub fn camera_nodes(tape: &mut Tape, feature_maps: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(feature_maps.len());
    for &f in feature_maps {
        let (c, hw) = match tape.shape(f) {
            [c, h, w] if h * w > 0 => (*c, h * w),
            s => return Err(Error::Dimension(format!("feature map must be non-empty [C,H,W], got {s:?}"))),
        };
        let flat = tape.reshape(f, &[c, hw])?;
        let m = tape.mean_axis(flat, 1)?;
        rows.push(tape.reshape(m, &[1, c])?);
    }
    if rows.is_empty() {
        return Err(Error::Dimension("no camera feature maps".into()));
    }
    tape.concat(&rows, 0)
}

fn affine_norm(tape: &mut Tape, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.p(ps, &format!("{prefix}.g"))?;
    let b = tape.p(ps, &format!("{prefix}.b"))?;
    let n = tape.layer_norm(x, NORM_EPS)?;
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

/// Runs the encoder and returns `B_t` as `[P, C]`.
///
/// `history` holds previous BEV maps, newest first; missing frames are
/// replaced by zeros. `rng` enables dropout.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    tape: &mut Tape,
    ps: &ParamSet,
    cfg: &EncoderConfig,
    geom: &SceneGeometry,
    feature_maps: &[Var],
    history: &[Tensor],
    mut rng: Option<&mut ChaCha8Rng>,
    trace: bool,
) -> Result<(Var, Option<EncodeTrace>)> {
    cfg.validate()?;
    let grid = &geom.grid;
    let (p, c) = (grid.num_cells(), cfg.channels);
    if feature_maps.len() != geom.num_cams() {
        return Err(Error::Dimension(format!("{} feature maps for {} cameras", feature_maps.len(), geom.num_cams())));
    }
    for &f in feature_maps {
        if tape.shape(f).first() != Some(&c) {
            return Err(Error::Dimension(format!("feature map {:?} does not have {c} channels", tape.shape(f))));
        }
    }
    let frames = cfg.temporal_frames - 1;
    let mut hist: Vec<Tensor> = history.iter().take(frames).cloned().collect();
    hist.resize(frames, Tensor::zeros(&[p, c]));

    let queries = tape.p(ps, "bev.queries")?;
    if tape.shape(queries) != [p, c] {
        return Err(Error::Config(format!("bev.queries is {:?}, grid needs [{p}, {c}]", tape.shape(queries))));
    }
    let pe = tape.constant(positional_embedding(grid.rows(), grid.cols(), c));
    let mut b = tape.add(queries, pe)?;
    let cams = camera_nodes(tape, feature_maps)?;
    let mut out_trace = trace.then(EncodeTrace::default);

    for l in 0..cfg.layers {
        let pre = format!("enc.l{l}");
        if frames > 0 {
            b = tsa::temporal_self_attention(tape, ps, &format!("{pre}.tsa"), b, &hist, [grid.rows(), grid.cols()], cfg.tsa_heads)?;
        }
        b = affine_norm(tape, ps, &format!("{pre}.norm1"), b)?;

        let edge_logits = gat_score(tape, ps, &cfg.gat, &geom.topology, b, cams, rng.as_deref_mut())?;
        let (weights, uncovered) = fusion::fusion_weights_tape(tape, edge_logits, &geom.topology)?;
        let tables = deform::deform_tables(tape, ps, &format!("{pre}.deform"), b, grid.n_ref(), cfg.points)?;
        let mut feats = Vec::with_capacity(feature_maps.len());
        for (refs, &f) in geom.refs.iter().zip(feature_maps) {
            feats.push(deform::deform_camera(tape, tables, refs, f, p)?);
        }
        let resca = fusion::resca_combine(tape, weights, &feats, &geom.topology.cam_order, p, c)?;
        if let Some(t) = out_trace.as_mut() {
            t.layers.push(LayerTrace {
                queries: tape.value(b).clone(),
                fusion: FusionField {
                    logits: gat::dense_logits(tape.value(edge_logits).data(), &geom.topology),
                    weights: tape.value(weights).clone(),
                    uncovered,
                },
                features: feats.iter().map(|f| f.map(|v| tape.value(v).clone())).collect(),
                resca: tape.value(resca).clone(),
            });
        }
        let wo = tape.p(ps, &format!("{pre}.resca.wo"))?;
        let proj = tape.matmul(resca, wo)?;
        b = tape.add(b, proj)?;
        b = affine_norm(tape, ps, &format!("{pre}.norm2"), b)?;

        let w1 = tape.p(ps, &format!("{pre}.ffn.w1"))?;
        let b1 = tape.p(ps, &format!("{pre}.ffn.b1"))?;
        let w2 = tape.p(ps, &format!("{pre}.ffn.w2"))?;
        let b2 = tape.p(ps, &format!("{pre}.ffn.b2"))?;
        let h = tape.matmul(b, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        b = tape.add(b, h)?;
        b = affine_norm(tape, ps, &format!("{pre}.norm3"), b)?;
    }
    Ok((b, out_trace))
}
