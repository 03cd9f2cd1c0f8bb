//! Set-prediction decoder: learned object queries attend to each other and
//! to the BEV features, then predict a class distribution (foreground
//! classes plus background) and box parameters per query.

use rand_chacha::ChaCha8Rng;

use super::{Box3D, HeadConfig, NUM_OBJ_CLASSES};
use crate::encoder::positional_embedding;
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
/// Log-size clamp when decoding, keeps `exp` finite for untrained heads.
const MAX_LOG_SIZE: f64 = 5.0;

pub fn init_params(ps: &mut ParamSet, cfg: &HeadConfig, channels: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let c = channels;
    ps.insert_xavier("det.queries", &[cfg.num_queries, c], c, c, rng)?;
    for l in 0..cfg.decoder_layers {
        let pre = format!("det.l{l}");
        for att in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                ps.insert_xavier(&format!("{pre}.{att}.{w}"), &[c, c], c, c, rng)?;
            }
        }
        ps.insert_xavier(&format!("{pre}.ffn.w1"), &[c, cfg.ffn_hidden], c, cfg.ffn_hidden, rng)?;
        ps.insert_zeros(&format!("{pre}.ffn.b1"), &[cfg.ffn_hidden])?;
        ps.insert_xavier(&format!("{pre}.ffn.w2"), &[cfg.ffn_hidden, c], cfg.ffn_hidden, c, rng)?;
        ps.insert_zeros(&format!("{pre}.ffn.b2"), &[c])?;
        for i in 1..=3 {
            ps.insert_full(&format!("{pre}.norm{i}.g"), &[c], 1.0)?;
            ps.insert_zeros(&format!("{pre}.norm{i}.b"), &[c])?;
        }
    }
    ps.insert_xavier("det.cls.w", &[c, NUM_OBJ_CLASSES + 1], c, NUM_OBJ_CLASSES + 1, rng)?;
    ps.insert_zeros("det.cls.b", &[NUM_OBJ_CLASSES + 1])?;
    ps.insert_xavier("det.box.w", &[c, cfg.box_dim()], c, cfg.box_dim(), rng)?;
    ps.insert_zeros("det.box.b", &[cfg.box_dim()])?;
    Ok(())
}

/// Raw decoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct DetOutput {
    /// `[N_q, n_obj + 1]`, background last.
    pub class_logits: Var,
    /// `[N_q, D]` in the normalized target space: sigmoid-squashed
    /// center fractions, then `z, ln l, ln w, ln h, sin, cos (, vx, vy)`.
    pub boxes: Var,
}

fn attention(tape: &mut Tape, ps: &ParamSet, prefix: &str, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
    let wq = tape.p(ps, &format!("{prefix}.wq"))?;
    let wk = tape.p(ps, &format!("{prefix}.wk"))?;
    let wv = tape.p(ps, &format!("{prefix}.wv"))?;
    let wo = tape.p(ps, &format!("{prefix}.wo"))?;
    let c = tape.shape(wq)[1];
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(k_in, wk)?;
    let v = tape.matmul(v_in, wv)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (c as f64).sqrt());
    let a = tape.softmax(s, 1)?;
    let o = tape.matmul(a, v)?;
    tape.matmul(o, wo)
}

fn norm(tape: &mut Tape, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.p(ps, &format!("{prefix}.g"))?;
    let b = tape.p(ps, &format!("{prefix}.b"))?;
    let n = tape.layer_norm(x, NORM_EPS)?;
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

/// `bev` is `[P, C]` on the grid's row-major cell order.
pub fn detect(tape: &mut Tape, ps: &ParamSet, cfg: &HeadConfig, bev: Var, grid: &BevGridSpec) -> Result<DetOutput> {
    let (p, c) = match tape.shape(bev) {
        [p, c] if *p == grid.num_cells() => (*p, *c),
        s => return Err(Error::Dimension(format!("BEV features {s:?} do not match {} cells", grid.num_cells()))),
    };
    cfg.validate(c)?;
    let _ = p;
    let pe = tape.constant(positional_embedding(grid.rows(), grid.cols(), c));
    let keys = tape.add(bev, pe)?;
    let mut q = tape.p(ps, "det.queries")?;
    if tape.shape(q) != [cfg.num_queries, c] {
        return Err(Error::Config(format!("det.queries is {:?}, expected [{}, {c}]", tape.shape(q), cfg.num_queries)));
    }
    for l in 0..cfg.decoder_layers {
        let pre = format!("det.l{l}");
        let sa = attention(tape, ps, &format!("{pre}.self"), q, q, q)?;
        q = tape.add(q, sa)?;
        q = norm(tape, ps, &format!("{pre}.norm1"), q)?;
        let ca = attention(tape, ps, &format!("{pre}.cross"), q, keys, bev)?;
        q = tape.add(q, ca)?;
        q = norm(tape, ps, &format!("{pre}.norm2"), q)?;
        let w1 = tape.p(ps, &format!("{pre}.ffn.w1"))?;
        let b1 = tape.p(ps, &format!("{pre}.ffn.b1"))?;
        let w2 = tape.p(ps, &format!("{pre}.ffn.w2"))?;
        let b2 = tape.p(ps, &format!("{pre}.ffn.b2"))?;
        let h = tape.matmul(q, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        q = tape.add(q, h)?;
        q = norm(tape, ps, &format!("{pre}.norm3"), q)?;
    }
    let wc = tape.p(ps, "det.cls.w")?;
    let bc = tape.p(ps, "det.cls.b")?;
    let logits = tape.matmul(q, wc)?;
    let class_logits = tape.add_row(logits, bc)?;
    let wb = tape.p(ps, "det.box.w")?;
    let bb = tape.p(ps, "det.box.b")?;
    let raw = tape.matmul(q, wb)?;
    let raw = tape.add_row(raw, bb)?;
    let d = cfg.box_dim();
    if tape.shape(raw)[1] != d {
        return Err(Error::Config(format!("det.box.w width {} but box dim is {d}", tape.shape(raw)[1])));
    }
    let xy = tape.narrow(raw, 1, 0, 2)?;
    let xy = tape.sigmoid(xy);
    let rest = tape.narrow(raw, 1, 2, d - 2)?;
    let boxes = tape.concat(&[xy, rest], 1)?;
    Ok(DetOutput { class_logits, boxes })
}

/// Normalized regression target of a ground-truth box.
pub fn box_target(b: &Box3D, grid: &BevGridSpec, velocity: bool) -> Vec<f64> {
    let mut t = vec![
        (b.center[0] - grid.x_range[0]) / (grid.x_range[1] - grid.x_range[0]),
        (b.center[1] - grid.y_range[0]) / (grid.y_range[1] - grid.y_range[0]),
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ];
    if velocity {
        t.extend_from_slice(&b.velocity);
    }
    t
}

/// Turns decoder outputs into one box per query; class and score come from
/// the most likely foreground class.
pub fn decode_boxes(class_logits: &Tensor, boxes: &Tensor, grid: &BevGridSpec) -> Result<Vec<Box3D>> {
    let (nq, k) = match class_logits.shape() {
        [n, k] if *k == NUM_OBJ_CLASSES + 1 => (*n, *k),
        s => return Err(Error::Dimension(format!("class logits {s:?}"))),
    };
    let d = boxes.shape().get(1).copied().unwrap_or(0);
    if boxes.shape() != [nq, d] || d < 8 {
        return Err(Error::Dimension(format!("boxes {:?} for {nq} queries", boxes.shape())));
    }
    let (w, h) = (grid.x_range[1] - grid.x_range[0], grid.y_range[1] - grid.y_range[0]);
    let mut out = Vec::with_capacity(nq);
    for (lg, b) in class_logits.data().chunks(k).zip(boxes.data().chunks(d)) {
        let m = lg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lg.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let (cls, score) = e[..NUM_OBJ_CLASSES]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let size = [b[3], b[4], b[5]].map(|s| s.clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp());
        out.push(Box3D {
            center: [grid.x_range[0] + b[0] * w, grid.y_range[0] + b[1] * h, b[2]],
            size,
            yaw: b[6].atan2(b[7]),
            velocity: if d >= 10 { [b[8], b[9]] } else { [0.0; 2] },
            class_id: cls,
            score: score / z,
        });
    }
    Ok(out)
}
