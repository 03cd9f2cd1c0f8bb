//! Temporal self-attention: each cell attends densely to the 3x3
//! neighborhood around it in every history map. Static cameras, so no
//! ego-motion warp is applied.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// `wo` starts at zero so a fresh layer is the identity map.
pub fn init_params(ps: &mut ParamSet, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for w in ["wq", "wk", "wv"] {
        ps.insert_xavier(&format!("{prefix}.{w}"), &[channels, channels], channels, channels, rng)?;
    }
    ps.insert_zeros(&format!("{prefix}.wo"), &[channels, channels])?;
    Ok(())
}

/// Key rows and their owning cell for a `rows x cols` grid with `maps`
/// stacked history maps. Neighbors outside the grid are skipped.
pub fn neighborhood(rows: usize, cols: usize, maps: usize) -> (Vec<usize>, Vec<usize>) {
    let p_count = rows * cols;
    let mut keys = Vec::with_capacity(p_count * 9 * maps);
    let mut owner = Vec::with_capacity(p_count * 9 * maps);
    for r in 0..rows {
        for c in 0..cols {
            let p = r * cols + c;
            for t in 0..maps {
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                            continue;
                        }
                        keys.push(t * p_count + rr as usize * cols + cc as usize);
                        owner.push(p);
                    }
                }
            }
        }
    }
    (keys, owner)
}

/// Returns `queries + Wo · attn(queries, history)` with shape `[P, C]`.
/// `history` holds exactly `frames` maps of shape `[P, C]`; callers pad
/// with zeros.
pub fn temporal_self_attention(
    tape: &mut Tape,
    ps: &ParamSet,
    prefix: &str,
    queries: Var,
    history: &[Tensor],
    grid: [usize; 2],
    heads: usize,
) -> Result<Var> {
    let (p, c) = match tape.shape(queries) {
        [p, c] => (*p, *c),
        s => return Err(Error::Dimension(format!("TSA queries must be [P, C], got {s:?}"))),
    };
    if grid[0] * grid[1] != p {
        return Err(Error::Dimension(format!("TSA grid {grid:?} does not match {p} cells")));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} TSA heads")));
    }
    if history.is_empty() {
        return Err(Error::Config("TSA needs at least one (possibly zero) history map".into()));
    }
    let mut stacked = Vec::with_capacity(history.len() * p * c);
    for h in history {
        if h.shape() != [p, c] {
            return Err(Error::Dimension(format!("history map {:?} vs queries [{p}, {c}]", h.shape())));
        }
        stacked.extend_from_slice(h.data());
    }
    let hist = tape.constant(Tensor::new(vec![history.len() * p, c], stacked)?);
    let (keys, owner) = neighborhood(grid[0], grid[1], history.len());

    let wq = tape.p(ps, &format!("{prefix}.wq"))?;
    let wk = tape.p(ps, &format!("{prefix}.wk"))?;
    let wv = tape.p(ps, &format!("{prefix}.wv"))?;
    let wo = tape.p(ps, &format!("{prefix}.wo"))?;

    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(hist, wk)?;
    let v = tape.matmul(hist, wv)?;
    let q_e = tape.gather_rows(q, &owner)?;
    let k_e = tape.gather_rows(k, &keys)?;
    let v_e = tape.gather_rows(v, &keys)?;
    let qk = tape.mul(q_e, k_e)?;
    let scores = tape.sum_group(qk, heads)?;
    let scores = tape.scale(scores, 1.0 / ((c / heads) as f64).sqrt());
    let alpha = tape.segment_softmax(scores, &owner, p)?;
    let msg = tape.mul_group(v_e, alpha)?;
    let agg = tape.scatter_add_rows(msg, &owner, p)?;
    let out = tape.matmul(agg, wo)?;
    tape.add(queries, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(c: usize) -> ParamSet {
        let mut ps = ParamSet::new();
        init_params(&mut ps, "t", c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        ps
    }

    #[test]
    fn neighborhood_counts() {
        let (keys, owner) = neighborhood(3, 3, 2);
        // 4 corners x4 + 4 edges x6 + center x9 = 49 per map
        assert_eq!(keys.len(), 98);
        assert_eq!(owner.iter().filter(|&&o| o == 4).count(), 18);
    }

    #[test]
    fn identity_init_is_a_fixed_point() {
        let ps = setup(4);
        let mut t = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let q = t.constant(Tensor::new(vec![4, 4], data.clone()).unwrap());
        let hist = vec![Tensor::new(vec![4, 4], data.clone()).unwrap()];
        let out = temporal_self_attention(&mut t, &ps, "t", q, &hist, [2, 2], 2).unwrap();
        assert_eq!(t.value(out).data(), &data[..]);
    }

    #[test]
    fn zero_history_is_query_only() {
        let mut ps = setup(2);
        ps.tensor_mut("t.wo").unwrap().data_mut().copy_from_slice(&[1.0, 0.5, -0.5, 2.0]);
        let q = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let run = || {
            let mut t = Tape::new();
            let qv = t.constant(q.clone());
            let out = temporal_self_attention(&mut t, &ps, "t", qv, &[Tensor::zeros(&[2, 2])], [1, 2], 1).unwrap();
            t.value(out).clone()
        };
        // zero keys and values: output is exactly the query
        assert_eq!(run(), q);
        assert_eq!(run(), run());
    }

    #[test]
    fn two_frame_attention_matches_explicit_arithmetic() {
        // 1x1 grid, C=2, one head, identity projections
        let mut ps = ParamSet::new();
        for w in ["wq", "wk", "wv", "wo"] {
            ps.insert(format!("t.{w}"), Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        }
        let q = [0.5, -1.0];
        let h1 = [1.0, 2.0];
        let h2 = [-0.5, 0.25];
        let mut t = Tape::new();
        let qv = t.constant(Tensor::new(vec![1, 2], q.to_vec()).unwrap());
        let hist = [Tensor::new(vec![1, 2], h1.to_vec()).unwrap(), Tensor::new(vec![1, 2], h2.to_vec()).unwrap()];
        let out = temporal_self_attention(&mut t, &ps, "t", qv, &hist, [1, 1], 1).unwrap();

        let s1 = (q[0] * h1[0] + q[1] * h1[1]) / 2f64.sqrt();
        let s2 = (q[0] * h2[0] + q[1] * h2[1]) / 2f64.sqrt();
        let (e1, e2) = (s1.exp(), s2.exp());
        let (a1, a2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let want = [q[0] + a1 * h1[0] + a2 * h2[0], q[1] + a1 * h1[1] + a2 * h2[1]];
        for (g, w) in t.value(out).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-14);
        }
    }
}
