//! Every differentiable op checked against central differences on random
//! inputs in [-1, 1].

use proptest::prelude::*;
use relbev_core::tensor::{grad_check, GradCheckOptions, PadMode};
use relbev_core::{ParamSet, Result, Tape, Tensor, Var};

fn param_set(inputs: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, shape, data) in inputs {
        ps.insert(*name, Tensor::new(shape.clone(), data.clone()).unwrap()).unwrap();
    }
    ps
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// that every output element contributes a distinct gradient.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).numel();
    let shape = t.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7368).sin()).collect();
    let w = t.constant(Tensor::new(shape, w).unwrap());
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

fn check<F>(ps: &ParamSet, f: F)
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let report = grad_check(
        |t, ps| {
            let y = f(t, ps)?;
            weighted_sum(t, y)
        },
        ps,
        &GradCheckOptions { eps: 1e-5, tol: 1e-4, ..Default::default() },
    )
    .unwrap();
    for p in &report.params {
        assert!(
            p.max_rel_err <= 1e-4,
            "{}: rel err {} (analytic {}, numeric {})",
            p.name,
            p.max_rel_err,
            p.analytic,
            p.numeric
        );
    }
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

/// Keeps values away from the kink of piecewise-linear activations.
fn away_from_zero(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x.abs() < 1e-3 { 0.5 } else { x }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn elementwise_binary(a in vals(6), b in vals(6)) {
        let ps = param_set(&[("a", vec![2, 3], a), ("b", vec![2, 3], b)]);
        check(&ps, |t, ps| { let (a, b) = (t.p(ps, "a")?, t.p(ps, "b")?); t.add(a, b) });
        check(&ps, |t, ps| { let (a, b) = (t.p(ps, "a")?, t.p(ps, "b")?); t.sub(a, b) });
        check(&ps, |t, ps| { let (a, b) = (t.p(ps, "a")?, t.p(ps, "b")?); t.mul(a, b) });
    }

    #[test]
    fn broadcasts(a in vals(6), r in vals(3), c in vals(2)) {
        let ps = param_set(&[("a", vec![2, 3], a), ("r", vec![3], r), ("c", vec![2], c)]);
        check(&ps, |t, ps| { let (a, r) = (t.p(ps, "a")?, t.p(ps, "r")?); t.add_row(a, r) });
        check(&ps, |t, ps| { let (a, r) = (t.p(ps, "a")?, t.p(ps, "r")?); t.mul_row(a, r) });
        check(&ps, |t, ps| { let (a, c) = (t.p(ps, "a")?, t.p(ps, "c")?); t.add_col(a, c) });
        check(&ps, |t, ps| { let (a, c) = (t.p(ps, "a")?, t.p(ps, "c")?); t.mul_col(a, c) });
    }

    #[test]
    fn matmul_transpose_reshape(a in vals(6), b in vals(12)) {
        let ps = param_set(&[("a", vec![2, 3], a), ("b", vec![3, 4], b)]);
        check(&ps, |t, ps| { let (a, b) = (t.p(ps, "a")?, t.p(ps, "b")?); t.matmul(a, b) });
        check(&ps, |t, ps| { let b = t.p(ps, "b")?; t.transpose(b) });
        check(&ps, |t, ps| { let b = t.p(ps, "b")?; let r = t.reshape(b, &[2, 6])?; t.narrow(r, 1, 1, 3) });
    }

    #[test]
    fn unary(a in vals(8)) {
        let a = away_from_zero(a);
        let pos: Vec<f64> = a.iter().map(|x| x.abs() + 0.1).collect();
        let ps = param_set(&[("a", vec![8], a), ("p", vec![8], pos)]);
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.relu(a)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.leaky_relu(a, 0.2)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.elu(a)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.sigmoid(a)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.tanh(a)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.exp(a)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.abs(a)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.square(a)) });
        check(&ps, |t, ps| { let p = t.p(ps, "p")?; Ok(t.ln(p)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; let s = t.scale(a, -1.7); Ok(t.add_scalar(s, 0.3)) });
    }

    #[test]
    fn reductions_and_concat(a in vals(12), b in vals(8)) {
        let ps = param_set(&[("a", vec![3, 4], a), ("b", vec![2, 4], b)]);
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.mean_all(a)) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.sum_axis(a, 0) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.mean_axis(a, 1) });
        check(&ps, |t, ps| { let (a, b) = (t.p(ps, "a")?, t.p(ps, "b")?); t.concat(&[a, b], 0) });
        check(&ps, |t, ps| {
            let (a, b) = (t.p(ps, "a")?, t.p(ps, "b")?);
            let bt = t.transpose(b)?;
            let at = t.transpose(a)?;
            t.concat(&[at, bt], 1)
        });
    }

    #[test]
    fn indexing(a in vals(12)) {
        let ps = param_set(&[("a", vec![4, 3], a)]);
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.gather_rows(a, &[2, 0, 2, 3]) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.scatter_add_rows(a, &[1, 1, 0, 4], 5) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.pick(a, &[0, 2, 1, 1]) });
    }

    #[test]
    fn softmaxes(a in vals(12), mask in prop::collection::vec(any::<bool>(), 12)) {
        let ps = param_set(&[("a", vec![3, 4], a)]);
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.softmax_masked(a, &mask, 1)?.0) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; Ok(t.softmax_masked(a, &mask, 0)?.0) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.log_softmax(a, 1) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.log_softmax(a, 0) });
        check(&ps, |t, ps| {
            let a = t.p(ps, "a")?;
            let s = t.reshape(a, &[6, 2])?;
            t.segment_softmax(s, &[0, 2, 0, 1, 2, 2], 3)
        });
    }

    #[test]
    fn grouped(a in vals(12), w in vals(6)) {
        let ps = param_set(&[("a", vec![3, 4], a), ("w", vec![3, 2], w)]);
        check(&ps, |t, ps| { let (a, w) = (t.p(ps, "a")?, t.p(ps, "w")?); t.mul_group(a, w) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.sum_group(a, 2) });
    }

    #[test]
    fn normalization(a in vals(24)) {
        let ps = param_set(&[("a", vec![4, 6], a)]);
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.layer_norm(a, 1e-5) });
        check(&ps, |t, ps| { let a = t.p(ps, "a")?; t.group_norm(a, 2, 1e-5) });
    }

    #[test]
    fn convolution_columns(x in vals(24), w in vals(2 * 18)) {
        let ps = param_set(&[("x", vec![2, 3, 4], x), ("w", vec![2, 18], w)]);
        for pad in [PadMode::Zero, PadMode::Replicate] {
            check(&ps, |t, ps| {
                let x = t.p(ps, "x")?;
                let cols = t.im2col(x, 3, pad)?;
                let w = t.p(ps, "w")?;
                t.matmul(w, cols)
            });
        }
    }

    #[test]
    fn bilinear(f in vals(2 * 3 * 4), c in prop::collection::vec(0.05f64..0.95, 10)) {
        // Keep taps off lattice lines, where the map is only piecewise smooth.
        let coords: Vec<f64> = c.iter().enumerate().map(|(i, v)| {
            let cells = if i % 2 == 0 { 4.0 } else { 3.0 };
            let raw = v * (cells + 1.0) - 0.5;
            let frac = raw - raw.floor();
            if (frac - 0.5).abs() < 1e-3 { raw + 0.01 } else { raw }
        }).collect();
        let ps = param_set(&[("f", vec![2, 3, 4], f), ("c", vec![5, 2], coords)]);
        check(&ps, |t, ps| { let (f, c) = (t.p(ps, "f")?, t.p(ps, "c")?); t.bilinear_sample(f, c) });
    }

    #[test]
    fn softmax_shift_invariance(a in vals(5), shift in -50.0f64..50.0, mask in prop::collection::vec(any::<bool>(), 5)) {
        use relbev_core::tensor::softmax_masked_values;
        let base = Tensor::new(vec![5], a.clone()).unwrap();
        let shifted = Tensor::new(vec![5], a.iter().zip(&mask).map(|(x, &m)| if m { x + shift } else { x - 3.0 * shift }).collect()).unwrap();
        let (y0, _) = softmax_masked_values(&base, &mask, 0).unwrap();
        let (y1, _) = softmax_masked_values(&shifted, &mask, 0).unwrap();
        prop_assert!(y0.max_abs_diff(&y1) <= 1e-12);
        if mask.iter().any(|&m| m) {
            let s: f64 = y0.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            for (y, &m) in y0.data().iter().zip(&mask) {
                if m { prop_assert!(*y > 0.0) } else { prop_assert_eq!(*y, 0.0) }
            }
        }
    }
}

/// masked softmax feeding a cross-entropy, the composite the fusion weights
/// are trained through.
#[test]
fn masked_softmax_cross_entropy_composite() {
    let logits: Vec<f64> = (0..12).map(|i| ((i * 37 % 17) as f64 / 17.0) * 2.0 - 1.0).collect();
    let mask = [true, true, false, true, false, true, true, true, true, false, false, true];
    let ps = param_set(&[("s", vec![4, 3], logits)]);
    let report = grad_check(
        |t, ps| {
            let s = t.p(ps, "s")?;
            let (w, _) = t.softmax_masked(s, &mask, 1)?;
            let eps = t.add_scalar(w, 1e-3);
            let lw = t.ln(eps);
            let picked = t.pick(lw, &[0, 2, 1, 2])?;
            let m = t.mean_all(picked);
            Ok(t.scale(m, -1.0))
        },
        &ps,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() <= 1e-6, "{report:?}");
}
