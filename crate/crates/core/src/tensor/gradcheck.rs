use super::{ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Checks at most this many elements per parameter (evenly strided,
    /// plus the element with the largest analytic gradient).
    pub max_elems_per_param: Option<usize>,
    /// Round-off allowance in ulps of `f(θ)`. A central difference cannot
    /// resolve gradients finer than `ulp(f) / 2eps`, so the floor is raised
    /// to `roundoff_ulps · eps_mach · |f| / (2 eps · tol)` when that is larger.
    pub roundoff_ulps: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, floor: 1e-6, max_elems_per_param: None, roundoff_ulps: 8.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    /// Denominator floor actually used.
    pub floor: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_err > self.tol)
    }
}

fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Dimension(format!("grad_check: f returned shape {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

fn pick_indices(n: usize, limit: Option<usize>, analytic: &[f64]) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut idx: Vec<usize> = (0..k.max(1)).map(|i| i * n / k.max(1)).collect();
            let largest = analytic
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            idx.push(largest);
            idx.sort_unstable();
            idx.dedup();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every learnable parameter.
pub fn grad_check<F>(f: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config("grad_check: eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let base = tape.value(out).data()[0];
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(θ) = {base}")));
    }
    let grads = tape.backward(out)?;
    let resolution = opts.roundoff_ulps.max(0.0) * f64::EPSILON * base.abs() / (2.0 * opts.eps);
    let floor = opts.floor.max(resolution / opts.tol);

    let mut work = params.clone();
    let mut report = Vec::new();
    for p in params.iter().filter(|p| p.learnable) {
        let n = p.tensor.numel();
        let analytic: Vec<f64> = tape
            .param_var(&p.name)
            .and_then(|v| grads.get(v))
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in pick_indices(n, opts.max_elems_per_param, &analytic) {
            let orig = p.tensor.data()[i];
            let mut at = |delta: f64| -> Result<f64> {
                work.tensor_mut(&p.name)?.data_mut()[i] = orig + delta;
                let v = eval(&f, &work)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "grad_check: f = {v} with `{}`[{i}] perturbed by {delta:+e}",
                        p.name
                    )));
                }
                Ok(v)
            };
            let plus = at(opts.eps)?;
            let minus = at(-opts.eps)?;
            work.tensor_mut(&p.name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            check.checked += 1;
            if rel > check.max_rel_err || check.checked == 1 {
                check.max_rel_err = check.max_rel_err.max(rel);
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report, tol: opts.tol, floor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(name, Tensor::scalar(v)).unwrap();
        ps
    }

    #[test]
    fn quadratic() {
        let ps = single("theta", 3.0);
        let r = grad_check(
            |t, ps| {
                let x = t.p(ps, "theta")?;
                let y = t.square(x);
                Ok(t.sum_all(y))
            },
            &ps,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!((r.params[0].analytic - 6.0).abs() < 1e-12);
        assert!((r.params[0].numeric - 6.0).abs() < 1e-8);
        assert!(r.passed());
    }

    #[test]
    fn detached_parameter_is_caught() {
        // value depends on theta but the tape never sees it
        let ps = single("theta", 3.0);
        let r = grad_check(
            |t, ps| {
                let v = ps.tensor("theta")?.data()[0];
                let p = t.p(ps, "theta")?;
                let z = t.scale(p, 0.0);
                let c = t.constant(Tensor::scalar(v * v));
                let y = t.add(z, c)?;
                Ok(t.sum_all(y))
            },
            &ps,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert!((r.params[0].max_rel_err - 1.0).abs() < 1e-6);
        assert!(r.floor < 1e-6 * 10.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let ps = single("theta", -1.25);
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &ps,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.params[0].analytic, 0.0);
        assert_eq!(r.params[0].numeric, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn non_finite_is_reported_with_context() {
        let ps = single("theta", 1e-6);
        let err = grad_check(
            |t, ps| {
                let x = t.p(ps, "theta")?;
                let y = t.ln(x);
                Ok(t.sum_all(y))
            },
            &ps,
            &GradCheckOptions { eps: 1e-3, ..Default::default() },
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("theta") && msg.contains("perturbed"), "{msg}");
    }
}
