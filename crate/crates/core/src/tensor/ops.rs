use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Border handling for [`Tape::im2col`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` restricted to `mask`.
///
/// Masked entries are exactly zero. Slices with no unmasked entry come back
/// all-zero and are flagged `true` in the returned vector (one flag per
/// slice, ordered outer-major).
pub fn softmax_masked_values(logits: &Tensor, mask: &[bool], axis: usize) -> Result<(Tensor, Vec<bool>)> {
    if mask.len() != logits.numel() {
        return Err(Error::Dimension(format!(
            "softmax_masked: mask of {} entries for logits of shape {:?}",
            mask.len(),
            logits.shape()
        )));
    }
    let (outer, len, inner) = axis_split(logits.shape(), axis)?;
    let x = logits.data();
    let mut y = vec![0.0; x.len()];
    let mut empty = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for k in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + k;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                if mask[idx(i)] {
                    max = max.max(x[idx(i)]);
                }
            }
            if max == f64::NEG_INFINITY {
                empty.push(true);
                continue;
            }
            empty.push(false);
            let mut sum = 0.0;
            for i in 0..len {
                if mask[idx(i)] {
                    let e = (x[idx(i)] - max).exp();
                    y[idx(i)] = e;
                    sum += e;
                }
            }
            for i in 0..len {
                if mask[idx(i)] {
                    y[idx(i)] /= sum;
                }
            }
        }
    }
    Ok((Tensor::from_parts(logits.shape().to_vec(), y), empty))
}

impl Tape {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn rows_cols(&self, op: &str, a: Var) -> Result<(usize, usize)> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Dimension(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push_op(out, &[a, b], move |g, _, grads| {
            for v in [a, b] {
                if let Some(gv) = grads.acc(v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push_op(out, &[a, b], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = grads.acc(b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push_op(out, &[a, b], move |g, vals, grads| {
            if let Some(ga) = grads.acc(a) {
                for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vals[b.0].data()) {
                    *x += gi * bi;
                }
            }
            if let Some(gb) = grads.acc(b) {
                for ((x, gi), ai) in gb.iter_mut().zip(g).zip(vals[a.0].data()) {
                    *x += gi * ai;
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = Tensor::from_parts(self.shape(a).to_vec(), self.value(a).data().iter().map(|x| x * c).collect());
        self.push_op(out, &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = Tensor::from_parts(self.shape(a).to_vec(), self.value(a).data().iter().map(|x| x + c).collect());
        self.push_op(out, &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        })
    }

    /// `a[..., j] + b[j]`: `b` broadcast over every leading index.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(b).numel();
        let sa = self.shape(a);
        if sa.last() != Some(&n) {
            return Err(dim_err("add_row", sa, self.shape(b)));
        }
        let bd = self.value(b).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push_op(out, &[a, b], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = grads.acc(b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % n] += gi;
                }
            }
        }))
    }

    /// `a[..., j] * b[j]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(b).numel();
        let sa = self.shape(a);
        if sa.last() != Some(&n) {
            return Err(dim_err("mul_row", sa, self.shape(b)));
        }
        let bd = self.value(b).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, x)| x * bd[i % n]).collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push_op(out, &[a, b], move |g, vals, grads| {
            if let Some(ga) = grads.acc(a) {
                let bd = vals[b.0].data();
                for (i, (x, gi)) in ga.iter_mut().zip(g).enumerate() {
                    *x += gi * bd[i % n];
                }
            }
            if let Some(gb) = grads.acc(b) {
                for (i, (gi, ai)) in g.iter().zip(vals[a.0].data()).enumerate() {
                    gb[i % n] += gi * ai;
                }
            }
        }))
    }

    /// `a[i, ...] + b[i]`: `b` has one entry per leading index.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.value(b).numel();
        let sa = self.shape(a);
        if sa.first() != Some(&m) {
            return Err(dim_err("add_col", sa, self.shape(b)));
        }
        let inner = self.value(a).numel() / m.max(1);
        let bd = self.value(b).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, x)| x + bd[i / inner]).collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push_op(out, &[a, b], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = grads.acc(b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i / inner] += gi;
                }
            }
        }))
    }

    /// `a[i, ...] * b[i]`.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.value(b).numel();
        let sa = self.shape(a);
        if sa.first() != Some(&m) {
            return Err(dim_err("mul_col", sa, self.shape(b)));
        }
        let inner = self.value(a).numel() / m.max(1);
        let bd = self.value(b).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, x)| x * bd[i / inner]).collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.push_op(out, &[a, b], move |g, vals, grads| {
            if let Some(ga) = grads.acc(a) {
                let bd = vals[b.0].data();
                for (i, (x, gi)) in ga.iter_mut().zip(g).enumerate() {
                    *x += gi * bd[i / inner];
                }
            }
            if let Some(gb) = grads.acc(b) {
                for (i, (gi, ai)) in g.iter().zip(vals[a.0].data()).enumerate() {
                    gb[i / inner] += gi * ai;
                }
            }
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols("matmul", a)?;
        let (k2, n) = self.rows_cols("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        Ok(self.push_op(out, &[a, b], move |g, vals, grads| {
            if let Some(ga) = grads.acc(a) {
                let bd = vals[b.0].data();
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let br = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = grads.acc(b) {
                let ad = vals[a.0].data();
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                            *o += aip * gv;
                        }
                    }
                }
            }
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rows_cols("transpose", a)?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let out = Tensor::from_parts(vec![n, m], out);
        Ok(self.push_op(out, &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_op(out, &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }))
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    fn unary<F, D>(&mut self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let me = Var(self.len());
        self.push_op(out, &[a], move |g, vals, grads| {
            if let Some(ga) = grads.acc(a) {
                let xs = vals[a.0].data();
                let ys = vals[me.0].data();
                for i in 0..ga.len() {
                    ga[i] += g[i] * df(xs[i], ys[i]);
                }
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, move |x| if x > 0.0 { x } else { slope * x }, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, |x, y| if x > 0.0 { 1.0 } else { y + 1.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(a), axis)?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                for k in 0..inner {
                    out[o * inner + k] += ad[base + k];
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push_op(Tensor::from_parts(shape, out), &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                for o in 0..outer {
                    for i in 0..len {
                        let base = (o * len + i) * inner;
                        for k in 0..inner {
                            ga[base + k] += g[o * inner + k];
                        }
                    }
                }
            }
        }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("mean_axis: axis {axis} out of range")))?;
        if len == 0 {
            return Err(Error::Dimension("mean_axis: empty axis".into()));
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(dim_err("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&p, &len) in parts.iter().zip(&lens) {
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * len * inner..(o + 1) * len * inner];
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let mut shape = base;
        shape[axis] = total;
        let parts_owned = parts.to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, out), parts, move |g, _, grads| {
            let mut offset = 0;
            for (&p, &len) in parts_owned.iter().zip(&lens) {
                if let Some(gp) = grads.acc(p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for (x, y) in gp[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *x += y;
                        }
                    }
                }
                offset += len;
            }
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, full, inner) = axis_split(self.shape(a), axis)?;
        if start + len > full {
            return Err(Error::Dimension(format!(
                "narrow: [{start}, {}) exceeds axis length {full}",
                start + len
            )));
        }
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&ad[s..s + len * inner]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[axis] = len;
        Ok(self.push_op(Tensor::from_parts(shape, out), &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    for (x, y) in ga[s..s + len * inner].iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *x += y;
                    }
                }
            }
        }))
    }

    /// Rows `idx` of `a` viewed as `[rows, inner]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.shape(a)[0];
        let inner = self.value(a).numel() / rows.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("gather_rows: index {bad} >= {rows} rows")));
        }
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&ad[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = idx.len();
        let idx = idx.to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, out), &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in ga[i * inner..(i + 1) * inner].iter_mut().zip(&g[r * inner..(r + 1) * inner]) {
                        *x += y;
                    }
                }
            }
        }))
    }

    /// `out[idx[r]] += a[r]` into `rows` output rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let n = self.shape(a)[0];
        if idx.len() != n {
            return Err(Error::Dimension(format!("scatter_add_rows: {} indices for {n} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("scatter_add_rows: index {bad} >= {rows}")));
        }
        let inner = if n == 0 {
            self.shape(a)[1..].iter().product()
        } else {
            self.value(a).numel() / n
        };
        let ad = self.value(a).data();
        let mut out = vec![0.0; rows * inner];
        for (r, &i) in idx.iter().enumerate() {
            for (x, y) in out[i * inner..(i + 1) * inner].iter_mut().zip(&ad[r * inner..(r + 1) * inner]) {
                *x += y;
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape[0] = rows;
        let idx = idx.to_vec();
        Ok(self.push_op(Tensor::from_parts(shape, out), &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in ga[r * inner..(r + 1) * inner].iter_mut().zip(&g[i * inner..(i + 1) * inner]) {
                        *x += y;
                    }
                }
            }
        }))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.rows_cols("pick", a)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::Dimension(format!("pick: bad indices for shape [{m}, {n}]")));
        }
        let ad = self.value(a).data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| ad[i * n + j]).collect();
        let idx = idx.to_vec();
        Ok(self.push_op(Tensor::from_parts(vec![m], out), &[a], move |g, _, grads| {
            if let Some(ga) = grads.acc(a) {
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * n + j] += g[i];
                }
            }
        }))
    }

    /// Softmax along `axis` over entries where `mask` is true. Returns the
    /// output and one flag per slice marking slices with no unmasked entry.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool], axis: usize) -> Result<(Var, Vec<bool>)> {
        let (y, empty) = softmax_masked_values(self.value(a), mask, axis)?;
        let (outer, len, inner) = axis_split(self.shape(a), axis)?;
        let me = Var(self.len());
        let v = self.push_op(y, &[a], move |g, vals, grads| {
            if let Some(ga) = grads.acc(a) {
                let y = vals[me.0].data();
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + k;
                        let dot: f64 = (0..len).map(|i| y[idx(i)] * g[idx(i)]).sum();
                        for i in 0..len {
                            ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
        });
        Ok((v, empty))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let mask = vec![true; self.value(a).numel()];
        Ok(self.softmax_masked(a, &mask, axis)?.0)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(a), axis)?;
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + k;
                let max = (0..len).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|i| (x[idx(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..len {
                    y[idx(i)] = x[idx(i)] - lse;
                }
            }
        }
        let me = Var(self.len());
        Ok(self.push_op(Tensor::from_parts(self.shape(a).to_vec(), y), &[a], move |g, vals, grads| {
            if let Some(ga) = grads.acc(a) {
                let y = vals[me.0].data();
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + k;
                        let gs: f64 = (0..len).map(|i| g[idx(i)]).sum();
                        for i in 0..len {
                            ga[idx(i)] += g[idx(i)] - y[idx(i)].exp() * gs;
                        }
                    }
                }
            }
        }))
    }

    /// Softmax of `scores[E, H]` over the rows sharing a segment id, per column.
    pub fn segment_softmax(&mut self, scores: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (e, h) = self.rows_cols("segment_softmax", scores)?;
        if seg.len() != e || seg.iter().any(|&s| s >= segments) {
            return Err(Error::Dimension("segment_softmax: bad segment ids".into()));
        }
        let x = self.value(scores).data();
        let mut max = vec![f64::NEG_INFINITY; segments * h];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                max[s * h + c] = max[s * h + c].max(x[r * h + c]);
            }
        }
        let mut y = vec![0.0; e * h];
        let mut sum = vec![0.0; segments * h];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let v = (x[r * h + c] - max[s * h + c]).exp();
                y[r * h + c] = v;
                sum[s * h + c] += v;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                y[r * h + c] /= sum[s * h + c];
            }
        }
        let seg = seg.to_vec();
        let me = Var(self.len());
        Ok(self.push_op(Tensor::from_parts(vec![e, h], y), &[scores], move |g, vals, grads| {
            if let Some(ga) = grads.acc(scores) {
                let y = vals[me.0].data();
                let mut dot = vec![0.0; segments * h];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..h {
                        dot[s * h + c] += y[r * h + c] * g[r * h + c];
                    }
                }
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..h {
                        ga[r * h + c] += y[r * h + c] * (g[r * h + c] - dot[s * h + c]);
                    }
                }
            }
        }))
    }

    /// `x[M, G*d]` with each group of `d` columns scaled by `w[M, G]`.
    pub fn mul_group(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, gd) = self.rows_cols("mul_group", x)?;
        let (m2, groups) = self.rows_cols("mul_group", w)?;
        if m != m2 || groups == 0 || gd % groups != 0 {
            return Err(dim_err("mul_group", self.shape(x), self.shape(w)));
        }
        let d = gd / groups;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let out: Vec<f64> = (0..m * gd).map(|i| xd[i] * wd[(i / gd) * groups + (i % gd) / d]).collect();
        Ok(self.push_op(Tensor::from_parts(vec![m, gd], out), &[x, w], move |g, vals, grads| {
            if let Some(gx) = grads.acc(x) {
                let wd = vals[w.0].data();
                for i in 0..m * gd {
                    gx[i] += g[i] * wd[(i / gd) * groups + (i % gd) / d];
                }
            }
            if let Some(gw) = grads.acc(w) {
                let xd = vals[x.0].data();
                for i in 0..m * gd {
                    gw[(i / gd) * groups + (i % gd) / d] += g[i] * xd[i];
                }
            }
        }))
    }

    /// Sums each group of `d = cols / groups` columns: `[M, G*d] -> [M, G]`.
    pub fn sum_group(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (m, gd) = self.rows_cols("sum_group", x)?;
        if groups == 0 || gd % groups != 0 {
            return Err(Error::Dimension(format!("sum_group: {gd} columns into {groups} groups")));
        }
        let d = gd / groups;
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * groups];
        for i in 0..m * gd {
            out[(i / gd) * groups + (i % gd) / d] += xd[i];
        }
        Ok(self.push_op(Tensor::from_parts(vec![m, groups], out), &[x], move |g, _, grads| {
            if let Some(gx) = grads.acc(x) {
                for i in 0..m * gd {
                    gx[i] += g[(i / gd) * groups + (i % gd) / d];
                }
            }
        }))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.rows_cols("layer_norm", x)?;
        self.normalize_blocks(x, m, n, eps)
    }

    /// Group normalization of `x[C, S]` (no affine): each block of
    /// `C / groups` channels is normalized jointly over all positions.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, s) = self.rows_cols("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group_norm: {c} channels into {groups} groups")));
        }
        self.normalize_blocks(x, groups, c / groups * s, eps)
    }

    fn normalize_blocks(&mut self, x: Var, blocks: usize, size: usize, eps: f64) -> Result<Var> {
        if size == 0 {
            return Err(Error::Dimension("normalization over empty block".into()));
        }
        let xd = self.value(x).data();
        let mut y = vec![0.0; blocks * size];
        let mut inv_std = vec![0.0; blocks];
        for b in 0..blocks {
            let row = &xd[b * size..(b + 1) * size];
            let mean = row.iter().sum::<f64>() / size as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[b] = is;
            for (o, v) in y[b * size..(b + 1) * size].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let me = Var(self.len());
        Ok(self.push_op(Tensor::from_parts(self.shape(x).to_vec(), y), &[x], move |g, vals, grads| {
            if let Some(gx) = grads.acc(x) {
                let y = vals[me.0].data();
                for b in 0..blocks {
                    let r = b * size..(b + 1) * size;
                    let gm = g[r.clone()].iter().sum::<f64>() / size as f64;
                    let gym = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / size as f64;
                    for i in r {
                        gx[i] += inv_std[b] * (g[i] - gm - y[i] * gym);
                    }
                }
            }
        }))
    }

    /// Unfolds `x[C, H, W]` into `[C*k*k, H*W]` columns for a stride-1,
    /// same-size convolution with odd kernel `k`.
    pub fn im2col(&mut self, x: Var, k: usize, pad: PadMode) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dimension(format!("im2col: expected [C,H,W], got {s:?}"))),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("im2col: kernel size {k} must be odd")));
        }
        let r = (k / 2) as isize;
        let hw = h * w;
        // Source index per (column row, pixel), or None for zero padding.
        let mut src: Vec<Option<usize>> = Vec::with_capacity(c * k * k * hw);
        for ch in 0..c {
            for dy in -r..=r {
                for dx in -r..=r {
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let (sy, sx) = (y + dy, xx + dx);
                            let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                            let s = match (inside, pad) {
                                (true, _) => Some((sy as usize, sx as usize)),
                                (false, PadMode::Zero) => None,
                                (false, PadMode::Replicate) => Some((
                                    sy.clamp(0, h as isize - 1) as usize,
                                    sx.clamp(0, w as isize - 1) as usize,
                                )),
                            };
                            src.push(s.map(|(sy, sx)| ch * hw + sy * w + sx));
                        }
                    }
                }
            }
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = src.iter().map(|s| s.map_or(0.0, |i| xd[i])).collect();
        Ok(self.push_op(Tensor::from_parts(vec![c * k * k, hw], out), &[x], move |g, _, grads| {
            if let Some(gx) = grads.acc(x) {
                for (gi, s) in g.iter().zip(&src) {
                    if let Some(i) = s {
                        gx[*i] += gi;
                    }
                }
            }
        }))
    }

    /// Bilinear lookup of `feat[C, H, W]` at continuous pixel coordinates
    /// `coords[S, 2]` (x, y) where pixel `(i, j)` has its center at
    /// `(j + 0.5, i + 0.5)`. Taps outside the map read zero. Output `[S, C]`.
    pub fn bilinear_sample(&mut self, feat: Var, coords: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(feat) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dimension(format!("bilinear_sample: expected [C,H,W], got {s:?}"))),
        };
        let (s, two) = self.rows_cols("bilinear_sample", coords)?;
        if two != 2 {
            return Err(dim_err("bilinear_sample", self.shape(feat), self.shape(coords)));
        }
        let fd = self.value(feat).data();
        let cd = self.value(coords).data();
        let mut out = vec![0.0; s * c];
        for i in 0..s {
            let taps = bilinear_taps(cd[2 * i], cd[2 * i + 1], h, w);
            for (pix, wt, _, _) in taps.iter().flatten() {
                for ch in 0..c {
                    out[i * c + ch] += wt * fd[ch * h * w + pix];
                }
            }
        }
        Ok(self.push_op(Tensor::from_parts(vec![s, c], out), &[feat, coords], move |g, vals, grads| {
            let cd = vals[coords.0].data();
            if let Some(gf) = grads.acc(feat) {
                for i in 0..s {
                    for (pix, wt, _, _) in bilinear_taps(cd[2 * i], cd[2 * i + 1], h, w).iter().flatten() {
                        for ch in 0..c {
                            gf[ch * h * w + pix] += wt * g[i * c + ch];
                        }
                    }
                }
            }
            if let Some(gc) = grads.acc(coords) {
                let fd = vals[feat.0].data();
                for i in 0..s {
                    let (mut gxs, mut gys) = (0.0, 0.0);
                    for (pix, _, dwx, dwy) in bilinear_taps(cd[2 * i], cd[2 * i + 1], h, w).iter().flatten() {
                        let dot: f64 = (0..c).map(|ch| g[i * c + ch] * fd[ch * h * w + pix]).sum();
                        gxs += dwx * dot;
                        gys += dwy * dot;
                    }
                    gc[2 * i] += gxs;
                    gc[2 * i + 1] += gys;
                }
            }
        }))
    }
}

/// Up to four in-bounds taps `(pixel, weight, dweight/dx, dweight/dy)`.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Option<(usize, f64, f64, f64)>; 4] {
    let mut taps = [None; 4];
    if !x.is_finite() || !y.is_finite() {
        return taps;
    }
    let (xs, ys) = (x - 0.5, y - 0.5);
    let (x0, y0) = (xs.floor(), ys.floor());
    let (fx, fy) = (xs - x0, ys - y0);
    let corners = [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1.0, 1.0, fx * fy, fy, fx),
    ];
    for (t, (ox, oy, wt, dx, dy)) in taps.iter_mut().zip(corners) {
        let (cx, cy) = (x0 + ox, y0 + oy);
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            *t = Some((cy as usize * w + cx as usize, wt, dx, dy));
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_product() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(mat(&[&[5.0], &[6.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let i = t.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let z = t.constant(Tensor::zeros(&[2, 2]));
        let x = t.constant(mat(&[&[0.3, -1.0, 2.0], &[4.0, 5.5, -6.0]]));
        let ix = t.matmul(i, x).unwrap();
        assert_eq!(t.value(ix), t.value(x));
        let zx = t.matmul(z, x).unwrap();
        assert!(t.value(zx).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_masked_examples() {
        let l = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let (y, _) = softmax_masked_values(&l, &[true, true], 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let l = Tensor::new(vec![3], vec![1.0, 2.0, 99.0]).unwrap();
        let (y, empty) = softmax_masked_values(&l, &[true, true, false], 0).unwrap();
        let e = std::f64::consts::E;
        assert!((y.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((y.data()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(empty, vec![false]);

        let l = Tensor::new(vec![3], vec![-4.0, 7.0, 2.0]).unwrap();
        let (y, _) = softmax_masked_values(&l, &[false, true, false], 0).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_slice_is_flagged_zero() {
        let l = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, empty) = softmax_masked_values(&l, &[true, true, false, false], 1).unwrap();
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
        assert_eq!(empty, vec![false, true]);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let l = Tensor::new(vec![2, 2], vec![0.0, 5.0, 0.0, 5.0]).unwrap();
        let (y, _) = softmax_masked_values(&l, &[true; 4], 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn bilinear_lattice_point_and_midpoint() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let c = t.constant(mat(&[&[1.5, 0.5], &[1.0, 1.0]]));
        let s = t.bilinear_sample(f, c).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 1.5]);
    }

    #[test]
    fn bilinear_outside_reads_zero() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::full(&[1, 2, 2], 4.0));
        let c = t.constant(mat(&[&[-3.0, -3.0], &[0.0, 1.0]]));
        let s = t.bilinear_sample(f, c).unwrap();
        assert_eq!(t.value(s).data()[0], 0.0);
        // half the taps fall off the left edge
        assert!((t.value(s).data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn im2col_replicate_keeps_constants() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 3, 4], 2.0));
        let cols = t.im2col(x, 3, PadMode::Replicate).unwrap();
        assert!(t.value(cols).data().iter().all(|&v| v == 2.0));
        let cols = t.im2col(x, 3, PadMode::Zero).unwrap();
        assert_eq!(t.value(cols).at2(0, 0), 0.0);
        assert_eq!(t.value(cols).at2(4, 0), 2.0);
    }

    #[test]
    fn group_norm_statistics() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let x = t.constant(Tensor::new(vec![4, 6], data).unwrap());
        let y = t.group_norm(x, 2, 0.0).unwrap();
        for g in 0..2 {
            let block = &t.value(y).data()[g * 12..(g + 1) * 12];
            let mean = block.iter().sum::<f64>() / 12.0;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }
}
