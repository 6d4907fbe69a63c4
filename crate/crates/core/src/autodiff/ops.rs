use super::{BackwardCtx, BackwardRule, Var};
use crate::error::{shape_err, Error, Result};
use crate::fft;
use crate::tensor::{self, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, silu_grad, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

macro_rules! rule {
    ($ty:ident, $name:literal, |$ctx:ident| $body:expr) => {
        struct $ty;
        impl BackwardRule for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn backward(&self, $ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
                $body
            }
        }
    };
}

rule!(AddRule, "add", |ctx| vec![
    Some(ctx.grad.to_vec()),
    Some(ctx.grad.to_vec())
]);

rule!(SubRule, "sub", |ctx| vec![
    Some(ctx.grad.to_vec()),
    Some(ctx.grad.iter().map(|g| -g).collect())
]);

rule!(MulRule, "mul", |ctx| {
    let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
    vec![
        ctx.needs[0].then(|| zip_map(ctx.grad, b, |g, y| g * y)),
        ctx.needs[1].then(|| zip_map(ctx.grad, a, |g, x| g * x)),
    ]
});

rule!(AddRowRule, "add_row", |ctx| {
    let d = ctx.inputs[1].numel();
    let mut row = vec![0.0; d];
    for chunk in ctx.grad.chunks(d) {
        row.iter_mut().zip(chunk).for_each(|(r, g)| *r += g);
    }
    vec![Some(ctx.grad.to_vec()), Some(row)]
});

rule!(MulRowRule, "mul_row", |ctx| {
    let (x, row) = (ctx.inputs[0].data(), ctx.inputs[1].data());
    let d = row.len();
    let dx = ctx.needs[0].then(|| {
        ctx.grad
            .chunks(d)
            .flat_map(|g| g.iter().zip(row).map(|(a, b)| a * b))
            .collect()
    });
    let drow = ctx.needs[1].then(|| {
        let mut acc = vec![0.0; d];
        for (g, xs) in ctx.grad.chunks(d).zip(x.chunks(d)) {
            for j in 0..d {
                acc[j] += g[j] * xs[j];
            }
        }
        acc
    });
    vec![dx, drow]
});

rule!(MulColRule, "mul_col", |ctx| {
    let (x, col) = (ctx.inputs[0].data(), ctx.inputs[1].data());
    let n = col.len();
    let d = if n == 0 { 0 } else { x.len() / n };
    let dx = ctx.needs[0].then(|| {
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = ctx.grad[i * d + j] * col[i];
            }
        }
        out
    });
    let dcol = ctx.needs[1].then(|| {
        (0..n)
            .map(|i| tensor::dot(&ctx.grad[i * d..(i + 1) * d], &x[i * d..(i + 1) * d]))
            .collect()
    });
    vec![dx, dcol]
});

struct ScaleRule(f64);
impl BackwardRule for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

rule!(MulScalarRule, "mul_scalar", |ctx| {
    let (x, s) = (ctx.inputs[0].data(), ctx.inputs[1].data()[0]);
    vec![
        ctx.needs[0].then(|| ctx.grad.iter().map(|g| g * s).collect()),
        ctx.needs[1].then(|| vec![tensor::dot(ctx.grad, x)]),
    ]
});

rule!(ExpRule, "exp", |ctx| vec![Some(zip_map(
    ctx.grad,
    ctx.output.data(),
    |g, y| g * y
))]);

rule!(SigmoidRule, "sigmoid", |ctx| vec![Some(zip_map(
    ctx.grad,
    ctx.output.data(),
    |g, y| g * y * (1.0 - y)
))]);

rule!(SiluRule, "silu", |ctx| vec![Some(zip_map(
    ctx.grad,
    ctx.inputs[0].data(),
    |g, x| g * silu_grad(x)
))]);

struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}
impl BackwardRule for MatMulRule {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let da = ctx.needs[0].then(|| {
            let mut da = vec![0.0; self.m * self.k];
            gemm_a_bt_acc(ctx.grad, b, &mut da, self.m, self.n, self.k);
            da
        });
        let db = ctx.needs[1].then(|| {
            let mut db = vec![0.0; self.k * self.n];
            gemm_at_b_acc(a, ctx.grad, &mut db, self.m, self.k, self.n);
            db
        });
        vec![da, db]
    }
}

rule!(SumRule, "sum", |ctx| vec![Some(vec![
    ctx.grad[0];
    ctx.inputs[0].numel()
])]);

rule!(MeanRowsRule, "mean_rows", |ctx| {
    let (rows, cols) = ctx.inputs[0].rows_cols();
    let scale = 1.0 / rows.max(1) as f64;
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        out.extend(ctx.grad.iter().map(|g| g * scale));
    }
    vec![Some(out)]
});

rule!(ReshapeRule, "reshape", |ctx| vec![Some(ctx.grad.to_vec())]);

rule!(SoftmaxRule, "softmax", |ctx| {
    let y = ctx.output.data();
    let (_, cols) = ctx.output.rows_cols();
    let mut out = vec![0.0; y.len()];
    if cols > 0 {
        for ((o, ys), gs) in out
            .chunks_mut(cols)
            .zip(y.chunks(cols))
            .zip(ctx.grad.chunks(cols))
        {
            let inner = tensor::dot(ys, gs);
            for j in 0..cols {
                o[j] = ys[j] * (gs[j] - inner);
            }
        }
    }
    vec![Some(out)]
});

struct SelectColsRule(Vec<usize>);
impl BackwardRule for SelectColsRule {
    fn name(&self) -> &'static str {
        "select_cols"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (_, cols) = ctx.inputs[0].rows_cols();
        let mut out = vec![0.0; ctx.inputs[0].numel()];
        for (i, &j) in self.0.iter().enumerate() {
            out[i * cols + j] = ctx.grad[i];
        }
        vec![Some(out)]
    }
}

rule!(CausalConvRule, "causal_conv", |ctx| {
    let (n, d) = (ctx.output.shape()[0], ctx.output.shape()[1]);
    let (k, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
    vec![
        ctx.needs[0].then(|| fft::causal_conv_adjoint(ctx.grad, s, n, d)),
        ctx.needs[1].then(|| fft::causal_conv_adjoint(ctx.grad, k, n, d)),
    ]
});

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, rule: Box<dyn BackwardRule>) -> Var<'t> {
        self.tape.record(value, &[self], rule)
    }

    fn binary(self, other: Var<'t>, value: Tensor, rule: Box<dyn BackwardRule>) -> Var<'t> {
        self.tape.record(value, &[self, other], rule)
    }

    fn elementwise(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape(op, &a, &b)?;
            Tensor::from_parts(a.shape().to_vec(), zip_map(a.data(), b.data(), f))
        };
        Ok(self.binary(other, value, rule))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Box::new(AddRule))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Box::new(SubRule))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Box::new(MulRule))
    }

    fn check_row(self, row: Var<'t>, op: &'static str) -> Result<usize> {
        let (x, r) = (self.value(), row.value());
        let (_, cols) = x.rows_cols();
        if r.ndim() != 1 || r.numel() != cols {
            return Err(shape_err(
                op,
                format!("row {:?} vs input {:?}", r.shape(), x.shape()),
            ));
        }
        Ok(cols)
    }

    /// Adds a `[d]` row to every row of a `[.., d]` tensor.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let cols = self.check_row(row, "add_row")?;
        let value = {
            let (x, r) = (self.value(), row.value());
            let mut data = x.data().to_vec();
            for c in data.chunks_mut(cols.max(1)) {
                c.iter_mut().zip(r.data()).for_each(|(a, b)| *a += b);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.binary(row, value, Box::new(AddRowRule)))
    }

    /// Multiplies every row of a `[.., d]` tensor elementwise by a `[d]` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let cols = self.check_row(row, "mul_row")?;
        let value = {
            let (x, r) = (self.value(), row.value());
            let data = x
                .data()
                .chunks(cols.max(1))
                .flat_map(|c| c.iter().zip(r.data()).map(|(a, b)| a * b))
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.binary(row, value, Box::new(MulRowRule)))
    }

    /// Scales row `i` of an `[n, d]` tensor by `col[i]`.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, c) = (self.value(), col.value());
            if x.ndim() != 2 || c.ndim() != 1 || c.numel() != x.shape()[0] {
                return Err(shape_err(
                    "mul_col",
                    format!("col {:?} vs input {:?}", c.shape(), x.shape()),
                ));
            }
            let d = x.shape()[1];
            let mut data = x.data().to_vec();
            for (i, &ci) in c.data().iter().enumerate() {
                data[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= ci);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.binary(col, value, Box::new(MulColRule)))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let value = self.value().map(|x| x * k);
        self.unary(value, Box::new(ScaleRule(k)))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiplies by a single-element tensor that may itself carry a gradient.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, sv) = (self.value(), s.value());
            if sv.numel() != 1 {
                return Err(shape_err(
                    "mul_scalar",
                    format!("scalar shape {:?}", sv.shape()),
                ));
            }
            let k = sv.data()[0];
            x.map(|v| v * k)
        };
        Ok(self.binary(s, value, Box::new(MulScalarRule)))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        self.unary(value, Box::new(ExpRule))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(tensor::sigmoid);
        self.unary(value, Box::new(SigmoidRule))
    }

    pub fn silu(self) -> Var<'t> {
        let value = self.value().map(tensor::silu);
        self.unary(value, Box::new(SiluRule))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, rule) = {
            let (a, b) = (self.value(), other.value());
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut out, m, k, n);
            (Tensor::from_parts(vec![m, n], out), MatMulRule { m, k, n })
        };
        Ok(self.binary(other, value, Box::new(rule)))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Box::new(SumRule))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean over the leading axis of an `[n, d]` tensor, giving `[d]`.
    pub fn mean_rows(self) -> Var<'t> {
        let value = {
            let x = self.value();
            let (rows, cols) = x.rows_cols();
            let mut acc = vec![0.0; cols];
            for r in 0..rows {
                acc.iter_mut().zip(x.row(r)).for_each(|(a, v)| *a += v);
            }
            let scale = 1.0 / rows.max(1) as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            Tensor::vector(acc)
        };
        self.unary(value, Box::new(MeanRowsRule))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(value, Box::new(ReshapeRule)))
    }

    pub fn softmax_lastdim(self) -> Result<Var<'t>> {
        let value = tensor::softmax_lastdim(&self.value())?;
        Ok(self.unary(value, Box::new(SoftmaxRule)))
    }

    /// Picks `x[i, index[i]]` from an `[n, k]` tensor.
    pub fn select_cols(self, index: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (rows, cols) = x.rows_cols();
            if x.ndim() != 2 || rows != index.len() || index.iter().any(|&j| j >= cols) {
                return Err(shape_err(
                    "select_cols",
                    format!("index of len {} into {:?}", index.len(), x.shape()),
                ));
            }
            Tensor::vector(
                index
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| x.row(i)[j])
                    .collect(),
            )
        };
        Ok(self.unary(value, Box::new(SelectColsRule(index.to_vec()))))
    }

    /// Per-channel causal convolution (`self` is the kernel).
    pub fn causal_convolve(self, signal: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (k, s) = (self.value(), signal.value());
            let (n, d) = fft::validate_conv(&k, &s)?;
            Tensor::from_parts(vec![n, d], fft::causal_conv_raw(k.data(), s.data(), n, d))
        };
        Ok(self.binary(signal, value, Box::new(CausalConvRule)))
    }
}

/// Row-wise layer normalisation with learned gain and bias.
pub struct LayerNorm {
    /// Per-row `(mean, inv_std)` saved by the forward pass.
    stats: Vec<(f64, f64)>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, f64, f64) {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        let out = x
            .iter()
            .zip(gain.iter().zip(bias))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect();
        (out, mean, inv)
    }

    pub fn apply<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (value, stats) = {
            let (xv, g, b) = (x.value(), gain.value(), bias.value());
            let (rows, cols) = xv.rows_cols();
            if g.numel() != cols || b.numel() != cols {
                return Err(shape_err(
                    "layer_norm",
                    "gain/bias length differs from last dim",
                ));
            }
            let mut data = Vec::with_capacity(xv.numel());
            let mut stats = Vec::with_capacity(rows);
            for r in 0..rows {
                let (out, mean, inv) = Self::row(xv.row(r), g.data(), b.data(), Self::EPS);
                data.extend(out);
                stats.push((mean, inv));
            }
            (Tensor::from_parts(xv.shape().to_vec(), data), stats)
        };
        let rule = LayerNorm { stats };
        Ok(x.tape.record(value, &[x, gain, bias], Box::new(rule)))
    }
}

impl BackwardRule for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (x, gain) = (ctx.inputs[0], ctx.inputs[1].data());
        let (rows, cols) = x.rows_cols();
        let mut dx = vec![0.0; x.numel()];
        let mut dg = vec![0.0; cols];
        let mut db = vec![0.0; cols];
        let d = cols as f64;
        for r in 0..rows {
            let (mean, inv) = self.stats[r];
            let xs = x.row(r);
            let gs = &ctx.grad[r * cols..(r + 1) * cols];
            let mut sum_gh = 0.0;
            let mut sum_gh_xhat = 0.0;
            for j in 0..cols {
                let xhat = (xs[j] - mean) * inv;
                let gh = gs[j] * gain[j];
                sum_gh += gh;
                sum_gh_xhat += gh * xhat;
                dg[j] += gs[j] * xhat;
                db[j] += gs[j];
            }
            for j in 0..cols {
                let xhat = (xs[j] - mean) * inv;
                let gh = gs[j] * gain[j];
                dx[r * cols + j] = inv * (gh - sum_gh / d - xhat * sum_gh_xhat / d);
            }
        }
        vec![Some(dx), Some(dg), Some(db)]
    }
}

/// `g * sqrt(d) * x / ||x||` per row with a single learned scale `g`.
pub struct ScaleNorm {
    norms: Vec<f64>,
}

impl ScaleNorm {
    pub const EPS: f64 = 1e-5;

    pub fn row(x: &[f64], g: f64) -> (Vec<f64>, f64) {
        let norm = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + Self::EPS).sqrt();
        (x.iter().map(|v| g * v / norm).collect(), norm)
    }

    pub fn apply<'t>(x: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
        let (value, norms) = {
            let (xv, g) = (x.value(), scale.value());
            if g.numel() != 1 {
                return Err(shape_err("scale_norm", "scale must have one element"));
            }
            let (rows, _) = xv.rows_cols();
            let mut data = Vec::with_capacity(xv.numel());
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let (out, norm) = Self::row(xv.row(r), g.data()[0]);
                data.extend(out);
                norms.push(norm);
            }
            (Tensor::from_parts(xv.shape().to_vec(), data), norms)
        };
        Ok(x.tape
            .record(value, &[x, scale], Box::new(ScaleNorm { norms })))
    }
}

impl BackwardRule for ScaleNorm {
    fn name(&self) -> &'static str {
        "scale_norm"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0];
        let g = ctx.inputs[1].data()[0];
        let (rows, cols) = x.rows_cols();
        let mut dx = vec![0.0; x.numel()];
        let mut dg = 0.0;
        for r in 0..rows {
            let norm = self.norms[r];
            let xs = x.row(r);
            let gs = &ctx.grad[r * cols..(r + 1) * cols];
            let gx = tensor::dot(gs, xs);
            dg += gx / norm;
            let coef = gx / (norm * norm * norm * cols as f64);
            for j in 0..cols {
                dx[r * cols + j] = g * (gs[j] / norm - xs[j] * coef);
            }
        }
        vec![Some(dx), Some(vec![dg])]
    }
}

/// Row lookup into an embedding table.
pub struct Embedding {
    ids: Vec<usize>,
}

impl Embedding {
    pub fn apply<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let t = table.value();
            if t.ndim() != 2 {
                return Err(shape_err("embedding", "table must be [vocab, d]"));
            }
            let vocab = t.shape()[0];
            if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
                return Err(Error::VocabOverflow { id, vocab });
            }
            let d = t.shape()[1];
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                data.extend_from_slice(t.row(id));
            }
            Tensor::from_parts(vec![ids.len(), d], data)
        };
        Ok(table
            .tape
            .record(value, &[table], Box::new(Embedding { ids: ids.to_vec() })))
    }
}

impl BackwardRule for Embedding {
    fn name(&self) -> &'static str {
        "embedding"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let d = ctx.inputs[0].shape()[1];
        let mut dt = vec![0.0; ctx.inputs[0].numel()];
        for (i, &id) in self.ids.iter().enumerate() {
            dt[id * d..(id + 1) * d]
                .iter_mut()
                .zip(&ctx.grad[i * d..(i + 1) * d])
                .for_each(|(a, g)| *a += g);
        }
        vec![Some(dt)]
    }
}

/// Mean negative log-likelihood over the rows selected by a mask.
pub struct CrossEntropy {
    targets: Vec<usize>,
    mask: Vec<bool>,
    probs: Vec<f64>,
    count: usize,
}

impl CrossEntropy {
    /// `logits` is `[n, classes]`; rows with `mask[i] == false` are ignored.
    pub fn apply<'t>(logits: Var<'t>, targets: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let (value, rule) = {
            let l = logits.value();
            let (rows, cols) = l.rows_cols();
            if l.ndim() != 2 || targets.len() != rows || mask.len() != rows {
                return Err(shape_err(
                    "cross_entropy",
                    format!("logits {:?}, {} targets", l.shape(), targets.len()),
                ));
            }
            if let Some(&t) = targets
                .iter()
                .zip(mask)
                .find(|(&t, &m)| m && t >= cols)
                .map(|p| p.0)
            {
                return Err(Error::VocabOverflow { id: t, vocab: cols });
            }
            let probs = tensor::softmax_lastdim(&l)?.into_data();
            let count = mask.iter().filter(|&&m| m).count();
            let mut loss = 0.0;
            for i in (0..rows).filter(|&i| mask[i]) {
                let row = l.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[targets[i]];
            }
            let loss = if count == 0 { 0.0 } else { loss / count as f64 };
            (
                Tensor::scalar(loss),
                CrossEntropy {
                    targets: targets.to_vec(),
                    mask: mask.to_vec(),
                    probs,
                    count,
                },
            )
        };
        Ok(logits.tape.record(value, &[logits], Box::new(rule)))
    }
}

impl BackwardRule for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (rows, cols) = ctx.inputs[0].rows_cols();
        let mut d = vec![0.0; rows * cols];
        if self.count > 0 {
            let scale = ctx.grad[0] / self.count as f64;
            for i in (0..rows).filter(|&i| self.mask[i]) {
                for j in 0..cols {
                    d[i * cols + j] = self.probs[i * cols + j] * scale;
                }
                d[i * cols + self.targets[i]] -= scale;
            }
        }
        vec![Some(d)]
    }
}
