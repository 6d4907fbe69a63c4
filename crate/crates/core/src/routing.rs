//! Sparse modular activation: per-timestep activation decisions, the
//! compress/extract data movement that lets a module run only on activated
//! timesteps, and confidence-weighted aggregation of module outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardCtx, BackwardRule, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::param_group;
use crate::tensor::{self, Tensor};

param_group! {
    /// Two-way latent configurator. `weight` holds `w0` and `w1` as its two
    /// columns, `bias` holds `(b0, b1)`, and the temperature is stored as its log.
    pub struct ConfiguratorParams {
        weight,
        bias,
        log_tau,
    }
}

impl ConfiguratorParams {
    /// Temperature starts at `alpha_init * sqrt(d_m)`.
    pub fn init<R: Rng + ?Sized>(d_m: usize, alpha_init: f64, rng: &mut R) -> Result<Self> {
        if d_m == 0 || alpha_init <= 0.0 || !alpha_init.is_finite() {
            return Err(Error::Config(format!(
                "configurator needs d_m > 0 and alpha > 0 (got {d_m}, {alpha_init})"
            )));
        }
        Ok(ConfiguratorParams {
            weight: Tensor::randn(&[d_m, 2], 1.0 / (d_m as f64).sqrt(), rng),
            bias: Tensor::zeros(&[2]),
            log_tau: Tensor::scalar((alpha_init * (d_m as f64).sqrt()).ln()),
        })
    }

    /// Builds parameters from explicit `w0, w1, b0, b1, tau`.
    pub fn from_parts(w0: &[f64], w1: &[f64], b0: f64, b1: f64, tau: f64) -> Result<Self> {
        if w0.len() != w1.len() {
            return Err(shape_err(
                "ConfiguratorParams",
                "w0 and w1 differ in length",
            ));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let weight = w0.iter().zip(w1).flat_map(|(&a, &b)| [a, b]).collect();
        Ok(ConfiguratorParams {
            weight: Tensor::new(vec![w0.len(), 2], weight)?,
            bias: Tensor::vector(vec![b0, b1]),
            log_tau: Tensor::scalar(tau.ln()),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    pub fn d_m(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Overrides for the learned decisions, used for ablations and benchmarks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    /// Activate every timestep.
    Always,
    /// Never activate (pure SSM layer).
    Never,
    /// Deterministic evenly spaced activations at the given rate.
    Rate(f64),
}

impl GateMode {
    /// Forced decision at timestep `t`, or `None` to use the configurator.
    pub fn forced(&self, t: usize) -> Option<bool> {
        match *self {
            GateMode::Learned => None,
            GateMode::Always => Some(true),
            GateMode::Never => Some(false),
            GateMode::Rate(p) => {
                let p = p.clamp(0.0, 1.0);
                Some(((t + 1) as f64 * p).floor() > (t as f64 * p).floor())
            }
        }
    }
}

/// Per-timestep decisions `a`, confidences `c`, and probabilities `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionMask {
    pub a: Vec<bool>,
    pub c: Vec<f64>,
    pub p: Vec<[f64; 2]>,
}

impl DecisionMask {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.a.iter().filter(|&&x| x).count()
    }

    /// Smallest `|p0 - 0.5|` over all timesteps; decisions cannot flip under
    /// perturbations that move probabilities by less than this.
    pub fn margin(&self) -> f64 {
        self.p
            .iter()
            .map(|p| (p[0] - 0.5).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Mask from explicit decisions with unit confidence.
    pub fn hard(a: Vec<bool>) -> Self {
        let p = a
            .iter()
            .map(|&x| if x { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        DecisionMask {
            c: vec![1.0; a.len()],
            a,
            p,
        }
    }
}

/// Decision and confidence from a two-way probability. Ties activate.
pub fn decide(p: [f64; 2]) -> (bool, f64) {
    if p[1] >= p[0] {
        (true, p[1])
    } else {
        (false, p[0])
    }
}

/// Tempered two-way softmax for one hidden row.
pub fn configurator_row(h: &[f64], params: &ConfiguratorParams) -> [f64; 2] {
    let logits = tensor::vec_mat(h, &params.weight, Some(params.bias.data()));
    let inv_tau = (-params.log_tau.data()[0]).exp();
    let mut p = [logits[0] * inv_tau, logits[1] * inv_tau];
    tensor::softmax_in_place(&mut p);
    p
}

/// `p_i[t] = softmax_i((H[t] . w_i + b_i) / tau)`, `a = argmax`, `c = max`.
pub fn configurator_forward(h: &Tensor, params: &ConfiguratorParams) -> Result<DecisionMask> {
    if h.ndim() != 2 || h.shape()[1] != params.d_m() {
        return Err(shape_err(
            "configurator_forward",
            format!("hidden {:?} vs d_m {}", h.shape(), params.d_m()),
        ));
    }
    let n = h.shape()[0];
    let mut mask = DecisionMask {
        a: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
    };
    for t in 0..n {
        let p = configurator_row(h.row(t), params);
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::NonFinite("configurator logits"));
        }
        let (a, c) = decide(p);
        mask.a.push(a);
        mask.c.push(c);
        mask.p.push(p);
    }
    Ok(mask)
}

/// Differentiable configurator. Returns the mask and the confidence vector as
/// a tape variable; the gradient reaches the parameters only through `c`.
pub fn configurator_on_tape<'t>(
    h: Var<'t>,
    params: &ConfiguratorParams<Var<'t>>,
    gate: GateMode,
) -> Result<(DecisionMask, Var<'t>)> {
    let logits = h.matmul(params.weight)?.add_row(params.bias)?;
    let inv_tau = params.log_tau.neg().exp();
    let probs = logits.mul_scalar(inv_tau)?.softmax_lastdim()?;
    let (mask, index) = {
        let pv = probs.value();
        let n = pv.shape()[0];
        if !pv.is_finite() {
            return Err(Error::NonFinite("configurator logits"));
        }
        let mut mask = DecisionMask {
            a: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
            p: Vec::with_capacity(n),
        };
        let mut index = Vec::with_capacity(n);
        for t in 0..n {
            let p = [pv.row(t)[0], pv.row(t)[1]];
            let (learned, _) = decide(p);
            let a = gate.forced(t).unwrap_or(learned);
            let sel = usize::from(a);
            mask.a.push(a);
            mask.c.push(p[sel]);
            mask.p.push(p);
            index.push(sel);
        }
        (mask, index)
    };
    let c = probs.select_cols(&index)?;
    Ok((mask, c))
}

/// Index map shared by compress and extract for one batch row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingPlan {
    /// `a[t] * (number of activations in 0..=t)`; zero for inactive rows.
    pub index_q: Vec<usize>,
    /// Number of activated timesteps in this row.
    pub r: usize,
    /// Compressed length shared by the batch (max `r`).
    pub pad_len: usize,
}

impl RoutingPlan {
    pub fn new(a: &[bool], pad_len: usize) -> Self {
        let mut running = 0;
        let index_q = a
            .iter()
            .map(|&on| {
                running += usize::from(on);
                usize::from(on) * running
            })
            .collect();
        RoutingPlan {
            index_q,
            r: running,
            pad_len: pad_len.max(running),
        }
    }

    pub fn n(&self) -> usize {
        self.index_q.len()
    }

    /// Original positions of activated timesteps, in order.
    pub fn positions(&self) -> Vec<usize> {
        self.index_q
            .iter()
            .enumerate()
            .filter(|(_, &q)| q > 0)
            .map(|(t, _)| t)
            .collect()
    }
}

/// Builds one plan per batch row with the batch-max compressed length.
pub fn plan_batch(masks: &[Vec<bool>]) -> Vec<RoutingPlan> {
    let pad_len = masks
        .iter()
        .map(|a| a.iter().filter(|&&x| x).count())
        .max()
        .unwrap_or(0);
    masks.iter().map(|a| RoutingPlan::new(a, pad_len)).collect()
}

fn binary_mask(a: &Tensor) -> Result<Vec<Vec<bool>>> {
    if a.ndim() != 2 {
        return Err(shape_err(
            "compress",
            format!("mask must be [B, n], got {:?}", a.shape()),
        ));
    }
    let (b, n) = (a.shape()[0], a.shape()[1]);
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let mut row = Vec::with_capacity(n);
        for (t, &v) in a.row(i).iter().enumerate() {
            if v == 1.0 {
                row.push(true);
            } else if v == 0.0 {
                row.push(false);
            } else {
                return Err(Error::NonBinaryMask {
                    index: i * n + t,
                    value: v,
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn batch_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(shape_err(
            op,
            format!("expected [B, len, d], got {:?}", x.shape()),
        ));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Scatter of `[B, n, d]` rows into `[B, pad_len, d]`: each row goes to slot
/// `index_q[t]` of a `pad_len + 1` buffer whose slot 0 absorbs inactive rows,
/// then slot 0 is dropped.
pub(crate) fn compress_raw(h: &[f64], plans: &[RoutingPlan], d: usize) -> Vec<f64> {
    let pad_len = plans.first().map_or(0, |p| p.pad_len);
    let mut out = Vec::with_capacity(plans.len() * pad_len * d);
    let mut buffer = vec![0.0; (pad_len + 1) * d];
    for (b, plan) in plans.iter().enumerate() {
        buffer.iter_mut().for_each(|x| *x = 0.0);
        let n = plan.n();
        for (t, &slot) in plan.index_q.iter().enumerate() {
            let src = &h[(b * n + t) * d..(b * n + t + 1) * d];
            buffer[slot * d..(slot + 1) * d].copy_from_slice(src);
        }
        out.extend_from_slice(&buffer[d..]);
    }
    out
}

/// Gather of `[B, pad_len, d]` back to `[B, n, d]`: prepend a zero row and
/// read row `index_q[t]`.
pub(crate) fn extract_raw(yc: &[f64], plans: &[RoutingPlan], d: usize) -> Vec<f64> {
    let pad_len = plans.first().map_or(0, |p| p.pad_len);
    let total: usize = plans.iter().map(|p| p.n()).sum();
    let mut out = Vec::with_capacity(total * d);
    let mut padded = vec![0.0; (pad_len + 1) * d];
    for (b, plan) in plans.iter().enumerate() {
        padded[d..].copy_from_slice(&yc[b * pad_len * d..(b + 1) * pad_len * d]);
        for &slot in &plan.index_q {
            out.extend_from_slice(&padded[slot * d..(slot + 1) * d]);
        }
    }
    out
}

fn check_plans(plans: &[RoutingPlan], b: usize, op: &'static str) -> Result<()> {
    if plans.len() != b {
        return Err(shape_err(
            op,
            format!("{} plans for batch of {b}", plans.len()),
        ));
    }
    let pad = plans.first().map_or(0, |p| p.pad_len);
    if plans.iter().any(|p| p.pad_len != pad || p.r > p.pad_len) {
        return Err(shape_err(op, "plans disagree on pad_len"));
    }
    Ok(())
}

/// Compresses `H: [B, n, d]` under the binary mask `a: [B, n]`.
pub fn compress(h: &Tensor, a: &Tensor) -> Result<(Tensor, Vec<RoutingPlan>)> {
    let (b, n, d) = batch_dims(h, "compress")?;
    let masks = binary_mask(a)?;
    if masks.len() != b || masks.iter().any(|m| m.len() != n) {
        return Err(shape_err(
            "compress",
            format!("mask {:?} vs hidden {:?}", a.shape(), h.shape()),
        ));
    }
    let plans = plan_batch(&masks);
    let pad_len = plans.first().map_or(0, |p| p.pad_len);
    let data = compress_raw(h.data(), &plans, d);
    Ok((Tensor::from_parts(vec![b, pad_len, d], data), plans))
}

/// Inverse data movement of [`compress`]; inactive positions come back as zeros.
pub fn extract(yc: &Tensor, plans: &[RoutingPlan]) -> Result<Tensor> {
    let (b, pad_len, d) = batch_dims(yc, "extract")?;
    check_plans(plans, b, "extract")?;
    if plans.first().is_some_and(|p| p.pad_len != pad_len) {
        return Err(shape_err(
            "extract",
            format!(
                "compressed length {pad_len} vs plan pad_len {}",
                plans[0].pad_len
            ),
        ));
    }
    let n = plans.first().map_or(0, RoutingPlan::n);
    if plans.iter().any(|p| p.n() != n) {
        return Err(shape_err("extract", "plans disagree on sequence length"));
    }
    Ok(Tensor::from_parts(
        vec![b, n, d],
        extract_raw(yc.data(), plans, d),
    ))
}

struct CompressRule(Vec<RoutingPlan>);
impl BackwardRule for CompressRule {
    fn name(&self) -> &'static str {
        "compress"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let d = *ctx.output.shape().last().unwrap_or(&0);
        vec![Some(extract_raw(ctx.grad, &self.0, d))]
    }
}

struct ExtractRule(Vec<RoutingPlan>);
impl BackwardRule for ExtractRule {
    fn name(&self) -> &'static str {
        "extract"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let d = *ctx.output.shape().last().unwrap_or(&0);
        vec![Some(compress_raw(ctx.grad, &self.0, d))]
    }
}

/// Tape version of [`compress`] for precomputed plans. The adjoint of a
/// compress is the matching extract and vice versa.
pub fn compress_on_tape<'t>(h: Var<'t>, plans: &[RoutingPlan]) -> Result<Var<'t>> {
    let value = {
        let hv = h.value();
        let (b, n, d) = batch_dims(&hv, "compress")?;
        check_plans(plans, b, "compress")?;
        if plans.iter().any(|p| p.n() != n) {
            return Err(shape_err(
                "compress",
                "plan length differs from sequence length",
            ));
        }
        let pad_len = plans.first().map_or(0, |p| p.pad_len);
        Tensor::from_parts(vec![b, pad_len, d], compress_raw(hv.data(), plans, d))
    };
    Ok(h.tape()
        .record(value, &[h], Box::new(CompressRule(plans.to_vec()))))
}

pub fn extract_on_tape<'t>(yc: Var<'t>, plans: &[RoutingPlan]) -> Result<Var<'t>> {
    let value = extract(&yc.value(), plans)?;
    Ok(yc
        .tape()
        .record(value, &[yc], Box::new(ExtractRule(plans.to_vec()))))
}

/// `out[t] = sum_i c_i[t] * outputs_i[t]`.
pub fn aggregate(outputs: &[Tensor], masks: &[DecisionMask]) -> Result<Tensor> {
    if outputs.len() != masks.len() || outputs.is_empty() {
        return Err(shape_err(
            "aggregate",
            format!("{} outputs vs {} masks", outputs.len(), masks.len()),
        ));
    }
    let shape = outputs[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(shape_err("aggregate", "outputs must be [n, d]"));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(&shape);
    for (y, mask) in outputs.iter().zip(masks) {
        if y.shape() != shape.as_slice() || mask.len() != n {
            return Err(shape_err("aggregate", "output or mask length mismatch"));
        }
        for t in 0..n {
            let c = mask.c[t];
            for j in 0..d {
                out.data_mut()[t * d + j] += c * y.data()[t * d + j];
            }
        }
    }
    Ok(out)
}

/// Activation pattern realising `sum_i beta_i f_i`: activate exactly the
/// modules with nonzero coefficient, each at confidence one. With external
/// scalars `zeta_i = beta_i` the aggregated output is the target span element.
pub fn coverage_witness(beta: &[f64]) -> (Vec<bool>, Vec<f64>) {
    beta.iter()
        .map(|&b| if b != 0.0 { (true, 1.0) } else { (false, 0.0) })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_tensor(rows: &[Vec<bool>]) -> Tensor {
        let n = rows.first().map_or(0, Vec::len);
        Tensor::new(
            vec![rows.len(), n],
            rows.iter()
                .flatten()
                .map(|&x| f64::from(u8::from(x)))
                .collect(),
        )
        .unwrap()
    }

    /// Loop oracle: collect activated rows, zero-pad to the batch max.
    fn filter_pad(h: &Tensor, masks: &[Vec<bool>]) -> Tensor {
        let (b, n, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let pad = masks
            .iter()
            .map(|m| m.iter().filter(|&&x| x).count())
            .max()
            .unwrap_or(0);
        let mut out = Tensor::zeros(&[b, pad, d]);
        for i in 0..b {
            let mut slot = 0;
            for t in 0..n {
                if masks[i][t] {
                    for j in 0..d {
                        out.set(&[i, slot, j], h.at(&[i, t, j]));
                    }
                    slot += 1;
                }
            }
        }
        out
    }

    fn figure_two() -> Tensor {
        // h1..h4 as distinct sentinel rows.
        Tensor::new(vec![1, 4, 2], vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5]).unwrap()
    }

    #[test]
    fn symmetric_configurator_is_a_tie_that_activates() {
        let params =
            ConfiguratorParams::from_parts(&[0.3, -0.2], &[0.3, -0.2], 0.1, 0.1, 2.0).unwrap();
        let h = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.0]).unwrap();
        let mask = configurator_forward(&h, &params).unwrap();
        for t in 0..3 {
            assert_eq!(mask.p[t], [0.5, 0.5]);
            assert_eq!(mask.c[t], 0.5);
            assert!(mask.a[t]);
        }
    }

    #[test]
    fn bias_gap_of_tau_ln3_gives_three_quarters() {
        let tau = 1.7;
        let params =
            ConfiguratorParams::from_parts(&[0.0; 3], &[0.0; 3], 0.2, 0.2 + tau * 3f64.ln(), tau)
                .unwrap();
        let h = Tensor::new(vec![2, 3], vec![0.4, -1.0, 2.0, 3.0, 0.1, -0.3]).unwrap();
        let mask = configurator_forward(&h, &params).unwrap();
        for t in 0..2 {
            assert!((mask.p[t][1] - 0.75).abs() < 1e-12);
            assert!(mask.a[t]);
            assert!((mask.c[t] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn configurator_matches_scalar_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ConfiguratorParams {
            weight: Tensor::randn(&[4, 2], 1.0, &mut rng),
            bias: Tensor::randn(&[2], 1.0, &mut rng),
            log_tau: Tensor::scalar(0.3),
        };
        let h = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mask = configurator_forward(&h, &params).unwrap();
        let tau = 0.3f64.exp();
        for t in 0..6 {
            let logit = |i: usize| {
                (0..4)
                    .map(|j| h.at(&[t, j]) * params.weight.at(&[j, i]))
                    .sum::<f64>()
                    + params.bias.data()[i]
            };
            let (e0, e1) = ((logit(0) / tau).exp(), (logit(1) / tau).exp());
            assert!((mask.p[t][0] - e0 / (e0 + e1)).abs() < 1e-12);
            assert!((mask.p[t][0] + mask.p[t][1] - 1.0).abs() < 1e-12);
            assert!(mask.c[t] >= 0.5 && mask.c[t] <= 1.0);
            assert_eq!(mask.a[t], mask.p[t][1] >= mask.p[t][0]);
        }
    }

    #[test]
    fn init_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ConfiguratorParams::init(16, 0.5, &mut rng).unwrap();
        assert!((p.tau() - 0.5 * 4.0).abs() < 1e-12);
        assert!(ConfiguratorParams::init(16, 0.0, &mut rng).is_err());
    }

    #[test]
    fn figure_two_compress_extract_aggregate() {
        let h = figure_two();
        let a1 = vec![false, true, false, true];
        let a2 = vec![false, false, false, true];
        let (hc1, plan1) = compress(&h, &mask_tensor(std::slice::from_ref(&a1))).unwrap();
        let (hc2, plan2) = compress(&h, &mask_tensor(std::slice::from_ref(&a2))).unwrap();
        assert_eq!(hc1.shape(), &[1, 2, 2]);
        assert_eq!(hc1.data(), &[2.0, 2.5, 4.0, 4.5]); // (h2, h4)
        assert_eq!(plan1[0].r, 2);
        assert_eq!(hc2.data(), &[4.0, 4.5]); // (h4)
        assert_eq!(plan2[0].r, 1);

        // Module outputs on the compressed sequences.
        let yc1 = Tensor::new(vec![1, 2, 2], vec![20.0, 21.0, 40.0, 41.0]).unwrap();
        let yc2 = Tensor::new(vec![1, 1, 2], vec![400.0, 401.0]).unwrap();
        let y1 = extract(&yc1, &plan1).unwrap();
        assert_eq!(y1.data(), &[0.0, 0.0, 20.0, 21.0, 0.0, 0.0, 40.0, 41.0]);
        let y2 = extract(&yc2, &plan2).unwrap();

        let c1 = vec![0.0, 0.8, 0.0, 0.6];
        let c2 = vec![0.0, 0.0, 0.0, 0.9];
        let m1 = DecisionMask {
            a: a1,
            c: c1.clone(),
            p: vec![[0.5, 0.5]; 4],
        };
        let m2 = DecisionMask {
            a: a2,
            c: c2.clone(),
            p: vec![[0.5, 0.5]; 4],
        };
        let out = aggregate(
            &[y1.reshape(&[4, 2]).unwrap(), y2.reshape(&[4, 2]).unwrap()],
            &[m1, m2],
        )
        .unwrap();
        // y4 = c4^1 y4^1 + c4^2 y4^2, y2 = c2^1 y2^1
        assert_eq!(
            out.row(3),
            &[0.6 * 40.0 + 0.9 * 400.0, 0.6 * 41.0 + 0.9 * 401.0]
        );
        assert_eq!(out.row(1), &[0.8 * 20.0, 0.8 * 21.0]);
        assert_eq!(out.row(0), &[0.0, 0.0]);
        assert_eq!(out.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn all_zero_mask_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Tensor::randn(&[2, 5, 3], 1.0, &mut rng);
        let masks = vec![vec![false; 5], vec![true, false, true, false, false]];
        let (hc, plans) = compress(&h, &mask_tensor(&masks)).unwrap();
        assert_eq!(plans[0].r, 0);
        assert_eq!(plans[0].pad_len, 2);
        assert!(hc.data()[..6].iter().all(|&x| x == 0.0));
        let y = extract(&hc, &plans).unwrap();
        assert!(y.data()[..15].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn compress_matches_filter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = Tensor::randn(&[2, 8, 3], 1.0, &mut rng);
            let masks: Vec<Vec<bool>> = (0..2)
                .map(|_| (0..8).map(|_| rng.random_bool(0.5)).collect())
                .collect();
            let (hc, _) = compress(&h, &mask_tensor(&masks)).unwrap();
            assert_eq!(hc, filter_pad(&h, &masks));
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        let h = Tensor::zeros(&[1, 3, 2]);
        let a = Tensor::new(vec![1, 3], vec![1.0, 0.5, 0.0]).unwrap();
        assert_eq!(
            compress(&h, &a).unwrap_err(),
            Error::NonBinaryMask {
                index: 1,
                value: 0.5
            }
        );
    }

    #[test]
    fn extract_rejects_mismatched_plan() {
        let plans = plan_batch(&[vec![true, true, false]]);
        let yc = Tensor::zeros(&[1, 3, 2]);
        assert!(matches!(extract(&yc, &plans), Err(Error::Shape { .. })));
        assert!(matches!(
            extract(&Tensor::zeros(&[2, 2, 2]), &plans),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn aggregate_single_module_unit_confidence_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let out = aggregate(
            std::slice::from_ref(&y),
            &[DecisionMask::hard(vec![true; 5])],
        )
        .unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ys: Vec<Tensor> = (0..2)
            .map(|_| Tensor::randn(&[4, 3], 1.0, &mut rng))
            .collect();
        let masks: Vec<DecisionMask> = (0..2)
            .map(|_| DecisionMask {
                a: vec![true; 4],
                c: (0..4).map(|_| rng.random_range(0.5..1.0)).collect(),
                p: vec![[0.5, 0.5]; 4],
            })
            .collect();
        let out = aggregate(&ys, &masks).unwrap();
        for t in 0..4 {
            for j in 0..3 {
                let want = masks[0].c[t] * ys[0].at(&[t, j]) + masks[1].c[t] * ys[1].at(&[t, j]);
                assert_eq!(out.at(&[t, j]), want);
            }
        }
        assert!(aggregate(&ys[..1], &masks).is_err());
    }

    #[test]
    fn coverage_witness_cases() {
        assert_eq!(
            coverage_witness(&[0.0, 0.0]),
            (vec![false, false], vec![0.0, 0.0])
        );
        assert_eq!(
            coverage_witness(&[1.0, 0.0]),
            (vec![true, false], vec![1.0, 0.0])
        );
    }

    #[test]
    fn coverage_reproduces_linear_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let modules: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[4, 4], 1.0, &mut rng))
            .collect();
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let apply = |m: &Tensor| -> Vec<f64> {
            (0..4)
                .map(|i| (0..4).map(|j| m.at(&[i, j]) * x.data()[j]).sum())
                .collect()
        };
        let beta = [0.7, 0.0, -1.3];
        let (a, c) = coverage_witness(&beta);
        let outputs: Vec<Tensor> = modules
            .iter()
            .zip(&a)
            .map(|(m, &on)| {
                let y = if on { apply(m) } else { vec![0.0; 4] };
                Tensor::new(vec![1, 4], y).unwrap()
            })
            .collect();
        let masks: Vec<DecisionMask> = (0..3)
            .map(|i| DecisionMask {
                a: vec![a[i]],
                c: vec![beta[i] * c[i]],
                p: vec![[0.0, 1.0]],
            })
            .collect();
        let got = aggregate(&outputs, &masks).unwrap();
        for k in 0..4 {
            let want: f64 = (0..3).map(|i| beta[i] * apply(&modules[i])[k]).sum();
            assert!((got.data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_over_every_subset_of_three_modules() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (n, d) = (5, 3);
        let mats: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[d, d], 1.0, &mut rng))
            .collect();
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let apply = |m: &Tensor| {
            let mut y = Tensor::zeros(&[n, d]);
            for t in 0..n {
                for i in 0..d {
                    let v: f64 = (0..d).map(|j| m.at(&[i, j]) * x.at(&[t, j])).sum();
                    y.set(&[t, i], v);
                }
            }
            y
        };
        for subset in 0u32..8 {
            let beta: Vec<f64> = (0..3)
                .map(|i| {
                    if subset >> i & 1 == 1 {
                        rng.random_range(0.5..2.0) * if i == 1 { -1.0 } else { 1.0 }
                    } else {
                        0.0
                    }
                })
                .collect();
            let (a, c) = coverage_witness(&beta);
            assert_eq!(
                a.iter().filter(|&&x| x).count(),
                subset.count_ones() as usize
            );
            let outputs: Vec<Tensor> = (0..3)
                .map(|i| {
                    if a[i] {
                        apply(&mats[i])
                    } else {
                        Tensor::zeros(&[n, d])
                    }
                })
                .collect();
            let masks: Vec<DecisionMask> = (0..3)
                .map(|i| DecisionMask {
                    a: vec![a[i]; n],
                    c: vec![beta[i] * c[i]; n],
                    p: vec![[0.0, 1.0]; n],
                })
                .collect();
            let got = aggregate(&outputs, &masks).unwrap();
            let mut want = Tensor::zeros(&[n, d]);
            for i in 0..3 {
                let y = apply(&mats[i]);
                for (w, v) in want.data_mut().iter_mut().zip(y.data()) {
                    *w += beta[i] * v;
                }
            }
            assert!(got.max_abs_diff(&want) < 1e-12, "subset {subset:03b}");
        }
    }

    #[test]
    fn gate_rates_are_evenly_spaced() {
        let count = |g: GateMode, n: usize| (0..n).filter(|&t| g.forced(t).unwrap()).count();
        assert_eq!(count(GateMode::Rate(0.25), 64), 16);
        assert_eq!(count(GateMode::Rate(0.5), 64), 32);
        assert_eq!(count(GateMode::Rate(1.0), 64), 64);
        assert_eq!(count(GateMode::Rate(0.0), 64), 0);
        assert_eq!(GateMode::Learned.forced(3), None);
    }

    #[test]
    fn tape_compress_extract_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let masks = vec![
            vec![true, false, true, true, false],
            vec![false, true, false, false, false],
        ];
        let plans = plan_batch(&masks);
        let tape = Tape::new();
        let h = tape.param(Tensor::randn(&[2, 5, 3], 1.0, &mut rng));
        let hc = compress_on_tape(h, &plans).unwrap();
        let y = extract_on_tape(hc.scale(2.0), &plans).unwrap();
        tape.backward(y.sum()).unwrap();
        let g = tape.grad(h).unwrap();
        for b in 0..2 {
            for t in 0..5 {
                let want = if masks[b][t] { 2.0 } else { 0.0 };
                assert!(g.row(b * 5 + t).iter().all(|&x| x == want));
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_masking(
            seed in 0u64..10_000,
            b in 1usize..4,
            n in 1usize..24,
            d in 1usize..5,
            rate in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Tensor::randn(&[b, n, d], 1.0, &mut rng);
            let masks: Vec<Vec<bool>> =
                (0..b).map(|_| (0..n).map(|_| rng.random_bool(rate)).collect()).collect();
            let (hc, plans) = compress(&h, &mask_tensor(&masks)).unwrap();
            let y = extract(&hc, &plans).unwrap();
            for i in 0..b {
                for t in 0..n {
                    for j in 0..d {
                        let want = if masks[i][t] { h.at(&[i, t, j]) } else { 0.0 };
                        prop_assert_eq!(y.at(&[i, t, j]).to_bits(), want.to_bits());
                    }
                }
            }
            // Batch independence: each row alone gives the same compressed prefix.
            for i in 0..b {
                let row = Tensor::new(vec![1, n, d], h.data()[i * n * d..(i + 1) * n * d].to_vec()).unwrap();
                let (alone, plan) = compress(&row, &mask_tensor(&masks[i..=i])).unwrap();
                let r = plan[0].r;
                let pad = plans[i].pad_len;
                prop_assert_eq!(&alone.data()[..r * d], &hc.data()[i * pad * d..(i * pad + r) * d]);
                prop_assert_eq!(plans[i].r, r);
            }
        }

        #[test]
        fn plan_invariants(mask in proptest::collection::vec(any::<bool>(), 0..40)) {
            let plan = RoutingPlan::new(&mask, 0);
            let mut expected = 1;
            for (t, &q) in plan.index_q.iter().enumerate() {
                prop_assert_eq!(q == 0, !mask[t]);
                if q > 0 {
                    prop_assert_eq!(q, expected);
                    expected += 1;
                }
            }
            prop_assert_eq!(plan.r, expected - 1);
            prop_assert!(plan.r <= mask.len());
        }
    }
}
