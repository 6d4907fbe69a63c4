//! Gated attention unit over a compressed sequence.
//!
//! ```text
//! Q = wq ⊙ Hc + bq        K = wk ⊙ Hc + bk
//! V = SiLU(Hc Wv + bv)    G = SiLU(Hc Wg + bg)
//! O = f(Q Kᵀ / s + B_rel) V
//! Yc = (G ⊙ O) Wh + bh
//! ```
//!
//! Attention runs over compressed indices; relative-position bias uses either
//! the original positions of the activated tokens or their compressed indices.

use std::collections::VecDeque;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardCtx, BackwardRule, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::param_group;
use crate::tensor::{self, dot, silu, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnFn {
    #[default]
    Softmax,
    SquaredRelu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMode {
    /// Every compressed token attends to every other.
    Full,
    /// Full attention restricted to the past.
    FullCausal,
    /// Self plus `ceil(w/2)` past and `floor(w/2)` future compressed tokens.
    WindowBi,
    /// The `w` most recent compressed tokens including self.
    #[default]
    WindowCausal,
}

impl AttnMode {
    pub fn is_causal(self) -> bool {
        matches!(self, AttnMode::FullCausal | AttnMode::WindowCausal)
    }

    pub fn is_windowed(self) -> bool {
        matches!(self, AttnMode::WindowBi | AttnMode::WindowCausal)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionBasis {
    #[default]
    Original,
    Compressed,
}

/// Static attention settings of one GAU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GauConfig {
    pub d_m: usize,
    pub d_v: usize,
    pub attn_fn: AttnFn,
    pub mode: AttnMode,
    pub window: usize,
    /// Clip radius `L` of the relative-bias table (`2L + 1` entries).
    pub bias_radius: usize,
    pub basis: PositionBasis,
}

impl GauConfig {
    /// Defaults: `d_v = 2 d_m`; `L = w` when windowed, `L = max_len` otherwise.
    pub fn new(d_m: usize, mode: AttnMode, window: usize, max_len: usize) -> Self {
        GauConfig {
            d_m,
            d_v: 2 * d_m,
            attn_fn: AttnFn::Softmax,
            mode,
            window,
            bias_radius: if mode.is_windowed() { window } else { max_len },
            basis: PositionBasis::Original,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.d_v == 0 {
            return Err(Error::Config("GAU dimensions must be positive".into()));
        }
        if self.mode.is_windowed() && self.window == 0 {
            return Err(Error::Config("attention window must be positive".into()));
        }
        Ok(())
    }

    /// Compressed key indices visible to query `i` among `r` tokens.
    pub fn key_range(&self, i: usize, r: usize) -> Range<usize> {
        let w = self.window;
        match self.mode {
            AttnMode::Full => 0..r,
            AttnMode::FullCausal => 0..i + 1,
            AttnMode::WindowCausal => (i + 1).saturating_sub(w)..i + 1,
            AttnMode::WindowBi => i.saturating_sub(w.div_ceil(2))..(i + w / 2 + 1).min(r),
        }
    }

    /// Logit normaliser: `r` for full attention, `w` for windows.
    pub fn scale(&self, r: usize) -> f64 {
        if self.mode.is_windowed() {
            self.window as f64
        } else {
            r.max(1) as f64
        }
    }

    /// Attention FLOPs for one query/key pair: the dot product and the
    /// weighted value accumulation.
    pub fn pair_flops(&self) -> u64 {
        2 * (self.d_m + self.d_v) as u64
    }
}

param_group! {
    pub struct GauParams {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wg,
        bg,
        wh,
        bh,
        rel_bias,
    }
}

impl GauParams {
    /// Matrices `~ N(0, 1/fan_in)`, per-dimension scales `~ N(0, 1)`,
    /// biases and the relative-bias table zero.
    pub fn init<R: Rng + ?Sized>(cfg: &GauConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, dv) = (cfg.d_m, cfg.d_v);
        let sd = 1.0 / (d as f64).sqrt();
        Ok(GauParams {
            wq: Tensor::randn(&[d], 1.0, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d], 1.0, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, dv], sd, rng),
            bv: Tensor::zeros(&[dv]),
            wg: Tensor::randn(&[d, dv], sd, rng),
            bg: Tensor::zeros(&[dv]),
            wh: Tensor::randn(&[dv, d], 1.0 / (dv as f64).sqrt(), rng),
            bh: Tensor::zeros(&[d]),
            rel_bias: Tensor::zeros(&[2 * cfg.bias_radius + 1]),
        })
    }

    pub fn check(&self, cfg: &GauConfig) -> Result<()> {
        let (d, dv) = (cfg.d_m, cfg.d_v);
        let expected: [(&str, &Tensor, Vec<usize>); 11] = [
            ("wq", &self.wq, vec![d]),
            ("bq", &self.bq, vec![d]),
            ("wk", &self.wk, vec![d]),
            ("bk", &self.bk, vec![d]),
            ("wv", &self.wv, vec![d, dv]),
            ("bv", &self.bv, vec![dv]),
            ("wg", &self.wg, vec![d, dv]),
            ("bg", &self.bg, vec![dv]),
            ("wh", &self.wh, vec![dv, d]),
            ("bh", &self.bh, vec![d]),
            ("rel_bias", &self.rel_bias, vec![2 * cfg.bias_radius + 1]),
        ];
        for (name, t, shape) in expected {
            if t.shape() != shape.as_slice() {
                return Err(shape_err(
                    "GauParams",
                    format!("{name} is {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Index into a `2L + 1` table for the clipped offset `q_pos - k_pos`.
pub fn bias_index(q_pos: i64, k_pos: i64, radius: usize) -> usize {
    let l = radius as i64;
    ((q_pos - k_pos).clamp(-l, l) + l) as usize
}

/// `rel_bias[clip(q_pos - k_pos, -L, L)]`.
pub fn relative_bias(q_pos: i64, k_pos: i64, table: &[f64]) -> f64 {
    table[bias_index(q_pos, k_pos, table.len() / 2)]
}

/// Attention weights of one query row. Disallowed keys get weight zero; a
/// softmax row with no allowed key is all zeros.
pub fn attn_fn_apply(logits: &[f64], f: AttnFn, allowed: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != allowed.len() {
        return Err(shape_err(
            "attn_fn_apply",
            "mask length differs from logits",
        ));
    }
    let mut out = vec![0.0; logits.len()];
    match f {
        AttnFn::SquaredRelu => {
            for ((o, &x), &ok) in out.iter_mut().zip(logits).zip(allowed) {
                if ok {
                    *o = x.max(0.0).powi(2);
                }
            }
        }
        AttnFn::Softmax => {
            let idx: Vec<usize> = (0..logits.len()).filter(|&i| allowed[i]).collect();
            let mut row: Vec<f64> = idx.iter().map(|&i| logits[i]).collect();
            if !row.is_empty() {
                tensor::softmax_in_place(&mut row);
            }
            for (i, p) in idx.into_iter().zip(row) {
                out[i] = p;
            }
        }
    }
    Ok(out)
}

fn weights_in_place(logits: &mut [f64], f: AttnFn) {
    match f {
        AttnFn::Softmax => {
            if !logits.is_empty() {
                tensor::softmax_in_place(logits)
            }
        }
        AttnFn::SquaredRelu => logits.iter_mut().for_each(|x| *x = x.max(0.0).powi(2)),
    }
}

/// Everything the fused attention needs besides Q, K, V, and the bias table.
#[derive(Clone, Debug)]
struct AttnPlan {
    cfg: GauConfig,
    /// Bias positions (original or compressed) of the `r` tokens.
    positions: Vec<i64>,
    scale: f64,
}

impl AttnPlan {
    fn new(cfg: &GauConfig, positions: &[i64]) -> Self {
        let bias_pos = match cfg.basis {
            PositionBasis::Original => positions.to_vec(),
            PositionBasis::Compressed => (0..positions.len() as i64).collect(),
        };
        AttnPlan {
            cfg: cfg.clone(),
            scale: cfg.scale(positions.len()),
            positions: bias_pos,
        }
    }

    /// Logits of query `i` over its key range; weights are written in place
    /// by the caller.
    fn logits(
        &self,
        i: usize,
        q: &[f64],
        k: &[f64],
        bias: &[f64],
        dz: usize,
    ) -> (Range<usize>, Vec<f64>) {
        let r = self.positions.len();
        let range = self.cfg.key_range(i, r);
        let qi = &q[i * dz..(i + 1) * dz];
        let row = range
            .clone()
            .map(|j| {
                dot(qi, &k[j * dz..(j + 1) * dz]) / self.scale
                    + bias[bias_index(self.positions[i], self.positions[j], self.cfg.bias_radius)]
            })
            .collect();
        (range, row)
    }

    fn forward(
        &self,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        bias: &[f64],
        dz: usize,
        dv: usize,
    ) -> (Vec<f64>, u64) {
        let r = self.positions.len();
        let mut out = vec![0.0; r * dv];
        let mut pairs = 0u64;
        for i in 0..r {
            let (range, mut w) = self.logits(i, q, k, bias, dz);
            weights_in_place(&mut w, self.cfg.attn_fn);
            pairs += w.len() as u64;
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (j, &a) in range.zip(&w) {
                if a != 0.0 {
                    for (o, &x) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                        *o += a * x;
                    }
                }
            }
        }
        (out, pairs * self.cfg.pair_flops())
    }
}

struct AttentionRule(AttnPlan);

impl BackwardRule for AttentionRule {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let plan = &self.0;
        let (q, k, v, bias) = (
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.inputs[2].data(),
            ctx.inputs[3].data(),
        );
        let (r, dz) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
        let dv = ctx.inputs[2].shape()[1];
        let (mut gq, mut gk, mut gv, mut gb) = (
            vec![0.0; r * dz],
            vec![0.0; r * dz],
            vec![0.0; r * dv],
            vec![0.0; bias.len()],
        );
        for i in 0..r {
            let (range, logits) = plan.logits(i, q, k, bias, dz);
            let mut w = logits.clone();
            weights_in_place(&mut w, plan.cfg.attn_fn);
            let go = &ctx.grad[i * dv..(i + 1) * dv];
            // dA_ij = dO_i . v_j
            let ga: Vec<f64> = range
                .clone()
                .map(|j| dot(go, &v[j * dv..(j + 1) * dv]))
                .collect();
            for (j, &a) in range.clone().zip(&w) {
                for (g, &x) in gv[j * dv..(j + 1) * dv].iter_mut().zip(go) {
                    *g += a * x;
                }
            }
            let gl: Vec<f64> = match plan.cfg.attn_fn {
                AttnFn::Softmax => {
                    let inner = dot(&w, &ga);
                    w.iter().zip(&ga).map(|(a, g)| a * (g - inner)).collect()
                }
                AttnFn::SquaredRelu => logits
                    .iter()
                    .zip(&ga)
                    .map(|(x, g)| 2.0 * x.max(0.0) * g)
                    .collect(),
            };
            for (j, &g) in range.zip(&gl) {
                if g == 0.0 {
                    continue;
                }
                gb[bias_index(plan.positions[i], plan.positions[j], plan.cfg.bias_radius)] += g;
                let gs = g / plan.scale;
                for c in 0..dz {
                    gq[i * dz + c] += gs * k[j * dz + c];
                    gk[j * dz + c] += gs * q[i * dz + c];
                }
            }
        }
        [gq, gk, gv, gb]
            .into_iter()
            .zip(&ctx.needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }
}

/// `f(Q Kᵀ / s + B_rel) V` as a single tape node. Adds the attention FLOPs
/// of this call to the tape counter.
pub fn attention_on_tape<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    rel_bias: Var<'t>,
    positions: &[i64],
    cfg: &GauConfig,
) -> Result<Var<'t>> {
    let plan = AttnPlan::new(cfg, positions);
    let (value, flops) = {
        let (qv, kv, vv, bv) = (q.value(), k.value(), v.value(), rel_bias.value());
        let r = positions.len();
        if qv.shape() != kv.shape() || qv.shape()[0] != r || vv.shape()[0] != r {
            return Err(shape_err(
                "attention",
                "Q, K, V and positions disagree on length",
            ));
        }
        if bv.numel() != 2 * cfg.bias_radius + 1 {
            return Err(shape_err("attention", "relative-bias table size"));
        }
        let (dz, dv) = (qv.shape()[1], vv.shape()[1]);
        let (out, flops) = plan.forward(qv.data(), kv.data(), vv.data(), bv.data(), dz, dv);
        (Tensor::from_parts(vec![r, dv], out), flops)
    };
    let tape = q.tape();
    tape.add_attn_flops(flops);
    Ok(tape.record(value, &[q, k, v, rel_bias], Box::new(AttentionRule(plan))))
}

fn check_positions(positions: &[i64]) -> Result<()> {
    for pair in positions.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::NonIncreasingPosition {
                prev: pair[0],
                next: pair[1],
            });
        }
    }
    Ok(())
}

/// Differentiable GAU over `Hc: [r, d_m]` with activated positions `positions`.
pub fn gau_on_tape<'t>(
    hc: Var<'t>,
    positions: &[i64],
    params: &GauParams<Var<'t>>,
    cfg: &GauConfig,
) -> Result<Var<'t>> {
    cfg.validate()?;
    check_positions(positions)?;
    let shape = hc.shape();
    if shape.len() != 2 || shape[1] != cfg.d_m || shape[0] != positions.len() {
        return Err(shape_err(
            "gau_forward",
            format!(
                "input {shape:?} with {} positions, d_m {}",
                positions.len(),
                cfg.d_m
            ),
        ));
    }
    let q = hc.mul_row(params.wq)?.add_row(params.bq)?;
    let k = hc.mul_row(params.wk)?.add_row(params.bk)?;
    let v = hc.matmul(params.wv)?.add_row(params.bv)?.silu();
    let o = attention_on_tape(q, k, v, params.rel_bias, positions, cfg)?;
    let g = hc.matmul(params.wg)?.add_row(params.bg)?.silu();
    g.mul(o)?.matmul(params.wh)?.add_row(params.bh)
}

/// Plain GAU forward; returns the output and the attention FLOPs spent.
/// `r = 0` returns an empty `[0, d_m]` tensor without any computation.
pub fn gau_forward(
    hc: &Tensor,
    positions: &[i64],
    params: &GauParams,
    cfg: &GauConfig,
) -> Result<(Tensor, u64)> {
    params.check(cfg)?;
    if hc.ndim() == 2 && hc.shape()[0] == 0 && positions.is_empty() {
        cfg.validate()?;
        return Ok((Tensor::zeros(&[0, cfg.d_m]), 0));
    }
    let tape = Tape::new();
    let pv = params.map_named("", &mut |_, t| tape.constant(t.clone()));
    let y = gau_on_tape(tape.constant(hc.clone()), positions, &pv, cfg)?;
    let out = y.to_tensor();
    Ok((out, tape.attn_flops()))
}

/// FIFO memory of the `w` most recent activated tokens.
#[derive(Clone, Debug)]
pub struct WorkingMemory {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
    /// Activations seen so far; the compressed index of the next token.
    seen: usize,
    last_pos: Option<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub pos: i64,
    pub index: usize,
}

impl WorkingMemory {
    pub fn new(capacity: usize) -> Self {
        WorkingMemory {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            seen: 0,
            last_pos: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Number of activated tokens processed in this session.
    pub fn seen(&self) -> usize {
        self.seen
    }

    fn push(&mut self, entry: MemoryEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }
}

/// One activated streaming step of a causal windowed GAU. Returns the output
/// row and the attention FLOPs it spent.
pub fn gau_step(
    mem: &mut WorkingMemory,
    h_t: &[f64],
    pos_t: i64,
    params: &GauParams,
    cfg: &GauConfig,
) -> Result<(Vec<f64>, u64)> {
    if cfg.mode != AttnMode::WindowCausal {
        return Err(Error::Config(
            "streaming requires window_causal attention".into(),
        ));
    }
    if h_t.len() != cfg.d_m || mem.capacity != cfg.window {
        return Err(shape_err(
            "gau_step",
            "input width or memory capacity mismatch",
        ));
    }
    if let Some(prev) = mem.last_pos {
        if pos_t <= prev {
            return Err(Error::NonIncreasingPosition { prev, next: pos_t });
        }
    }
    let affine = |w: &Tensor, b: &Tensor| -> Vec<f64> {
        h_t.iter()
            .zip(w.data())
            .zip(b.data())
            .map(|((h, w), b)| w * h + b)
            .collect()
    };
    let q = affine(&params.wq, &params.bq);
    let key = affine(&params.wk, &params.bk);
    let value: Vec<f64> = tensor::vec_mat(h_t, &params.wv, Some(params.bv.data()))
        .into_iter()
        .map(silu)
        .collect();
    let index = mem.seen;
    mem.push(MemoryEntry {
        key,
        value,
        pos: pos_t,
        index,
    });
    mem.seen += 1;
    mem.last_pos = Some(pos_t);

    let bias_pos = |e: &MemoryEntry| match cfg.basis {
        PositionBasis::Original => e.pos,
        PositionBasis::Compressed => e.index as i64,
    };
    let q_pos = bias_pos(mem.entries.back().expect("just pushed"));
    let s = cfg.scale(0);
    let table = params.rel_bias.data();
    let mut w: Vec<f64> = mem
        .entries
        .iter()
        .map(|e| dot(&q, &e.key) / s + table[bias_index(q_pos, bias_pos(e), cfg.bias_radius)])
        .collect();
    weights_in_place(&mut w, cfg.attn_fn);
    let mut o = vec![0.0; cfg.d_v];
    for (e, &a) in mem.entries.iter().zip(&w) {
        for (o, &x) in o.iter_mut().zip(&e.value) {
            *o += a * x;
        }
    }
    let gated: Vec<f64> = tensor::vec_mat(h_t, &params.wg, Some(params.bg.data()))
        .into_iter()
        .zip(&o)
        .map(|(g, o)| silu(g) * o)
        .collect();
    let y = tensor::vec_mat(&gated, &params.wh, Some(params.bh.data()));
    Ok((y, w.len() as u64 * cfg.pair_flops()))
}
