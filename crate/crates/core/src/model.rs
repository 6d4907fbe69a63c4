//! SeqBoat layers and stacks.
//!
//! One layer:
//!
//! ```text
//! X      = norm(S)                       (pre-norm; identity for post-norm)
//! H      = SiLU(EMA(X))
//! a, c   = configurator(H)
//! Y      = extract(GAU(compress(H, a)))
//! S_next = SiLU(c ⊙ Y + H W + b + S)     (post-norm applies norm here)
//! ```
//!
//! There is no feed-forward block: a stack is embedding, `N` of these
//! layers, and a linear head.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Embedding, LayerNorm, ScaleNorm, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gau::{self, AttnFn, AttnMode, GauConfig, GauParams, PositionBasis, WorkingMemory};
use crate::params::{join, param_group, Params};
use crate::routing::{self, ConfiguratorParams, GateMode};
use crate::ssm::{self, EmaCoeffs, EmaState, MdEmaParams};
use crate::tensor::{self, silu, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Layer,
    Scale,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-position logits.
    #[default]
    Lm,
    /// Logits of the mean-pooled final states.
    Classify,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_h() -> usize {
    8
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input vocabulary; ignored when `input_dim` is set.
    pub vocab: usize,
    /// Width of real-valued inputs, fed through a linear projection.
    #[serde(default)]
    pub input_dim: Option<usize>,
    /// Output classes of the head.
    pub n_out: usize,
    #[serde(default)]
    pub head: HeadKind,
    pub n_layers: usize,
    pub d_m: usize,
    /// Query/key width; must equal `d_m`.
    #[serde(default)]
    pub d_z: Option<usize>,
    /// Value width; `2 * d_m` when unset.
    #[serde(default)]
    pub d_v: Option<usize>,
    #[serde(default = "default_h")]
    pub h: usize,
    pub window: usize,
    /// Temperature scale: `tau = alpha * sqrt(d_m)` at init.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub attn_fn: AttnFn,
    #[serde(default)]
    pub attn_mode: AttnMode,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub norm_placement: NormPlacement,
    #[serde(default)]
    pub basis: PositionBasis,
    /// Longest sequence the model sees.
    pub max_len: usize,
    /// Relative-bias radius; `window` or `max_len` when unset.
    #[serde(default)]
    pub bias_radius: Option<usize>,
    #[serde(default)]
    pub gate: GateMode,
}

impl ModelConfig {
    /// Small causal LM over `vocab` tokens.
    pub fn tiny(vocab: usize, n_layers: usize, d_m: usize, window: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab,
            input_dim: None,
            n_out: vocab,
            head: HeadKind::Lm,
            n_layers,
            d_m,
            d_z: None,
            d_v: None,
            h: 4,
            window,
            alpha: 1.0,
            attn_fn: AttnFn::Softmax,
            attn_mode: AttnMode::WindowCausal,
            norm: NormKind::Layer,
            norm_placement: NormPlacement::Pre,
            basis: PositionBasis::Original,
            max_len,
            bias_radius: None,
            gate: GateMode::Learned,
        }
    }

    pub fn d_v(&self) -> usize {
        self.d_v.unwrap_or(2 * self.d_m)
    }

    pub fn gau(&self) -> GauConfig {
        let mut cfg = GauConfig::new(self.d_m, self.attn_mode, self.window, self.max_len);
        cfg.d_v = self.d_v();
        cfg.attn_fn = self.attn_fn;
        cfg.basis = self.basis;
        if let Some(r) = self.bias_radius {
            cfg.bias_radius = r;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_m", self.d_m),
            ("h", self.h),
            ("window", self.window),
            ("max_len", self.max_len),
            ("n_out", self.n_out),
            ("d_v", self.d_v()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.input_dim.is_none() && self.vocab == 0 {
            return Err(Error::Config(
                "vocab must be positive for token input".into(),
            ));
        }
        if self.input_dim == Some(0) {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if let Some(dz) = self.d_z {
            if dz != self.d_m {
                return Err(Error::Config(format!(
                    "d_z ({dz}) must equal d_m ({}): queries and keys are elementwise maps of the hidden state",
                    self.d_m
                )));
            }
        }
        if self.window > self.max_len {
            return Err(Error::Config(format!(
                "window ({}) exceeds max_len ({})",
                self.window, self.max_len
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if let GateMode::Rate(p) = self.gate {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("gate rate {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

param_group! {
    /// Layer norm uses `gain, bias: [d_m]`; scale norm uses `gain: [1]` and an
    /// empty bias.
    pub struct NormParams {
        gain,
        bias,
    }
}

param_group! {
    pub struct Dense {
        weight,
        bias,
    }
}

param_group! {
    pub struct InputParams {
        table,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub ema: MdEmaParams<T>,
    pub configurator: ConfiguratorParams<T>,
    pub gau: GauParams<T>,
    /// `W, b` of the `H W + b` path.
    pub mix: Dense<T>,
    pub norm: NormParams<T>,
}

impl<T> LayerParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerParams<U> {
        LayerParams {
            ema: self.ema.map_named(&join(prefix, "ema"), f),
            configurator: self
                .configurator
                .map_named(&join(prefix, "configurator"), f),
            gau: self.gau.map_named(&join(prefix, "gau"), f),
            mix: self.mix.map_named(&join(prefix, "mix"), f),
            norm: self.norm.map_named(&join(prefix, "norm"), f),
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.ema.for_each_named(&join(prefix, "ema"), f);
        self.configurator
            .for_each_named(&join(prefix, "configurator"), f);
        self.gau.for_each_named(&join(prefix, "gau"), f);
        self.mix.for_each_named(&join(prefix, "mix"), f);
        self.norm.for_each_named(&join(prefix, "norm"), f);
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.ema.for_each_named_mut(&join(prefix, "ema"), f);
        self.configurator
            .for_each_named_mut(&join(prefix, "configurator"), f);
        self.gau.for_each_named_mut(&join(prefix, "gau"), f);
        self.mix.for_each_named_mut(&join(prefix, "mix"), f);
        self.norm.for_each_named_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// Embedding table `[vocab, d_m]` or input projection `[input_dim, d_m]`.
    pub input: InputParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head: Dense<T>,
}

impl<T> ModelParams<T> {
    pub fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            input: self.input.map_named(&join(prefix, "input"), f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_named(&join(prefix, &format!("layers.{i}")), f))
                .collect(),
            head: self.head.map_named(&join(prefix, "head"), f),
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.input.for_each_named(&join(prefix, "input"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.for_each_named(&join(prefix, &format!("layers.{i}")), f);
        }
        self.head.for_each_named(&join(prefix, "head"), f);
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.input.for_each_named_mut(&join(prefix, "input"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_named_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.head.for_each_named_mut(&join(prefix, "head"), f);
    }
}

impl Params for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.for_each_named("", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.for_each_named_mut("", f);
    }
}

impl ModelParams {
    /// Binds every tensor to `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.map_named("", &mut |_, t| tape.param(t.clone()))
    }

    /// Binds every tensor to `tape` as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.map_named("", &mut |_, t| tape.constant(t.clone()))
    }

    /// Copies named tensors into this structure; every name must match a
    /// tensor of the same shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut it = named.iter();
        let mut err = None;
        self.for_each_named_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match it.next() {
                Some((n, v)) if n == name && v.shape() == t.shape() => *t = v.clone(),
                Some((n, v)) => {
                    err = Some(Error::Checkpoint(format!(
                        "expected {name} {:?}, found {n} {:?}",
                        t.shape(),
                        v.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some((n, _)) = it.next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {n}")));
        }
        Ok(())
    }
}

fn dense_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense {
    Dense {
        weight: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
        bias: Tensor::zeros(&[fan_out]),
    }
}

/// Deterministic initialisation from `seed`.
pub fn model_init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_m;
    let input = match cfg.input_dim {
        Some(k) => Tensor::randn(&[k, d], 1.0 / (k as f64).sqrt(), &mut rng),
        None => Tensor::randn(&[cfg.vocab, d], 1.0, &mut rng),
    };
    let gau_cfg = cfg.gau();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerParams {
            ema: MdEmaParams::init(cfg.h, d, &mut rng)?,
            configurator: ConfiguratorParams::init(d, cfg.alpha, &mut rng)?,
            gau: GauParams::init(&gau_cfg, &mut rng)?,
            mix: dense_init(&mut rng, d, d),
            norm: match cfg.norm {
                NormKind::Layer => NormParams {
                    gain: Tensor::full(&[d], 1.0),
                    bias: Tensor::zeros(&[d]),
                },
                NormKind::Scale => NormParams {
                    gain: Tensor::scalar(1.0),
                    bias: Tensor::zeros(&[0]),
                },
            },
        });
    }
    let head = dense_init(&mut rng, d, cfg.n_out);
    Ok(ModelParams {
        input: InputParams { table: input },
        layers,
        head,
    })
}

/// What one layer did on one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub a: Vec<bool>,
    pub c: Vec<f64>,
    pub r: usize,
    pub attn_flops: u64,
}

impl LayerTrace {
    /// Original positions of the activated timesteps.
    pub fn positions(&self) -> Vec<i64> {
        (0..self.a.len())
            .filter(|&t| self.a[t])
            .map(|t| t as i64)
            .collect()
    }

    /// `(query position, attended key positions)` for every activated query.
    pub fn attention_edges(&self, cfg: &GauConfig) -> Vec<(i64, Vec<i64>)> {
        let pos = self.positions();
        let r = pos.len();
        (0..r)
            .map(|i| (pos[i], cfg.key_range(i, r).map(|j| pos[j]).collect()))
            .collect()
    }
}

/// Per-layer traces of one sequence.
pub type ActivationTrace = Vec<LayerTrace>;

fn norm_on_tape<'t>(x: Var<'t>, p: &NormParams<Var<'t>>, kind: NormKind) -> Result<Var<'t>> {
    match kind {
        NormKind::Layer => LayerNorm::apply(x, p.gain, p.bias),
        NormKind::Scale => ScaleNorm::apply(x, p.gain),
    }
}

fn norm_row(x: &[f64], p: &NormParams, kind: NormKind) -> Vec<f64> {
    match kind {
        NormKind::Layer => LayerNorm::row(x, p.gain.data(), p.bias.data(), LayerNorm::EPS).0,
        NormKind::Scale => ScaleNorm::row(x, p.gain.data()[0]).0,
    }
}

/// One layer over `S: [n, d_m]` on the tape.
pub fn layer_on_tape<'t>(
    s: Var<'t>,
    params: &LayerParams<Var<'t>>,
    cfg: &ModelConfig,
) -> Result<(Var<'t>, LayerTrace)> {
    let shape = s.shape();
    if shape.len() != 2 || shape[1] != cfg.d_m {
        return Err(shape_err(
            "layer_forward",
            format!("input {shape:?} vs d_m {}", cfg.d_m),
        ));
    }
    let (n, d) = (shape[0], shape[1]);
    let x = match cfg.norm_placement {
        NormPlacement::Pre => norm_on_tape(s, &params.norm, cfg.norm)?,
        NormPlacement::Post => s,
    };
    let h = ssm::ssm_on_tape(x, &params.ema)?.silu();
    let (mask, c) = routing::configurator_on_tape(h, &params.configurator, cfg.gate)?;
    let tape = s.tape();
    let flops_before = tape.attn_flops();
    let mut z = h
        .matmul(params.mix.weight)?
        .add_row(params.mix.bias)?
        .add(s)?;
    let plans = routing::plan_batch(std::slice::from_ref(&mask.a));
    let r = plans[0].r;
    if r > 0 {
        let positions: Vec<i64> = plans[0].positions().into_iter().map(|t| t as i64).collect();
        let hc = routing::compress_on_tape(h.reshape(&[1, n, d])?, &plans)?.reshape(&[r, d])?;
        let yc = gau::gau_on_tape(hc, &positions, &params.gau, &cfg.gau())?;
        let y = routing::extract_on_tape(yc.reshape(&[1, r, d])?, &plans)?.reshape(&[n, d])?;
        z = z.add(y.mul_col(c)?)?;
    }
    let mut out = z.silu();
    if cfg.norm_placement == NormPlacement::Post {
        out = norm_on_tape(out, &params.norm, cfg.norm)?;
    }
    let trace = LayerTrace {
        r,
        a: mask.a,
        c: mask.c,
        attn_flops: tape.attn_flops() - flops_before,
    };
    Ok((out, trace))
}

/// Model input for one sequence.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Tokens(&'a [usize]),
    /// `[n, input_dim]` real-valued features.
    Features(&'a Tensor),
}

impl ModelInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Features(f) => f.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Logits plus per-layer traces.
pub struct ModelOutput<'t> {
    pub logits: Var<'t>,
    pub trace: ActivationTrace,
}

/// Full stack on the tape. For LM heads, `rows` restricts the logits to the
/// given positions (all positions when `None`); classification heads return
/// one row.
pub fn model_on_tape<'t>(
    input: ModelInput<'_>,
    params: &ModelParams<Var<'t>>,
    cfg: &ModelConfig,
    rows: Option<&[usize]>,
) -> Result<ModelOutput<'t>> {
    let n = input.len();
    if n == 0 || n > cfg.max_len {
        return Err(shape_err(
            "model_forward",
            format!("sequence length {n} outside 1..={}", cfg.max_len),
        ));
    }
    let mut s = match (input, cfg.input_dim) {
        (ModelInput::Tokens(ids), None) => Embedding::apply(params.input.table, ids)?,
        (ModelInput::Features(x), Some(k)) => {
            if x.ndim() != 2 || x.shape()[1] != k {
                return Err(shape_err(
                    "model_forward",
                    format!("features {:?} vs input_dim {k}", x.shape()),
                ));
            }
            params
                .input
                .table
                .tape()
                .constant(x.clone())
                .matmul(params.input.table)?
        }
        _ => {
            return Err(Error::Config(
                "input kind does not match the model's input layer".into(),
            ))
        }
    };
    let mut trace = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, t) = layer_on_tape(s, layer, cfg)?;
        s = next;
        trace.push(t);
    }
    let features = match cfg.head {
        HeadKind::Classify => s.mean_rows().reshape(&[1, cfg.d_m])?,
        HeadKind::Lm => match rows {
            Some(rows) => Embedding::apply(s, rows)?,
            None => s,
        },
    };
    let logits = features
        .matmul(params.head.weight)?
        .add_row(params.head.bias)?;
    Ok(ModelOutput { logits, trace })
}

/// Plain forward: logits `[n, n_out]` (LM) or `[1, n_out]` (classification).
pub fn model_forward(
    input: ModelInput<'_>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Tensor, ActivationTrace)> {
    let tape = Tape::new();
    let pv = params.bind_constant(&tape);
    let out = model_on_tape(input, &pv, cfg, None)?;
    Ok((out.logits.to_tensor(), out.trace))
}

/// Plain single-layer forward over `S: [n, d_m]`.
pub fn layer_forward(
    s: &Tensor,
    params: &LayerParams,
    cfg: &ModelConfig,
) -> Result<(Tensor, LayerTrace)> {
    let tape = Tape::new();
    let pv = params.map_named("", &mut |_, t| tape.constant(t.clone()));
    let (out, trace) = layer_on_tape(tape.constant(s.clone()), &pv, cfg)?;
    Ok((out.to_tensor(), trace))
}

/// Streaming state of one layer.
#[derive(Clone, Debug)]
pub struct LayerStreamState {
    coeffs: EmaCoeffs,
    pub ema: EmaState,
    pub memory: WorkingMemory,
    /// Position of the next timestep.
    pub position: usize,
    pub attn_flops: u64,
}

impl LayerStreamState {
    pub fn new(params: &LayerParams, cfg: &ModelConfig) -> Result<Self> {
        if cfg.attn_mode != AttnMode::WindowCausal {
            return Err(Error::Config(
                "streaming requires window_causal attention".into(),
            ));
        }
        let coeffs = EmaCoeffs::new(&params.ema);
        Ok(LayerStreamState {
            ema: coeffs.state(),
            coeffs,
            memory: WorkingMemory::new(cfg.window),
            position: 0,
            attn_flops: 0,
        })
    }
}

/// One timestep of a layer; the GAU runs only when the configurator
/// activates. Returns the output row, the decision, and its confidence.
pub fn layer_step(
    state: &mut LayerStreamState,
    s_t: &[f64],
    params: &LayerParams,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, bool, f64)> {
    if s_t.len() != cfg.d_m {
        return Err(shape_err("layer_step", "input width differs from d_m"));
    }
    let x = match cfg.norm_placement {
        NormPlacement::Pre => norm_row(s_t, &params.norm, cfg.norm),
        NormPlacement::Post => s_t.to_vec(),
    };
    let h: Vec<f64> = state
        .coeffs
        .step(&mut state.ema, &x)
        .into_iter()
        .map(silu)
        .collect();
    let p = routing::configurator_row(&h, &params.configurator);
    let t = state.position;
    let a = cfg.gate.forced(t).unwrap_or(routing::decide(p).0);
    let c = p[usize::from(a)];
    let mut z = tensor::vec_mat(&h, &params.mix.weight, Some(params.mix.bias.data()));
    for (z, s) in z.iter_mut().zip(s_t) {
        *z += s;
    }
    if a {
        let (y, flops) = gau::gau_step(&mut state.memory, &h, t as i64, &params.gau, &cfg.gau())?;
        state.attn_flops += flops;
        for (z, y) in z.iter_mut().zip(&y) {
            *z += c * y;
        }
    }
    let mut out: Vec<f64> = z.into_iter().map(silu).collect();
    if cfg.norm_placement == NormPlacement::Post {
        out = norm_row(&out, &params.norm, cfg.norm);
    }
    state.position += 1;
    Ok((out, a, c))
}

/// Token-by-token decoding session for an LM.
#[derive(Clone, Debug)]
pub struct ModelStream<'p> {
    params: &'p ModelParams,
    cfg: ModelConfig,
    pub layers: Vec<LayerStreamState>,
}

impl<'p> ModelStream<'p> {
    pub fn new(params: &'p ModelParams, cfg: &ModelConfig) -> Result<Self> {
        if cfg.head != HeadKind::Lm || cfg.input_dim.is_some() {
            return Err(Error::Config("streaming needs a token-input LM".into()));
        }
        let layers = params
            .layers
            .iter()
            .map(|l| LayerStreamState::new(l, cfg))
            .collect::<Result<_>>()?;
        Ok(ModelStream {
            params,
            cfg: cfg.clone(),
            layers,
        })
    }

    /// Feeds one token and returns the next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let table = &self.params.input.table;
        let vocab = table.shape()[0];
        if token >= vocab {
            return Err(Error::VocabOverflow { id: token, vocab });
        }
        let mut s = table.row(token).to_vec();
        for (state, layer) in self.layers.iter_mut().zip(&self.params.layers) {
            s = layer_step(state, &s, layer, &self.cfg)?.0;
        }
        Ok(tensor::vec_mat(
            &s,
            &self.params.head.weight,
            Some(self.params.head.bias.data()),
        ))
    }

    pub fn attn_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.attn_flops).sum()
    }
}

const MAGIC: &[u8; 8] = b"SQBOATCK";
const VERSION: u32 = 1;

/// Binary container: header JSON plus named tensors with shape headers and
/// little-endian `f64` payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &dim in t.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
            Ok(buf)
        }
        fn take_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
            let mut buf = Vec::new();
            r.take(len as u64).read_to_end(&mut buf)?;
            if buf.len() != len {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            Ok(buf)
        }
        if &take::<_, 8>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(take(&mut r)?) as usize;
        let header = serde_json::from_slice(&take_vec(&mut r, hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = String::from_utf8(take_vec(&mut r, nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
            let shape = (0..ndim)
                .map(|_| Ok(u64::from_le_bytes(take(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = take_vec(&mut r, numel * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Checkpoint holding just the model configuration and parameters.
pub fn model_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> Result<Checkpoint> {
    let header = serde_json::json!({ "model": cfg });
    Ok(Checkpoint {
        header,
        tensors: params.named(),
    })
}

/// Rebuilds configuration and parameters from a checkpoint; extra tensors
/// whose names do not start with a parameter group are ignored.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(ModelConfig, ModelParams)> {
    let cfg: ModelConfig = serde_json::from_value(ck.header["model"].clone())
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let mut params = model_init(&cfg, 0)?;
    let model_tensors: Vec<(String, Tensor)> = ck
        .tensors
        .iter()
        .filter(|(n, _)| {
            n.starts_with("input.") || n.starts_with("layers.") || n.starts_with("head.")
        })
        .cloned()
        .collect();
    params.load_named(&model_tensors)?;
    Ok((cfg, params))
}
