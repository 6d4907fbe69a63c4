//! Multi-dimensional damped EMA.
//!
//! Each of the `d_m` channels is expanded into `h` damped EMA states:
//!
//! ```text
//! u_t = beta * s_t
//! z_t = alpha * u_t + (1 - alpha * delta) * z_{t-1}
//! y_t = sum_i eta * z_t + D * s_t
//! ```
//!
//! Unrolled, this is a causal convolution with
//! `K[t, j] = sum_i eta * phi^t * alpha * beta` where `phi = 1 - alpha * delta`,
//! which is how training runs it. Streaming uses the recurrence directly.

use rand::Rng;

use crate::autodiff::{BackwardCtx, BackwardRule, Var};
use crate::error::{shape_err, Error, Result};
use crate::fft;
use crate::params::param_group;
use crate::tensor::{sigmoid, Tensor};

param_group! {
    /// `alpha` and `delta` are stored as logits so they stay in `[0, 1]`.
    pub struct MdEmaParams {
        eta,
        alpha_logit,
        delta_logit,
        beta,
        skip,
    }
}

fn logit(p: f64) -> f64 {
    // Saturating so that 0 and 1 round-trip exactly through `sigmoid`.
    if p >= 1.0 {
        800.0
    } else if p <= 0.0 {
        -800.0
    } else {
        (p / (1.0 - p)).ln()
    }
}

impl MdEmaParams {
    /// `eta, beta ~ N(0, 1/sqrt(h))`, logits `~ N(0, 1)`, skip `D = 1`.
    pub fn init<R: Rng + ?Sized>(h: usize, d_m: usize, rng: &mut R) -> Result<Self> {
        if h == 0 || d_m == 0 {
            return Err(Error::Config(format!(
                "EMA needs h > 0 and d_m > 0 (got {h}, {d_m})"
            )));
        }
        let std = 1.0 / (h as f64).sqrt();
        Ok(MdEmaParams {
            eta: Tensor::randn(&[h, d_m], std, rng),
            alpha_logit: Tensor::randn(&[h, d_m], 1.0, rng),
            delta_logit: Tensor::randn(&[h, d_m], 1.0, rng),
            beta: Tensor::randn(&[h, d_m], std, rng),
            skip: Tensor::full(&[d_m], 1.0),
        })
    }

    /// Builds parameters from values in their constrained ranges.
    pub fn from_constrained(
        eta: Tensor,
        alpha: &Tensor,
        delta: &Tensor,
        beta: Tensor,
        skip: Tensor,
    ) -> Result<Self> {
        let p = MdEmaParams {
            eta,
            alpha_logit: alpha.map(logit),
            delta_logit: delta.map(logit),
            beta,
            skip,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let hd = self.eta.shape();
        if hd.len() != 2
            || self.alpha_logit.shape() != hd
            || self.delta_logit.shape() != hd
            || self.beta.shape() != hd
            || self.skip.shape() != [hd[1]]
        {
            return Err(shape_err(
                "MdEmaParams",
                "all EMA tensors must be [h, d_m] with skip [d_m]",
            ));
        }
        Ok(())
    }

    pub fn h(&self) -> usize {
        self.eta.shape()[0]
    }

    pub fn d_m(&self) -> usize {
        self.eta.shape()[1]
    }

    pub fn alpha(&self) -> Tensor {
        self.alpha_logit.map(sigmoid)
    }

    pub fn delta(&self) -> Tensor {
        self.delta_logit.map(sigmoid)
    }

    pub fn phi(&self) -> Tensor {
        let delta = self.delta();
        let mut phi = self.alpha();
        for (p, d) in phi.data_mut().iter_mut().zip(delta.data()) {
            *p = 1.0 - *p * d;
        }
        phi
    }
}

fn kernel_raw(
    eta: &[f64],
    alpha: &[f64],
    delta: &[f64],
    beta: &[f64],
    d: usize,
    n: usize,
) -> Vec<f64> {
    let mut k = vec![0.0; n * d];
    for idx in 0..eta.len() {
        let j = idx % d;
        let coef = eta[idx] * alpha[idx] * beta[idx];
        let phi = 1.0 - alpha[idx] * delta[idx];
        let mut pow = 1.0;
        for t in 0..n {
            k[t * d + j] += coef * pow;
            pow *= phi;
        }
    }
    k
}

/// `K[t, j] = sum_i eta[i,j] * phi[i,j]^t * alpha[i,j] * beta[i,j]`, `t = 0..n`.
pub fn materialize_kernel(params: &MdEmaParams, n: usize) -> Result<Tensor> {
    params.validate()?;
    let (alpha, delta) = (params.alpha(), params.delta());
    let d = params.d_m();
    let k = kernel_raw(
        params.eta.data(),
        alpha.data(),
        delta.data(),
        params.beta.data(),
        d,
        n,
    );
    Ok(Tensor::from_parts(vec![n, d], k))
}

struct EmaKernelRule {
    n: usize,
}

impl BackwardRule for EmaKernelRule {
    fn name(&self) -> &'static str {
        "ema_kernel"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let [eta, alpha, delta, beta] = [0, 1, 2, 3].map(|i| ctx.inputs[i].data());
        let d = ctx.inputs[0].shape()[1];
        let hd = eta.len();
        let (mut g_eta, mut g_alpha, mut g_delta, mut g_beta) =
            (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
        for idx in 0..hd {
            let j = idx % d;
            let phi = 1.0 - alpha[idx] * delta[idx];
            // g0 = sum_t g[t] phi^t, g1 = sum_t g[t] t phi^(t-1)
            let (mut g0, mut g1) = (0.0, 0.0);
            let (mut pow, mut pow_prev) = (1.0, 0.0);
            for t in 0..self.n {
                let g = ctx.grad[t * d + j];
                g0 += g * pow;
                g1 += g * t as f64 * pow_prev;
                pow_prev = pow;
                pow *= phi;
            }
            let coef = eta[idx] * alpha[idx] * beta[idx];
            g_eta[idx] = alpha[idx] * beta[idx] * g0;
            g_beta[idx] = eta[idx] * alpha[idx] * g0;
            g_alpha[idx] = eta[idx] * beta[idx] * g0 - coef * delta[idx] * g1;
            g_delta[idx] = -coef * alpha[idx] * g1;
        }
        [g_eta, g_alpha, g_delta, g_beta]
            .into_iter()
            .zip(&ctx.needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }
}

/// Differentiable kernel of length `n`.
pub fn kernel_on_tape<'t>(params: &MdEmaParams<Var<'t>>, n: usize) -> Result<Var<'t>> {
    let alpha = params.alpha_logit.sigmoid();
    let delta = params.delta_logit.sigmoid();
    let inputs = [params.eta, alpha, delta, params.beta];
    let value = {
        let vals: Vec<_> = inputs.iter().map(|v| v.value()).collect();
        let hd = vals[0].shape();
        if hd.len() != 2 || vals.iter().any(|v| v.shape() != hd) {
            return Err(shape_err(
                "ema_kernel",
                "EMA tensors must share a [h, d_m] shape",
            ));
        }
        let d = hd[1];
        let k = kernel_raw(
            vals[0].data(),
            vals[1].data(),
            vals[2].data(),
            vals[3].data(),
            d,
            n,
        );
        Tensor::from_parts(vec![n, d], k)
    };
    Ok(params
        .eta
        .tape()
        .record(value, &inputs, Box::new(EmaKernelRule { n })))
}

/// `K * S + D ⊙ S` on the tape.
pub fn ssm_on_tape<'t>(s: Var<'t>, params: &MdEmaParams<Var<'t>>) -> Result<Var<'t>> {
    let n = s.shape()[0];
    let k = kernel_on_tape(params, n)?;
    k.causal_convolve(s)?.add(s.mul_row(params.skip)?)
}

/// Convolution mode: `K * S + D ⊙ S` for `S: [n, d_m]`.
pub fn ssm_parallel(s: &Tensor, params: &MdEmaParams) -> Result<Tensor> {
    if s.ndim() != 2 || s.shape()[1] != params.d_m() {
        return Err(shape_err(
            "ssm_parallel",
            format!("input {:?} vs d_m {}", s.shape(), params.d_m()),
        ));
    }
    let k = materialize_kernel(params, s.shape()[0])?;
    let mut out = fft::causal_convolve(&k, s)?;
    let d = params.d_m();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o += params.skip.data()[i % d] * s.data()[i];
    }
    Ok(out)
}

/// Recurrent state, `[h, d_m]`, zero at the start of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub z: Tensor,
}

impl EmaState {
    pub fn new(h: usize, d_m: usize) -> Self {
        EmaState {
            z: Tensor::zeros(&[h, d_m]),
        }
    }
}

/// Constrained coefficients precomputed once per decoding session.
#[derive(Clone, Debug)]
pub struct EmaCoeffs {
    h: usize,
    d: usize,
    /// `alpha * beta`
    gain: Vec<f64>,
    phi: Vec<f64>,
    eta: Vec<f64>,
    skip: Vec<f64>,
}

impl EmaCoeffs {
    pub fn new(params: &MdEmaParams) -> Self {
        let alpha = params.alpha();
        EmaCoeffs {
            h: params.h(),
            d: params.d_m(),
            gain: alpha
                .data()
                .iter()
                .zip(params.beta.data())
                .map(|(a, b)| a * b)
                .collect(),
            phi: params.phi().into_data(),
            eta: params.eta.data().to_vec(),
            skip: params.skip.data().to_vec(),
        }
    }

    pub fn state(&self) -> EmaState {
        EmaState::new(self.h, self.d)
    }

    /// One recurrence step; cost is `O(h * d_m)` regardless of position.
    pub fn step(&self, state: &mut EmaState, s_t: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut y: Vec<f64> = self.skip.iter().zip(s_t).map(|(k, s)| k * s).collect();
        let z = state.z.data_mut();
        for i in 0..self.h {
            for j in 0..d {
                let idx = i * d + j;
                z[idx] = self.gain[idx] * s_t[j] + self.phi[idx] * z[idx];
                y[j] += self.eta[idx] * z[idx];
            }
        }
        y
    }
}

/// Recurrent mode for a single timestep.
pub fn ssm_step(state: &mut EmaState, s_t: &[f64], params: &MdEmaParams) -> Result<Vec<f64>> {
    if s_t.len() != params.d_m() || state.z.shape() != [params.h(), params.d_m()] {
        return Err(shape_err(
            "ssm_step",
            "state or input does not match the parameters",
        ));
    }
    Ok(EmaCoeffs::new(params).step(state, s_t))
}
