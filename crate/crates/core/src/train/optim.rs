use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
    Cosine,
    None,
}

fn d_lr() -> f64 {
    3e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.01
}
fn d_clip() -> f64 {
    1.0
}
fn d_warmup() -> f64 {
    0.05
}

/// AdamW hyperparameters. `clip_norm <= 0` disables clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    /// Fraction of the total steps spent in linear warmup.
    #[serde(default = "d_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            clip_norm: d_clip(),
            warmup_frac: d_warmup(),
            schedule: Schedule::Linear,
        }
    }
}

impl OptimConfig {
    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let total = total.max(1);
        let warmup = (self.warmup_frac * total as f64).round() as u64;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup.min(total)).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        match self.schedule {
            Schedule::None => self.lr,
            Schedule::Linear => self.lr * (1.0 - progress),
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        }
    }
}

/// First and second moments in parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &dyn Params) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        OptimState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &dyn Params) -> f64 {
    let mut sq = 0.0;
    grads.visit(&mut |_, g| sq += g.data().iter().map(|x| x * x).sum::<f64>());
    sq.sqrt()
}

/// One AdamW update at learning rate `lr`: global-norm clipping, bias-corrected
/// moments, and decoupled weight decay. Returns the pre-clip gradient norm.
pub fn optimizer_step(
    params: &mut dyn Params,
    grads: &dyn Params,
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<f64> {
    let mut bad = None;
    let mut shapes = Vec::new();
    grads.visit(&mut |name, g| {
        if bad.is_none() && !g.is_finite() {
            bad = Some(name.to_string());
        }
        shapes.push(g.shape().to_vec());
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    let mut pshapes = Vec::new();
    params.visit(&mut |_, p| pshapes.push(p.shape().to_vec()));
    if pshapes != shapes || state.m.len() != shapes.len() {
        return Err(shape_err(
            "optimizer_step",
            "gradients, parameters and moments disagree",
        ));
    }
    let norm = grad_norm(grads);
    let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let mut gs = Vec::with_capacity(shapes.len());
    grads.visit(&mut |_, g| gs.push(g.data().to_vec()));
    let mut i = 0;
    let (m_all, v_all) = (&mut state.m, &mut state.v);
    params.visit_mut(&mut |_, p| {
        let (m, v, g) = (m_all[i].data_mut(), v_all[i].data_mut(), &gs[i]);
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            let g = g[k] * scale;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            *x -= lr * update + lr * cfg.weight_decay * *x;
        }
        i += 1;
    });
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NamedTensors;

    fn one(x: f64) -> NamedTensors {
        NamedTensors(vec![("w".into(), Tensor::vector(vec![x]))])
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut p = NamedTensors(vec![("w".into(), Tensor::vector(vec![1.5, -2.0]))]);
        let g = NamedTensors(vec![("w".into(), Tensor::zeros(&[2]))]);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(&p);
        for _ in 0..5 {
            optimizer_step(&mut p, &g, &mut st, &cfg, 0.1).unwrap();
        }
        assert_eq!(p.0[0].1.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let (x0, g, lr) = (0.7, -0.3, 0.01);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut p = one(x0);
        let mut st = OptimState::new(&p);
        optimizer_step(&mut p, &one(g), &mut st, &cfg, lr).unwrap();
        let want = x0 - lr * g / (g.abs() + cfg.eps);
        assert!((p.0[0].1.data()[0] - want).abs() < 1e-15);
        assert!((st.m[0].data()[0] - 0.1 * g).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.02 * g * g).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = one(2.0);
        let mut st = OptimState::new(&p);
        for k in 1..=4 {
            optimizer_step(&mut p, &one(0.0), &mut st, &cfg, 0.5).unwrap();
            let want = 2.0 * (1.0 - 0.5 * 0.1f64).powi(k);
            assert!((p.0[0].1.data()[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn clipping_and_nan_diagnostics() {
        let mut p = NamedTensors(vec![
            ("a".into(), Tensor::zeros(&[2])),
            ("b.w".into(), Tensor::zeros(&[1])),
        ]);
        let g = NamedTensors(vec![
            ("a".into(), Tensor::vector(vec![3.0, 4.0])),
            ("b.w".into(), Tensor::vector(vec![0.0])),
        ]);
        let mut st = OptimState::new(&p);
        let norm = optimizer_step(&mut p, &g, &mut st, &OptimConfig::default(), 0.1).unwrap();
        assert_eq!(norm, 5.0);
        assert!((st.m[0].data()[0] - 0.1 * 3.0 / 5.0).abs() < 1e-15);
        let bad = NamedTensors(vec![
            ("a".into(), Tensor::zeros(&[2])),
            ("b.w".into(), Tensor::vector(vec![f64::NAN])),
        ]);
        assert_eq!(
            optimizer_step(&mut p, &bad, &mut st, &OptimConfig::default(), 0.1).unwrap_err(),
            Error::NonFiniteGradient("b.w".into())
        );
    }

    #[test]
    fn schedules() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_frac: 0.1,
            ..Default::default()
        };
        assert!((cfg.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(99, 100) < 0.02);
        let cos = OptimConfig {
            schedule: Schedule::Cosine,
            ..cfg.clone()
        };
        assert!((cos.lr_at(55, 100) - 0.5).abs() < 1e-12);
        let flat = OptimConfig {
            schedule: Schedule::None,
            warmup_frac: 0.0,
            ..cfg
        };
        assert_eq!(flat.lr_at(70, 100), 1.0);
    }
}
