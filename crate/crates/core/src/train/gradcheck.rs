//! Central-difference gradient checking per parameter group.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::params::Params;

/// A scalar function of parameters with an analytic gradient.
pub trait Objective<P> {
    fn loss(&self, params: &P) -> Result<f64>;
    fn loss_and_grads(&self, params: &P) -> Result<(f64, P)>;
    /// Smallest `|p - 0.5|` over all discrete decisions made while evaluating
    /// the loss; infinite when there are none.
    fn margin(&self, _params: &P) -> Result<f64> {
        Ok(f64::INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub max_coords: usize,
    /// Required decision margin, in multiples of `epsilon`.
    pub margin_factor: f64,
    pub max_resamples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            max_coords: 64,
            margin_factor: 10.0,
            max_resamples: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum GroupResult {
    Checked {
        max_rel_err: f64,
        coords: usize,
    },
    /// No evaluation point with a safe decision margin was found.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: BTreeMap<String, GroupResult>,
    /// Resamples needed before the margin condition held.
    pub resamples: usize,
}

impl GradCheckReport {
    /// Worst relative error over checked groups.
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .values()
            .filter_map(|g| match g {
                GroupResult::Checked { max_rel_err, .. } => Some(*max_rel_err),
                GroupResult::Inconclusive => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn all_checked(&self) -> bool {
        self.groups
            .values()
            .all(|g| matches!(g, GroupResult::Checked { .. }))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.all_checked() && self.max_rel_err() < tol
    }
}

/// `|fd - ad| / max(|fd|, |ad|, 1e-8)`.
pub fn relative_error(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8)
}

/// Draws evaluation points from `make(attempt)` until one has a decision
/// margin above `margin_factor * epsilon`, then compares central differences
/// with the analytic gradient on up to `max_coords` random coordinates of
/// every parameter group.
pub fn grad_check<P, O>(
    make: &mut dyn FnMut(usize) -> Result<(P, O)>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    P: Params + Clone,
    O: Objective<P>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = Vec::new();
    for attempt in 0..=cfg.max_resamples {
        let (params, obj) = make(attempt)?;
        if names.is_empty() {
            params.visit(&mut |name, _| names.push(name.to_string()));
        }
        if obj.margin(&params)? <= cfg.margin_factor * cfg.epsilon {
            continue;
        }
        let (_, grads) = obj.loss_and_grads(&params)?;
        let mut analytic = Vec::new();
        grads.visit(&mut |_, g| analytic.push(g.data().to_vec()));
        let mut sizes = Vec::new();
        params.visit(&mut |_, t| sizes.push(t.numel()));

        let mut groups = BTreeMap::new();
        for (gi, name) in names.iter().enumerate() {
            let coords: Vec<usize> = if sizes[gi] <= cfg.max_coords {
                (0..sizes[gi]).collect()
            } else {
                let mut c = sample(&mut rng, sizes[gi], cfg.max_coords).into_vec();
                c.sort_unstable();
                c
            };
            let mut worst: f64 = 0.0;
            for &k in &coords {
                let shifted = |delta: f64| -> Result<f64> {
                    let mut p = params.clone();
                    let mut idx = 0;
                    p.visit_mut(&mut |_, t| {
                        if idx == gi {
                            t.data_mut()[k] += delta;
                        }
                        idx += 1;
                    });
                    obj.loss(&p)
                };
                let fd = (shifted(cfg.epsilon)? - shifted(-cfg.epsilon)?) / (2.0 * cfg.epsilon);
                worst = worst.max(relative_error(fd, analytic[gi][k]));
            }
            groups.insert(
                name.clone(),
                GroupResult::Checked {
                    max_rel_err: worst,
                    coords: coords.len(),
                },
            );
        }
        return Ok(GradCheckReport {
            groups,
            resamples: attempt,
        });
    }
    Ok(GradCheckReport {
        groups: names
            .into_iter()
            .map(|n| (n, GroupResult::Inconclusive))
            .collect(),
        resamples: cfg.max_resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NamedTensors;
    use crate::tensor::Tensor;

    /// `L = sum_i c_i * x_i`.
    struct Linear(Vec<f64>);

    impl Objective<NamedTensors> for Linear {
        fn loss(&self, p: &NamedTensors) -> Result<f64> {
            Ok(p.0[0]
                .1
                .data()
                .iter()
                .zip(&self.0)
                .map(|(x, c)| x * c)
                .sum())
        }
        fn loss_and_grads(&self, p: &NamedTensors) -> Result<(f64, NamedTensors)> {
            let g = NamedTensors(vec![("x".into(), Tensor::vector(self.0.clone()))]);
            Ok((self.loss(p)?, g))
        }
    }

    struct Flips(f64);

    impl Objective<NamedTensors> for Flips {
        fn loss(&self, _: &NamedTensors) -> Result<f64> {
            Ok(0.0)
        }
        fn loss_and_grads(&self, p: &NamedTensors) -> Result<(f64, NamedTensors)> {
            Ok((0.0, p.clone()))
        }
        fn margin(&self, _: &NamedTensors) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn point() -> NamedTensors {
        NamedTensors(vec![("x".into(), Tensor::vector(vec![0.5, -1.0, 2.0]))])
    }

    #[test]
    fn linear_model_is_exact() {
        let cfg = GradCheckConfig::default();
        let report =
            grad_check(&mut |_| Ok((point(), Linear(vec![1.0, -3.0, 0.25]))), &cfg).unwrap();
        assert!(report.passes(1e-9), "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Wrong;
        impl Objective<NamedTensors> for Wrong {
            fn loss(&self, p: &NamedTensors) -> Result<f64> {
                Ok(p.0[0].1.data().iter().map(|x| x * x).sum())
            }
            fn loss_and_grads(&self, p: &NamedTensors) -> Result<(f64, NamedTensors)> {
                let g = p.0[0].1.map(|x| 3.0 * x);
                Ok((self.loss(p)?, NamedTensors(vec![("x".into(), g)])))
            }
        }
        let report =
            grad_check(&mut |_| Ok((point(), Wrong)), &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err() > 1e-2);
    }

    #[test]
    fn margin_resampling() {
        let cfg = GradCheckConfig::default();
        let report = grad_check(
            &mut |i| Ok((point(), Flips(if i < 3 { 0.0 } else { 1.0 }))),
            &cfg,
        )
        .unwrap();
        assert_eq!(report.resamples, 3);
        assert!(report.all_checked());
        let report = grad_check(&mut |_| Ok((point(), Flips(1e-4))), &cfg).unwrap();
        assert!(!report.all_checked());
        assert_eq!(report.groups["x"], GroupResult::Inconclusive);
    }
}
