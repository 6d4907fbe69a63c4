use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CrossEntropy, Tape};
use crate::error::{Error, Result};
use crate::model::{
    model_checkpoint, model_from_checkpoint, model_init, model_on_tape, ActivationTrace,
    Checkpoint, HeadKind, ModelConfig, ModelInput, ModelParams,
};
use crate::params::Params;
use crate::routing::GateMode;
use crate::tasks::{Sample, TaskData};
use crate::tensor::Tensor;

use super::gradcheck::Objective;
use super::optim::{optimizer_step, OptimConfig, OptimState};

fn d_steps() -> u64 {
    1000
}
fn d_batch() -> usize {
    16
}
fn d_eval_every() -> u64 {
    100
}
fn d_true() -> bool {
    true
}

/// Loop settings. An "epoch" is one block of `eval_every` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    /// Stop after the first evaluation reaching this metric.
    #[serde(default)]
    pub target_metric: Option<f64>,
    /// Wall-clock budget; checked between steps.
    #[serde(default)]
    pub max_minutes: Option<f64>,
    /// When false the `wall_ms` column is written as 0 so reports are
    /// byte-reproducible.
    #[serde(default = "d_true")]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: d_steps(),
            batch_size: d_batch(),
            eval_every: d_eval_every(),
            target_metric: None,
            max_minutes: None,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Rows a sample contributes to the loss and their targets.
fn supervision(sample: &Sample, cfg: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let rows: Vec<usize> = sample.supervised().collect();
    let targets: Vec<usize> = rows.iter().map(|&t| sample.targets[t]).collect();
    match cfg.head {
        HeadKind::Lm => (rows, targets),
        HeadKind::Classify => (vec![0], targets.into_iter().take(1).collect()),
    }
}

fn sample_on_tape<'t>(
    pv: &ModelParams<crate::Var<'t>>,
    cfg: &ModelConfig,
    sample: &Sample,
) -> Result<(crate::Var<'t>, ActivationTrace)> {
    let (rows, targets) = supervision(sample, cfg);
    let out = model_on_tape(ModelInput::Tokens(&sample.inputs), pv, cfg, Some(&rows))?;
    let mask = vec![true; targets.len()];
    let loss = CrossEntropy::apply(out.logits, &targets, &mask)?;
    Ok((loss, out.trace))
}

/// Loss, gradients, and trace of one sample.
pub fn sample_loss_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    sample: &Sample,
    corrupt: Option<&'static str>,
) -> Result<(f64, ModelParams, ActivationTrace)> {
    let tape = Tape::new();
    if let Some(rule) = corrupt {
        tape.corrupt_backward(rule);
    }
    let pv = params.bind(&tape);
    let (loss, trace) = sample_on_tape(&pv, cfg, sample)?;
    let value = loss.item();
    tape.backward(loss)?;
    let grads = pv.map_named("", &mut |_, v| {
        tape.grad(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    });
    Ok((value, grads, trace))
}

/// Mean loss and mean gradient over a batch, reduced in sample order.
pub fn batch_loss_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample],
    corrupt: Option<&'static str>,
) -> Result<(f64, ModelParams, Vec<ActivationTrace>)> {
    let mut total = params.map_named("", &mut |_, t| Tensor::zeros(t.shape()));
    let mut loss = 0.0;
    let mut traces = Vec::with_capacity(batch.len());
    for sample in batch {
        let (l, g, trace) = sample_loss_grads(params, cfg, sample, corrupt)?;
        loss += l;
        let mut gs = Vec::new();
        g.visit(&mut |_, t| gs.push(t.data().to_vec()));
        let mut i = 0;
        total.visit_mut(&mut |_, t| {
            for (a, b) in t.data_mut().iter_mut().zip(&gs[i]) {
                *a += b;
            }
            i += 1;
        });
        traces.push(trace);
    }
    let k = batch.len().max(1) as f64;
    total.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|x| *x /= k));
    Ok((loss / k, total, traces))
}

/// Mean loss without gradients.
pub fn batch_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Sample],
) -> Result<(f64, Vec<ActivationTrace>)> {
    let mut loss = 0.0;
    let mut traces = Vec::with_capacity(batch.len());
    for sample in batch {
        let tape = Tape::new();
        let pv = params.bind_constant(&tape);
        let (l, trace) = sample_on_tape(&pv, cfg, sample)?;
        loss += l.item();
        traces.push(trace);
    }
    Ok((loss / batch.len().max(1) as f64, traces))
}

/// Smallest configurator margin `|p - 0.5|` over learned decisions.
pub fn decision_margin(cfg: &ModelConfig, traces: &[ActivationTrace]) -> f64 {
    if cfg.gate != GateMode::Learned {
        return f64::INFINITY;
    }
    traces
        .iter()
        .flatten()
        .flat_map(|l| l.c.iter())
        .map(|c| (c - 0.5).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Evaluation summary over supervised positions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    /// Mean `r / n` per layer.
    pub act_rates: Vec<f64>,
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, samples: &[Sample]) -> Result<EvalResult> {
    let mut loss = 0.0;
    let (mut correct, mut total) = (0usize, 0usize);
    let mut rates = vec![0.0; cfg.n_layers];
    for sample in samples {
        let (rows, targets) = supervision(sample, cfg);
        let tape = Tape::new();
        let pv = params.bind_constant(&tape);
        let out = model_on_tape(ModelInput::Tokens(&sample.inputs), &pv, cfg, Some(&rows))?;
        let logits = out.logits.to_tensor();
        loss += super::cross_entropy(&logits, &targets)?;
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == t);
            total += 1;
        }
        for (rate, layer) in rates.iter_mut().zip(&out.trace) {
            *rate += layer.r as f64 / layer.a.len() as f64;
        }
    }
    let k = samples.len().max(1) as f64;
    Ok(EvalResult {
        loss: loss / k,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        act_rates: rates.into_iter().map(|r| r / k).collect(),
    })
}

/// Full-model objective on a fixed batch, for gradient checking.
pub struct ModelObjective<'a> {
    pub cfg: &'a ModelConfig,
    pub batch: &'a [Sample],
    pub corrupt: Option<&'static str>,
}

impl Objective<ModelParams> for ModelObjective<'_> {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        Ok(batch_loss(params, self.cfg, self.batch)?.0)
    }

    fn loss_and_grads(&self, params: &ModelParams) -> Result<(f64, ModelParams)> {
        let (l, g, _) = batch_loss_grads(params, self.cfg, self.batch, self.corrupt)?;
        Ok((l, g))
    }

    fn margin(&self, params: &ModelParams) -> Result<f64> {
        let (_, traces) = batch_loss(params, self.cfg, self.batch)?;
        Ok(decision_margin(self.cfg, &traces))
    }
}

/// One row of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: u64,
    pub epoch: u64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Eval accuracy on supervised positions.
    pub metric: f64,
    pub wall_ms: u64,
    pub act_rates: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
}

impl TrainReport {
    pub fn to_csv(&self, n_layers: usize) -> String {
        let mut out = String::from("step,epoch,loss,metric,wall_ms");
        for i in 0..n_layers {
            let _ = write!(out, ",act_rate_layer_{i}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{:.6},{:.6},{}",
                r.step, r.epoch, r.loss, r.metric, r.wall_ms
            );
            for a in &r.act_rates {
                let _ = write!(out, ",{a:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn last_metric(&self) -> Option<f64> {
        self.rows.last().map(|r| r.metric)
    }
}

/// Why a run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Completed,
    TargetReached,
    TimeBudget,
}

/// Training loop state. Every step is a pure function of the seed, the
/// configs, and the state, so a saved trainer resumes bit-identically.
pub struct Trainer {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    pub state: OptimState,
    pub report: TrainReport,
    epoch_loss: f64,
    epoch_steps: u64,
    elapsed_ms: u64,
}

impl Trainer {
    pub fn new(
        model: &ModelConfig,
        optim: &OptimConfig,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        let params = model_init(model, seed)?;
        let state = OptimState::new(&params);
        Ok(Trainer {
            model: model.clone(),
            optim: optim.clone(),
            train: train.clone(),
            params,
            state,
            report: TrainReport::default(),
            epoch_loss: 0.0,
            epoch_steps: 0,
            elapsed_ms: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// One optimisation step on batch `step_count()`. On failure the
    /// parameters are left at their last good values.
    pub fn step(&mut self, data: &TaskData) -> Result<f64> {
        let step = self.state.step;
        let batch = data.train_batch(step, self.train.batch_size)?;
        let (loss, grads, _) =
            batch_loss_grads(&self.params, &self.model, &batch, None).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step,
                    loss: f64::NAN,
                },
                e => e,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = self.optim.lr_at(step, self.train.steps);
        let mut next = self.params.clone();
        let mut state = self.state.clone();
        optimizer_step(&mut next, &grads, &mut state, &self.optim, lr).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::Diverged { step, loss },
            e => e,
        })?;
        let mut finite = true;
        next.visit(&mut |_, t| finite &= t.is_finite());
        if !finite {
            return Err(Error::Diverged { step, loss });
        }
        self.params = next;
        self.state = state;
        self.epoch_loss += loss;
        self.epoch_steps += 1;
        Ok(loss)
    }

    /// Evaluates and appends a report row.
    pub fn log_epoch(&mut self, data: &TaskData) -> Result<&ReportRow> {
        let eval = evaluate(&self.params, &self.model, data.eval_set())?;
        let row = ReportRow {
            step: self.state.step,
            epoch: self.report.rows.len() as u64 + 1,
            loss: self.epoch_loss / self.epoch_steps.max(1) as f64,
            metric: eval.accuracy,
            wall_ms: if self.train.record_wall_time {
                self.elapsed_ms
            } else {
                0
            },
            act_rates: eval.act_rates,
        };
        self.report.rows.push(row);
        self.epoch_loss = 0.0;
        self.epoch_steps = 0;
        Ok(self.report.rows.last().unwrap())
    }

    /// Trains until `train.steps`, the target metric, or the time budget.
    pub fn run(&mut self, data: &TaskData) -> Result<StopReason> {
        self.run_until(data, self.train.steps)
    }

    /// Like [`run`](Self::run) but stops after step `until`.
    pub fn run_until(&mut self, data: &TaskData, until: u64) -> Result<StopReason> {
        let start = Instant::now();
        let base_ms = self.elapsed_ms;
        let until = until.min(self.train.steps);
        while self.state.step < until {
            self.step(data)?;
            self.elapsed_ms = base_ms + start.elapsed().as_millis() as u64;
            let last = self.state.step == self.train.steps;
            if self.state.step.is_multiple_of(self.train.eval_every) || last {
                let metric = self.log_epoch(data)?.metric;
                if self.train.target_metric.is_some_and(|t| metric >= t) {
                    return Ok(StopReason::TargetReached);
                }
            }
            if let Some(m) = self.train.max_minutes {
                if start.elapsed().as_secs_f64() >= m * 60.0 {
                    return Ok(StopReason::TimeBudget);
                }
            }
        }
        Ok(StopReason::Completed)
    }

    /// Model parameters, optimiser moments, and loop state in one container.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = model_checkpoint(&self.model, &self.params)?;
        ck.header["optim"] =
            serde_json::to_value(&self.optim).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.header["train"] =
            serde_json::to_value(&self.train).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.header["report"] =
            serde_json::to_value(&self.report).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.header["loop"] = serde_json::json!({
            "step": self.state.step,
            "epoch_loss": self.epoch_loss,
            "epoch_steps": self.epoch_steps,
            "elapsed_ms": self.elapsed_ms,
        });
        let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, m) in names.iter().zip(&self.state.m) {
            ck.tensors.push((format!("optim.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&self.state.v) {
            ck.tensors.push((format!("optim.v.{name}"), v.clone()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Restores a trainer saved with [`checkpoint`](Self::checkpoint).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        fn field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
            serde_json::from_value(ck.header[key].clone())
                .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
        }
        let (model, params) = model_from_checkpoint(ck)?;
        let optim: OptimConfig = field(ck, "optim")?;
        let train: TrainConfig = field(ck, "train")?;
        let report: TrainReport = field(ck, "report")?;
        let lp = &ck.header["loop"];
        let get = |k: &str| lp[k].clone();
        let num = |k: &str| -> Result<u64> {
            get(k)
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("loop.{k} missing")))
        };
        let mut state = OptimState::new(&params);
        state.step = num("step")?;
        let names: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            for (kind, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let t = ck.get(&format!("optim.{kind}.{name}")).ok_or_else(|| {
                    Error::Checkpoint(format!("missing optimiser moment {kind} for {name}"))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "moment {kind} for {name} has shape {:?}",
                        t.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        Ok(Trainer {
            model,
            optim,
            train,
            params,
            state,
            report,
            epoch_loss: get("epoch_loss")
                .as_f64()
                .ok_or_else(|| Error::Checkpoint("loop.epoch_loss missing".into()))?,
            epoch_steps: num("epoch_steps")?,
            elapsed_ms: num("elapsed_ms")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Convenience wrapper: initialise from `seed`, train, and return the trainer.
pub fn train(
    model: &ModelConfig,
    optim: &OptimConfig,
    train: &TrainConfig,
    data: &TaskData,
    seed: u64,
) -> Result<(Trainer, StopReason)> {
    let mut t = Trainer::new(model, optim, train, seed)?;
    let reason = t.run(data)?;
    Ok((t, reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskSpec;
    use crate::train::{grad_check, GradCheckConfig};

    fn setup(steps: u64) -> (ModelConfig, OptimConfig, TrainConfig, TaskData) {
        let spec = TaskSpec {
            eval_size: 16,
            ..TaskSpec::assoc_recall(12, 2, 8, 5)
        };
        let data = TaskData::new(&spec).unwrap();
        let model = ModelConfig::tiny(data.vocab, 1, 8, 4, data.max_len());
        let train = TrainConfig {
            steps,
            batch_size: 4,
            eval_every: 5,
            record_wall_time: false,
            ..Default::default()
        };
        (model, OptimConfig::default(), train, data)
    }

    #[test]
    fn zero_lr_keeps_metric_flat() {
        let (m, o, t, d) = setup(15);
        let o = OptimConfig { lr: 0.0, ..o };
        let (tr, _) = train(&m, &o, &t, &d, 1).unwrap();
        assert_eq!(tr.report.rows.len(), 3);
        let first = &tr.report.rows[0];
        for r in &tr.report.rows {
            assert_eq!(r.metric, first.metric);
            assert_eq!(r.act_rates, first.act_rates);
        }
        assert_eq!(tr.params, model_init(&m, 1).unwrap());
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let (m, o, t, d) = setup(10);
        let a = train(&m, &o, &t, &d, 9).unwrap().0;
        let b = train(&m, &o, &t, &d, 9).unwrap().0;
        assert_eq!(a.report.to_csv(1), b.report.to_csv(1));
        assert_eq!(a.params, b.params);
        let c = train(&m, &o, &t, &d, 10).unwrap().0;
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn resume_continues_identically() {
        let (m, o, t, d) = setup(14);
        let full = train(&m, &o, &t, &d, 2).unwrap().0;
        let mut first = Trainer::new(&m, &o, &t, 2).unwrap();
        first.run_until(&d, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        first.save(&path).unwrap();
        let mut resumed = Trainer::load(&path).unwrap();
        resumed.run(&d).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.report.to_csv(1), full.report.to_csv(1));
    }

    #[test]
    fn csv_layout() {
        let (m, o, t, d) = setup(5);
        let m = ModelConfig { n_layers: 2, ..m };
        let (tr, _) = train(&m, &o, &t, &d, 0).unwrap();
        let csv = tr.report.to_csv(2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,loss,metric,wall_ms,act_rate_layer_0,act_rate_layer_1"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 7);
        assert_eq!(row[0], "5");
        assert_eq!(row[4], "0");
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn divergence_keeps_last_good_params() {
        let (m, o, t, d) = setup(10);
        let o = OptimConfig {
            lr: 1e300,
            clip_norm: 0.0,
            warmup_frac: 0.0,
            ..o
        };
        let mut tr = Trainer::new(&m, &o, &t, 3).unwrap();
        let mut last_good = tr.params.clone();
        let err = loop {
            match tr.step(&d) {
                Ok(_) => last_good = tr.params.clone(),
                Err(e) => break e,
            }
        };
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
        assert_eq!(tr.params, last_good);
        let mut finite = true;
        tr.params.visit(&mut |_, t| finite &= t.is_finite());
        assert!(finite);
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        let (m, o, t, d) = setup(50);
        let mut tr = Trainer::new(&m, &o, &t, 4).unwrap();
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(tr.step(&d).unwrap());
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn small_model_gradients_match_finite_differences() {
        let (m, _, _, d) = setup(1);
        let batch = d.train_batch(0, 2).unwrap();
        let cfg = GradCheckConfig::default();
        let report = grad_check(
            &mut |i| {
                Ok((
                    model_init(&m, 100 + i as u64)?,
                    ModelObjective {
                        cfg: &m,
                        batch: &batch,
                        corrupt: None,
                    },
                ))
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:#?}");
    }
}
