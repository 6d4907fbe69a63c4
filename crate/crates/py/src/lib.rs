//! Python bindings: model construction, forward and streaming passes,
//! checkpoints, training from a config file, and the routing operators.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use seqboat::config::RunConfig;
use seqboat::model::{
    model_checkpoint, model_forward, model_from_checkpoint, model_init, Checkpoint, ModelConfig,
    ModelInput, ModelParams, ModelStream,
};
use seqboat::params::Params;
use seqboat::routing;
use seqboat::train::{self, Trainer};
use seqboat::Tensor;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.rows_cols();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// A SeqBoat model with its parameters.
#[pyclass(module = "seqboat_py")]
struct Model {
    cfg: ModelConfig,
    params: ModelParams,
}

#[pymethods]
impl Model {
    /// Builds a model from a JSON model config and an init seed.
    #[new]
    #[pyo3(signature = (config_json, seed = 0))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(err)?;
        let params = model_init(&cfg, seed).map_err(err)?;
        Ok(Model { cfg, params })
    }

    /// Small causal LM preset.
    #[staticmethod]
    #[pyo3(signature = (vocab, n_layers, d_m, window, max_len, seed = 0))]
    fn tiny(
        vocab: usize,
        n_layers: usize,
        d_m: usize,
        window: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig::tiny(vocab, n_layers, d_m, window, max_len);
        let params = model_init(&cfg, seed).map_err(err)?;
        Ok(Model { cfg, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        let (cfg, params) = model_from_checkpoint(&ck).map_err(err)?;
        Ok(Model { cfg, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_checkpoint(&self.cfg, &self.params)
            .and_then(|ck| ck.save(&path))
            .map_err(err)
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.cfg).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Names and shapes of every parameter group, in checkpoint order.
    fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    /// Parallel forward pass. Returns `(logits, trace)` where `trace` is a
    /// list per layer of `(a, c, r)`.
    fn forward(
        &self,
        tokens: Vec<usize>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<(Vec<bool>, Vec<f64>, usize)>)> {
        let (logits, trace) =
            model_forward(ModelInput::Tokens(&tokens), &self.params, &self.cfg).map_err(err)?;
        let trace = trace.into_iter().map(|l| (l.a, l.c, l.r)).collect();
        Ok((rows(&logits), trace))
    }

    /// Token-by-token streaming pass; returns the logits after each token.
    fn stream(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let mut s = ModelStream::new(&self.params, &self.cfg).map_err(err)?;
        tokens.iter().map(|&t| s.step(t).map_err(err)).collect()
    }

    /// Mean cross entropy of next-token `targets` at every position.
    fn loss(&self, tokens: Vec<usize>, targets: Vec<usize>) -> PyResult<f64> {
        let (logits, _) =
            model_forward(ModelInput::Tokens(&tokens), &self.params, &self.cfg).map_err(err)?;
        train::cross_entropy(&logits, &targets).map_err(err)
    }
}

/// Trains from a TOML run config; returns the report CSV and writes the
/// checkpoint to `checkpoint` when given.
#[pyfunction]
#[pyo3(signature = (config_path, checkpoint = None))]
fn train_from_config(
    py: Python<'_>,
    config_path: PathBuf,
    checkpoint: Option<PathBuf>,
) -> PyResult<String> {
    py.detach(|| {
        let cfg = RunConfig::load(&config_path).map_err(err)?;
        let (data, model) = cfg.build().map_err(err)?;
        let mut trainer = Trainer::new(&model, &cfg.optim, &cfg.train, cfg.seed).map_err(err)?;
        trainer.run(&data).map_err(err)?;
        if let Some(path) = checkpoint {
            trainer.save(&path).map_err(err)?;
        }
        Ok(trainer.report.to_csv(model.n_layers))
    })
}

/// Compresses `h[B][n][d]` by the binary mask `a[B][n]`. Returns the
/// compressed `[B][pad_len][d]` tensor and the per-row `index_q` maps.
#[pyfunction]
fn compress(
    h: Vec<Vec<Vec<f64>>>,
    a: Vec<Vec<f64>>,
) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>)> {
    let (b, n) = (h.len(), h.first().map_or(0, Vec::len));
    let d = h.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = h.into_iter().flatten().flatten().collect();
    let ht = Tensor::new(vec![b, n, d], flat).map_err(err)?;
    let at = Tensor::new(vec![b, n], a.into_iter().flatten().collect()).map_err(err)?;
    let (hc, plans) = routing::compress(&ht, &at).map_err(err)?;
    Ok((
        unflatten3(&hc),
        plans.into_iter().map(|p| p.index_q).collect(),
    ))
}

/// Inverse of [`compress`] given the `index_q` maps it returned.
#[pyfunction]
fn extract(yc: Vec<Vec<Vec<f64>>>, index_q: Vec<Vec<usize>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let b = yc.len();
    let pad = yc.first().map_or(0, Vec::len);
    let d = yc.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let t = Tensor::new(
        vec![b, pad, d],
        yc.into_iter().flatten().flatten().collect(),
    )
    .map_err(err)?;
    let masks: Vec<Vec<bool>> = index_q
        .iter()
        .map(|q| q.iter().map(|&i| i > 0).collect())
        .collect();
    let plans = routing::plan_batch(&masks);
    if plans.iter().zip(&index_q).any(|(p, q)| &p.index_q != q) {
        return Err(PyValueError::new_err("index_q is not a valid routing map"));
    }
    Ok(unflatten3(&routing::extract(&t, &plans).map_err(err)?))
}

fn unflatten3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| {
            (0..n)
                .map(|j| t.data()[(i * n + j) * d..(i * n + j + 1) * d].to_vec())
                .collect()
        })
        .collect()
}

#[pymodule]
fn seqboat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_from_config, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    Ok(())
}
