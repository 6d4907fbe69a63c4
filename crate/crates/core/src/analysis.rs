//! Activation traces, attention spans, and FLOP/latency benchmarks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gau::GauConfig;
use crate::model::{
    model_forward, model_init, ActivationTrace, ModelConfig, ModelInput, ModelParams, ModelStream,
};
use crate::routing::GateMode;
use crate::tasks::Sample;
use crate::train::{batch_loss_grads, optimizer_step, OptimConfig, OptimState};

/// Sequences sampled for traces and spans when not overridden.
pub const DEFAULT_TRACE_SAMPLES: usize = 100;

/// Per-layer statistics across sampled sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// Activated timesteps per sequence.
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation of `counts`.
    pub std: f64,
    /// Per-sequence confidence vectors.
    pub confidence: Vec<Vec<f64>>,
    /// Per-sequence `[query, [keys...]]` lists in original positions.
    pub attention_edges: Vec<Vec<(i64, Vec<i64>)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub config_hash: String,
    /// How key distances are measured in span statistics.
    pub span_distance: String,
    pub samples: usize,
    pub layers: Vec<LayerReport>,
}

/// Runs the model over each sample and keeps the activation traces.
pub fn collect_traces(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
) -> Result<Vec<ActivationTrace>> {
    samples
        .iter()
        .map(|s| Ok(model_forward(ModelInput::Tokens(&s.inputs), params, cfg)?.1))
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k;
    (mean, var.sqrt())
}

/// Builds the trace report; traces must all have the same number of layers.
pub fn trace_report(
    config_hash: &str,
    gau: &GauConfig,
    traces: &[ActivationTrace],
) -> Result<TraceReport> {
    let n_layers = traces.first().map_or(0, |t| t.len());
    if traces.iter().any(|t| t.len() != n_layers) {
        return Err(Error::Config(
            "traces disagree on the number of layers".into(),
        ));
    }
    let layers = (0..n_layers)
        .map(|l| {
            let counts: Vec<usize> = traces
                .iter()
                .map(|t| t[l].a.iter().filter(|&&a| a).count())
                .collect();
            let (mean, std) = mean_std(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
            LayerReport {
                layer: l,
                mean,
                std,
                confidence: traces.iter().map(|t| t[l].c.clone()).collect(),
                attention_edges: traces.iter().map(|t| t[l].attention_edges(gau)).collect(),
                counts,
            }
        })
        .collect();
    Ok(TraceReport {
        config_hash: config_hash.to_string(),
        span_distance: "absolute".into(),
        samples: traces.len(),
        layers,
    })
}

/// Mean over activated queries of the mean absolute distance to their keys;
/// `None` when nothing was activated.
pub fn sequence_span(edges: &[(i64, Vec<i64>)]) -> Option<f64> {
    let per_query: Vec<f64> = edges
        .iter()
        .filter(|(_, keys)| !keys.is_empty())
        .map(|(q, keys)| keys.iter().map(|k| (q - k).abs() as f64).sum::<f64>() / keys.len() as f64)
        .collect();
    if per_query.is_empty() {
        None
    } else {
        Some(per_query.iter().sum::<f64>() / per_query.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRow {
    pub layer: usize,
    /// Mean over sequences with at least one activation; 0 when none had one.
    pub mean_span: f64,
    /// Sequences that contributed.
    pub sequences: usize,
    /// Largest single query-key distance seen.
    pub max_distance: i64,
}

pub fn span_rows(report: &TraceReport) -> Vec<SpanRow> {
    report
        .layers
        .iter()
        .map(|l| {
            let spans: Vec<f64> = l
                .attention_edges
                .iter()
                .filter_map(|e| sequence_span(e))
                .collect();
            let max_distance = l
                .attention_edges
                .iter()
                .flatten()
                .flat_map(|(q, ks)| ks.iter().map(move |k| (q - k).abs()))
                .max()
                .unwrap_or(0);
            SpanRow {
                layer: l.layer,
                mean_span: mean_std(&spans).0,
                sequences: spans.len(),
                max_distance,
            }
        })
        .collect()
}

pub fn span_csv(rows: &[SpanRow], distance: &str) -> String {
    let mut out = String::from("layer,mean_span,sequences,max_distance,distance\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{distance}",
            r.layer, r.mean_span, r.sequences, r.max_distance
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub p: f64,
    pub attn_flops: u64,
    pub step_ms: f64,
    /// Streaming latency per token; NaN when the attention mode cannot stream.
    pub token_us: f64,
    /// Activated timesteps summed over layers for the FLOP sample.
    pub activated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub n: usize,
    pub rates: Vec<f64>,
    pub steps: usize,
    pub warmup: usize,
    pub tokens: usize,
    /// Skip the timing columns (they are written as 0).
    pub flops_only: bool,
    pub seed: u64,
}

fn random_sample(vocab: usize, n: usize, rng: &mut ChaCha8Rng) -> Sample {
    let inputs: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let mut targets = inputs[1..].to_vec();
    targets.push(0);
    Sample {
        inputs,
        targets,
        mask: vec![true; n],
    }
}

/// Forces the gate to each rate in turn and measures attention FLOPs on one
/// random sequence of length `n`, training-step wall time, and streaming
/// per-token latency.
pub fn bench(cfg: &ModelConfig, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let vocab = cfg.vocab.max(1);
    let mut rows = Vec::new();
    for &p in &opts.rates {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("bench rate {p} outside [0, 1]")));
        }
        let cfg = ModelConfig {
            gate: GateMode::Rate(p),
            max_len: cfg.max_len.max(opts.n).max(opts.tokens),
            ..cfg.clone()
        };
        let mut params = model_init(&cfg, opts.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let sample = random_sample(vocab, opts.n, &mut rng);
        let (_, trace) = model_forward(ModelInput::Tokens(&sample.inputs), &params, &cfg)?;
        let attn_flops = trace.iter().map(|l| l.attn_flops).sum();
        let activated = trace.iter().map(|l| l.r).sum();

        let (mut step_ms, mut token_us) = (0.0, 0.0);
        if !opts.flops_only {
            let optim = OptimConfig::default();
            let mut state = OptimState::new(&params);
            let batch = [sample.clone()];
            let mut elapsed = 0.0;
            for i in 0..opts.warmup + opts.steps {
                let start = Instant::now();
                let (_, grads, _) = batch_loss_grads(&params, &cfg, &batch, None)?;
                optimizer_step(&mut params, &grads, &mut state, &optim, 1e-4)?;
                if i >= opts.warmup {
                    elapsed += start.elapsed().as_secs_f64();
                }
            }
            step_ms = 1e3 * elapsed / opts.steps.max(1) as f64;
            token_us = match ModelStream::new(&params, &cfg) {
                Ok(mut stream) => {
                    let tokens = random_sample(vocab, opts.tokens.max(1), &mut rng).inputs;
                    let start = Instant::now();
                    for &t in &tokens {
                        stream.step(t)?;
                    }
                    1e6 * start.elapsed().as_secs_f64() / tokens.len() as f64
                }
                Err(_) => f64::NAN,
            };
        }
        rows.push(BenchRow {
            p,
            attn_flops,
            step_ms,
            token_us,
            activated,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("p,attn_flops,step_ms,token_us\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3}",
            r.p, r.attn_flops, r.step_ms, r.token_us
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gau::AttnMode;
    use crate::model::LayerTrace;

    fn layer(a: Vec<bool>) -> LayerTrace {
        LayerTrace {
            r: a.iter().filter(|&&x| x).count(),
            c: vec![0.75; a.len()],
            a,
            attn_flops: 0,
        }
    }

    fn gau(mode: AttnMode, w: usize) -> GauConfig {
        GauConfig::new(8, mode, w, 4096)
    }

    /// Span by brute force over all (query, key) pairs allowed by a causal
    /// window of `w` on the compressed sequence.
    fn loop_span(a: &[bool], w: usize) -> f64 {
        let pos: Vec<usize> = (0..a.len()).filter(|&t| a[t]).collect();
        let mut per_query = Vec::new();
        for i in 0..pos.len() {
            let mut dists = Vec::new();
            for j in 0..pos.len() {
                if j <= i && i - j < w {
                    dists.push((pos[i] - pos[j]) as f64);
                }
            }
            per_query.push(dists.iter().sum::<f64>() / dists.len() as f64);
        }
        per_query.iter().sum::<f64>() / per_query.len() as f64
    }

    #[test]
    fn forced_skip_gives_zero_counts() {
        let traces = vec![vec![layer(vec![false; 6]), layer(vec![false; 6])]; 3];
        let rep = trace_report("h", &gau(AttnMode::WindowCausal, 2), &traces).unwrap();
        for l in &rep.layers {
            assert_eq!(l.counts, vec![0, 0, 0]);
            assert_eq!((l.mean, l.std), (0.0, 0.0));
        }
        assert!(span_rows(&rep)
            .iter()
            .all(|r| r.sequences == 0 && r.mean_span == 0.0));
    }

    #[test]
    fn single_sample_has_zero_std_and_recount_matches() {
        let a = vec![true, false, true, true, false];
        let rep = trace_report(
            "h",
            &gau(AttnMode::WindowCausal, 2),
            &[vec![layer(a.clone())]],
        )
        .unwrap();
        let l = &rep.layers[0];
        assert_eq!(l.std, 0.0);
        assert_eq!(l.counts[0], a.iter().filter(|&&x| x).count());
        assert_eq!(l.attention_edges[0].len(), l.counts[0]);
    }

    #[test]
    fn single_activation_has_zero_span() {
        let mut a = vec![false; 10];
        a[6] = true;
        let edges = layer(a).attention_edges(&gau(AttnMode::WindowCausal, 4));
        assert_eq!(edges, vec![(6, vec![6])]);
        assert_eq!(sequence_span(&edges), Some(0.0));
    }

    #[test]
    fn dense_causal_window_span_approaches_half_window() {
        // Each query past the warm-up sees distances 0..w-1, mean (w-1)/2.
        let w = 16;
        let n = 4096;
        let edges = layer(vec![true; n]).attention_edges(&gau(AttnMode::WindowCausal, w));
        let span = sequence_span(&edges).unwrap();
        let warm: f64 = (0..w).map(|i| i as f64 / 2.0).sum();
        let exact = (warm + (n - w) as f64 * (w as f64 - 1.0) / 2.0) / n as f64;
        assert!((span - exact).abs() < 1e-12, "{span} vs {exact}");
        assert!((span - (w as f64 - 1.0) / 2.0).abs() < 0.02, "{span}");
        // Within one part in w of half the window.
        assert!((span / (w as f64 / 2.0) - 1.0).abs() < 1.0 / w as f64 + 0.01);
    }

    #[test]
    fn uniform_gap_span_matches_loop_oracle() {
        let w = 2;
        for g in [1usize, 3, 5, 8] {
            let n = 200;
            let a: Vec<bool> = (0..n).map(|t| t % g == 0).collect();
            let edges = layer(a.clone()).attention_edges(&gau(AttnMode::WindowCausal, w));
            let span = sequence_span(&edges).unwrap();
            assert!((span - loop_span(&a, w)).abs() < 1e-12);
            // Window 2 sees self and one predecessor: span tends to g / 2.
            let r = a.iter().filter(|&&x| x).count() as f64;
            assert!((span - g as f64 * (r - 1.0) / (2.0 * r)).abs() < 1e-12);
            if g > 2 * w {
                assert!(span > w as f64);
            }
        }
    }

    #[test]
    fn gap_of_four_windows_reaches_four_w() {
        let w = 4;
        let mut a = vec![false; 64];
        a[10] = true;
        a[10 + 4 * w] = true;
        let edges = layer(a).attention_edges(&gau(AttnMode::WindowCausal, w));
        let max = edges
            .iter()
            .flat_map(|(q, ks)| ks.iter().map(move |k| q - k))
            .max()
            .unwrap();
        assert_eq!(max, 4 * w as i64);
    }

    #[test]
    fn bench_flops_scale_with_rate_and_length() {
        let cfg = ModelConfig::tiny(8, 1, 4, 4, 16);
        let opts = |n| BenchOptions {
            n,
            rates: vec![0.0, 0.25, 0.5, 1.0],
            steps: 1,
            warmup: 0,
            tokens: 4,
            flops_only: true,
            seed: 0,
        };
        let rows = bench(&cfg, &opts(512)).unwrap();
        assert_eq!(rows[0].attn_flops, 0);
        let ratio = rows[3].attn_flops as f64 / rows[2].attn_flops as f64;
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
        let rows2 = bench(&cfg, &opts(1024)).unwrap();
        for (a, b) in rows.iter().zip(&rows2).skip(1) {
            let ratio = b.attn_flops as f64 / a.attn_flops as f64;
            assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
        }
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("p,attn_flops,step_ms,token_us\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
