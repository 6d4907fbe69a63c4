use std::fs;
use std::path::Path;

use seqboat::cli::main_with_args;

const COPY: &str = r#"
seed = 3

[task]
kind = "copy"
vocab = 8
payload = 4
seq_len = 9
eval_size = 16

[model]
n_layers = 2
d_m = 8
window = 4
h = 2

[optim]
warmup_frac = 0.0
schedule = "none"

[train]
steps = 6
batch_size = 2
eval_every = 3
record_wall_time = false

[bench]
rates = [0.0, 1.0]
steps = 1
warmup = 0
tokens = 8
"#;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("seqboat").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_analyse_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("copy.toml");
    fs::write(&cfg, COPY).unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)]), 0);

    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(
        lines[0],
        "step,epoch,loss,metric,wall_ms,act_rate_layer_0,act_rate_layer_1"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("6,2,"));

    let ck = out.join("model.ckpt");
    // The task comes from the checkpoint header when no config is given.
    assert_eq!(run(&["eval", "--checkpoint", s(&ck), "--out", s(&out)]), 0);
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert!(eval["accuracy"].as_f64().unwrap() >= 0.0);

    assert_eq!(
        run(&[
            "trace",
            "--checkpoint",
            s(&ck),
            "--out",
            s(&out),
            "--samples",
            "5"
        ]),
        0
    );
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["samples"], 5);
    assert_eq!(trace["layers"].as_array().unwrap().len(), 2);

    assert_eq!(
        run(&[
            "span",
            "--checkpoint",
            s(&ck),
            "--out",
            s(&out),
            "--samples",
            "5"
        ]),
        0
    );
    let span = fs::read_to_string(out.join("span.csv")).unwrap();
    assert!(span.starts_with("layer,mean_span,sequences,max_distance,distance\n"));
    assert_eq!(span.lines().count(), 3);

    assert_eq!(
        run(&[
            "decode",
            "--checkpoint",
            s(&ck),
            "--out",
            s(&out),
            "--samples",
            "3"
        ]),
        0
    );
    let decode = fs::read_to_string(out.join("decode.csv")).unwrap();
    // Four supervised echo positions per copy sample.
    assert_eq!(decode.lines().count(), 1 + 3 * 4);

    assert_eq!(run(&["bench", "--config", s(&cfg), "--out", s(&out)]), 0);
    let bench = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 3);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.toml");
    fs::write(&full, COPY).unwrap();
    let half = dir.path().join("half.toml");
    fs::write(&half, COPY.replace("steps = 6", "steps = 3")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));

    assert_eq!(run(&["train", "--config", s(&full), "--out", s(&a)]), 0);
    assert_eq!(run(&["train", "--config", s(&half), "--out", s(&b)]), 0);
    let ck = b.join("model.ckpt");
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&full),
            "--out",
            s(&b),
            "--checkpoint",
            s(&ck)
        ]),
        0
    );

    assert_eq!(
        fs::read_to_string(a.join("report.csv")).unwrap(),
        fs::read_to_string(b.join("report.csv")).unwrap()
    );
}

#[test]
fn missing_model_key_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, COPY.replace("d_m = 8\n", "")).unwrap();
    assert_eq!(
        run(&["train", "--config", s(&cfg), "--out", s(dir.path())]),
        2
    );
}

#[test]
fn analysis_without_checkpoint_is_a_config_error() {
    assert_eq!(run(&["span"]), 2);
}
