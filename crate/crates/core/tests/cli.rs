use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use resattnet::cli::EvalSummary;
use resattnet::metrics::{summarize, ScoredPrediction};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resattnet")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small 16³ phantom set written through the CLI.
fn phantoms(dir: &Path, fractions: &str) {
    let cfg = dir.join("phantoms.toml");
    fs::write(
        &cfg,
        format!("seed = 4\n[phantom]\nn_per_class = 8\ngrid = 16\nradius_min = 2.0\nradius_max = 3.0\nfractions = {fractions}\n"),
    )
    .unwrap();
    let o = run(&["gen-phantoms", "--config", p(&cfg), "--out", p(&dir.join("data"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("train.toml");
    fs::write(
        &cfg,
        "model = \"micro-resattnet\"\nwidth_mult = 0.125\nseed = 9\ndtype = \"f64\"\n\
         [train]\nepochs = 2\nbatch_size = 4\nlr_start = 1e-3\nlr_end = 1e-4\n",
    )
    .unwrap();
    cfg
}

#[test]
fn missing_manifest_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--manifest", p(&dir.path().join("nope.csv")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest not found"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let o = run(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn empty_split_reports_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), "[1.0, 0.0, 0.0]");
    let data = dir.path().join("data");
    let cfg = train_config(dir.path());
    let out = dir.path().join("run");
    let manifest = data.join("manifest.csv");
    let o = run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["eval", "--manifest", p(&manifest), "--checkpoint", p(&out.join("best.vnet")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no samples"), "{}", stderr(&o));
}

#[test]
fn corrupted_backward_fails_gradcheck() {
    let o = run(&["gradcheck", "--corrupt-conv-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAILED"));
}

#[test]
fn checkpoint_for_other_architecture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), "[0.5, 0.0, 0.5]");
    let cfg = train_config(dir.path());
    let manifest = dir.path().join("data/manifest.csv");
    let out = dir.path().join("run");
    assert!(run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&out)]).status.success());
    let o = run(&[
        "eval", "--model", "micro-resnet", "--width-mult", "0.125", "--manifest", p(&manifest),
        "--checkpoint", p(&out.join("best.vnet")), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("micro-resattnet") && stderr(&o).contains("micro-resnet"), "{}", stderr(&o));
}

#[test]
fn pipeline_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), "[0.5, 0.0, 0.5]");
    let data = dir.path().join("data");
    let again = dir.path().join("again");
    fs::create_dir_all(&again).unwrap();
    phantoms(&again, "[0.5, 0.0, 0.5]");
    for f in ["manifest.csv", "phantoms.json", "volumes/c1_0000.nii", "masks/c1_0000.nii"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join("data").join(f)).unwrap(), "{f}");
    }

    let cfg = train_config(dir.path());
    let manifest = data.join("manifest.csv");
    let mut outputs = Vec::new();
    for run_name in ["a", "b"] {
        let out = dir.path().join(run_name);
        let o = run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ev = out.join("eval");
        let o = run(&["eval", "--config", p(&cfg), "--manifest", p(&manifest), "--checkpoint", p(&out.join("last.vnet")), "--out", p(&ev)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ex = out.join("explain");
        let o = run(&[
            "explain", "--config", p(&cfg), "--checkpoint", p(&out.join("last.vnet")),
            "--volume", p(&data.join("volumes/c1_0000.nii")), "--out", p(&ex),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((
            fs::read(out.join("train_log.jsonl")).unwrap(),
            fs::read(out.join("last.vnet")).unwrap(),
            fs::read(ev.join("eval_scores.csv")).unwrap(),
            fs::read_to_string(ev.join("eval_summary.json")).unwrap(),
            fs::read(ex.join("heatmap.nii")).unwrap(),
        ));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.4, b.4);
    let sa: EvalSummary = serde_json::from_str(&a.3).unwrap();
    let sb: EvalSummary = serde_json::from_str(&b.3).unwrap();
    assert_eq!(sa.metrics, sb.metrics);
    assert_eq!(sa.loss.to_bits(), sb.loss.to_bits());

    // the summary is a function of the dumped per-sample scores
    let scores = String::from_utf8(a.2.clone()).unwrap();
    let preds: Vec<ScoredPrediction> = scores
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            ScoredPrediction { score: cols[2].parse().unwrap(), label: cols[1].parse().unwrap() }
        })
        .collect();
    assert_eq!(summarize(&preds, 0.5).unwrap(), sa.metrics);
}
