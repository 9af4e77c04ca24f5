use std::path::Path;
use std::process::{Command, Output};

fn twinrecon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twinrecon"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &str = r#"
seed = 5
shots = 400
out_dir = "run"

[geometry]
signal_rows = 24
signal_cols = 24
idler_rows = 24
idler_cols = 24

[detector.signal]
eta = 0.4
dark_total = 0.05

[detector.idler]
eta = 0.4
dark_total = 0.05

[model]
corr_sigma = [1.5, 1.5]

[model.pairs]
modes = 5.0
mean_per_mode = 0.8

[model.signal_noise]
modes = 20.0
mean_per_mode = 0.05

[model.idler_noise]
modes = 20.0
mean_per_mode = 0.05

[sweep]
md_grid = [5, 13, 29]
bootstrap_replicates = 4
correlation_window = 6

[em]
max_iterations = 60
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn print_defaults_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&twinrecon(dir.path(), &["config", "--print-defaults"]));
    std::fs::write(dir.path().join("d.toml"), &text).unwrap();
    let again = ok(&twinrecon(dir.path(), &["--config", "d.toml", "config"]));
    assert_eq!(text, again);
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    ok(&twinrecon(d, &["--config", "small.toml", "simulate"]));
    assert!(d.join("run/frames.jsonl").exists());
    assert!(d.join("run/histogram.csv").exists());

    let area = ok(&twinrecon(d, &["--config", "small.toml", "estimate-area"]));
    assert!(area.contains("m_c ="), "{area}");
    assert!(d.join("run/offsets.csv").exists());

    ok(&twinrecon(d, &["--config", "small.toml", "filter", "--md", "13"]));
    assert!(d.join("run/paired_13.json").exists());

    ok(&twinrecon(d, &["--config", "small.toml", "reconstruct", "--md", "13"]));
    assert!(d.join("run/distribution_standard.csv").exists());
    assert!(d.join("run/distribution_filtered_13.csv").exists());

    ok(&twinrecon(d, &["--config", "small.toml", "reconstruct", "--histogram", "run/histogram.csv"]));

    ok(&twinrecon(d, &["--config", "small.toml", "sweep"]));
    let sweep = std::fs::read_to_string(d.join("run/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 + 2);
    assert!(d.join("run/distributions/filtered_29.csv").exists());
    assert!(d.join("run/distributions/standard-inflated_inf.csv").exists());

    let summary = ok(&twinrecon(d, &["--config", "small.toml", "report"]));
    assert!(summary.contains("best detection area"), "{summary}");
    assert!(d.join("run/report.csv").exists());
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = setup();
    let d = dir.path();
    let mut sweeps = Vec::new();
    for threads in ["1", "4"] {
        let out = format!("t{threads}");
        ok(&twinrecon(d, &["--config", "small.toml", "--threads", threads, "--out", &out, "--seed", "11", "simulate"]));
        ok(&twinrecon(d, &["--config", "small.toml", "--threads", threads, "--out", &out, "sweep"]));
        let frames = std::fs::read(d.join(&out).join("frames.jsonl")).unwrap();
        let sweep = std::fs::read(d.join(&out).join("sweep.csv")).unwrap();
        sweeps.push((frames, sweep));
    }
    assert_eq!(sweeps[0], sweeps[1]);
}

#[test]
fn errors_are_tagged_with_their_category() {
    let dir = setup();
    let d = dir.path();
    let out = twinrecon(d, &["--config", "small.toml", "filter", "--frames", "missing.jsonl", "--md", "5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));

    std::fs::write(d.join("bad.toml"), SMALL.replace("eta = 0.4\ndark_total = 0.05\n\n[detector.idler]", "eta = 1.4\ndark_total = 0.05\n\n[detector.idler]")).unwrap();
    let out = twinrecon(d, &["--config", "bad.toml", "simulate"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]:") && err.contains("detector.signal.eta"), "{err}");

    std::fs::write(d.join("frames.jsonl"), "{\"shot\":0,\"s\":[],\"i\":[]}\nnot json\n").unwrap();
    let out = twinrecon(d, &["--config", "small.toml", "filter", "--frames", "frames.jsonl", "--md", "5"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[parse]:") && err.contains("line 2"), "{err}");

    std::fs::write(d.join("frames.jsonl"), "{\"shot\":0,\"s\":[[30,1]],\"i\":[]}\n").unwrap();
    let out = twinrecon(d, &["--config", "small.toml", "filter", "--frames", "frames.jsonl", "--md", "5"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[invalid-frame]:"));
}
