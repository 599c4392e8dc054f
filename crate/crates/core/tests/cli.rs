use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcml::harness::cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use mcml::harness::metrics::read_json_lines;
use mcml::harness::{DataSource, GradRecord, MetricsRecord, RunConfig, TrainRecord};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mcml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcml")).args(args).output().expect("binary runs")
}

fn run_in_process(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("mcml").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(mcml(&[]).status.code(), Some(EXIT_USAGE));
    assert_eq!(mcml(&["train", "--bogus"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(mcml(&["train", "--mode", "Z"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(mcml(&["train", "--config", "/nonexistent/x.cfg"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(mcml(&["eval"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(mcml(&["gen-data"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(mcml(&["--help"]).status.code(), Some(EXIT_OK));
}

#[test]
fn bad_config_contents_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in ["[run]\nfoo = 1\n", "[nosuch]\n", "[episode]\nk_shot = 0\n", "[adaption]\nalpha = 2\n"]
        .iter()
        .enumerate()
    {
        let p = dir.path().join(format!("bad{i}.cfg"));
        std::fs::write(&p, text).unwrap();
        let (code, _, err) = run_in_process(&["train", "--config", path_str(&p)]);
        assert_eq!(code, EXIT_USAGE, "{text}: {err}");
    }
}

#[test]
fn missing_corpus_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.cfg");
    std::fs::write(&p, "[data]\nsource = conll\npath = missing.conll\ntrain = a\ntarget = b\n").unwrap();
    let (code, _, _) = run_in_process(&["train", "--config", path_str(&p)]);
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grad.jsonl");
    let o = mcml(&["grad-check", "--instances", "5", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stdout));
    let records: Vec<GradRecord> = read_json_lines(&out).unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.passed));
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("desk.conll");
    let (code, _, err) = run_in_process(&["gen-data", "--config", path_str(&configs().join("desk.spec")), "--out", path_str(&corpus)]);
    assert_eq!(code, EXIT_OK, "{err}");

    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "[data]\nsource = conll\npath = desk.conll\ntrain = weather, music\nvalidation = restaurant\ntarget = travel\n\
         [episode]\ntrain_episodes = 15\nvalidation_episodes = 2\ntest_episodes = 3\n[run]\nvalidate_every = 0\n",
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.jsonl");
    let (code, _, err) = run_in_process(&[
        "train", "--config", path_str(&cfg), "--seed", "3", "--mode", "AM", "--checkpoint", path_str(&ckpt), "--out",
        path_str(&log),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let train: Vec<TrainRecord> = read_json_lines(&log).unwrap();
    assert_eq!(train.len(), 15);
    assert!(std::fs::read_to_string(&ckpt).unwrap().starts_with("mcml-params v1"));

    let metrics = dir.path().join("eval.jsonl");
    let args = ["eval", "--config", path_str(&cfg), "--seed", "3", "--checkpoint", path_str(&ckpt), "--out", path_str(&metrics)];
    let (code, stdout, err) = run_in_process(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.contains("travel"));
    let first: Vec<MetricsRecord> = read_json_lines(&metrics).unwrap();
    assert_eq!(first.len(), 1);
    assert_eq!(first[0].episodes, 3);
    run_in_process(&args);
    let second: Vec<MetricsRecord> = read_json_lines(&metrics).unwrap();
    assert!(first[0].same_metrics(&second[0]));
}

#[test]
fn ablate_writes_one_record_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate.jsonl");
    let o = mcml(&["ablate", "--config", path_str(&configs().join("quick.cfg")), "--seed", "40", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("avg"), "{stdout}");
    let records: Vec<MetricsRecord> = read_json_lines(&out).unwrap();
    // 2 seeds x 1 target domain x 4 modes
    assert_eq!(records.len(), 8);
    assert!(records.iter().all(|r| (r.seed == 40 || r.seed == 41) && r.error.is_none()));

    let o = mcml(&["ablate", "--config", path_str(&configs().join("quick.cfg")), "--mode", "M", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let records: Vec<MetricsRecord> = read_json_lines(&out).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.mode == "M"));
}

#[test]
fn shipped_configs_parse() {
    let mut default = RunConfig::read(configs().join("default.cfg")).unwrap();
    assert_eq!(default.data, DataSource::Synthetic(None));
    default.data = RunConfig::default().data;
    assert_eq!(default, RunConfig::default());
    let ablation = RunConfig::read(configs().join("ablation.cfg")).unwrap();
    assert_eq!(ablation.shots, vec![1, 5]);
    assert_eq!(ablation.seeds, (1..=10).collect::<Vec<u64>>());
    assert!(matches!(ablation.data, DataSource::Synthetic(Some(_))));
    RunConfig::read(configs().join("quick.cfg")).unwrap();
}
