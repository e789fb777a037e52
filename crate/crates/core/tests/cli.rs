use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn compil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn build_args(out: &Path, dataset: &Path) -> Vec<String> {
    vec![
        "--out".into(),
        out.display().to_string(),
        "build".into(),
        "--dataset".into(),
        dataset.display().to_string(),
        "--taxonomy".into(),
        fixture("taxonomy.tsv").display().to_string(),
        "--ic".into(),
        fixture("ic.tsv").display().to_string(),
    ]
}

fn run(args: &[String]) -> Output {
    compil(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn build_on_fixture_writes_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&build_args(dir.path(), &fixture("dataset.csv")));
    assert_eq!(code(&out), 0, "{}", text(&out));
    assert!(dir.path().join("benchmark.json").is_file());
    let asg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("assignment.json")).unwrap()).unwrap();
    assert!(asg["objective"].as_u64().unwrap() >= asg["greedy_objective"].as_u64().unwrap());
}

#[test]
fn overlapping_unseen_pool_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = std::fs::read_to_string(fixture("dataset.csv")).unwrap();
    // old_dog is in the seen pool of the fixture.
    csv.push_str("extra1,old,dog,unseen\n");
    let path = dir.path().join("overlap.csv");
    std::fs::write(&path, csv).unwrap();
    let out = run(&build_args(&dir.path().join("out"), &path));
    assert_eq!(code(&out), 2, "{}", text(&out));
    assert!(text(&out).contains("DISJOINTNESS"), "{}", text(&out));
}

#[test]
fn eval_two_sample_table() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("two.scores");
    std::fs::write(
        &scores,
        "SCORES 2 2\n0 0 seen\n0 1 unseen\ns1 1 0 0.9 0.1\ns2 2 1 0.6 0.5\n",
    )
    .unwrap();
    let out = compil(&[
        "--out",
        dir.path().to_str().unwrap(),
        "eval",
        "--scores",
        scores.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["step"], 1);
    for key in ["S", "U", "AUC"] {
        assert_eq!(m[key].as_f64(), Some(1.0), "{key} in {m}");
    }
}

#[test]
fn gradcheck_passes() {
    let out = compil(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    assert!(!text(&out).contains("FAIL"));
}

#[test]
fn missing_input_file_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&build_args(dir.path(), &dir.path().join("absent.csv")));
    assert_eq!(code(&out), 1, "{}", text(&out));
}

#[test]
fn bad_arguments_and_config_exit_2() {
    assert_eq!(code(&compil(&["run", "--strategy", "replay_all"])), 2);
    assert_eq!(code(&compil(&["--jobs", "0", "gradcheck"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"replay_mix": 9.0}}"#).unwrap();
    let out = compil(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "run"]);
    assert_eq!(code(&out), 2, "{}", text(&out));
}

#[test]
fn help_lists_configuration_defaults() {
    let out = compil(&["run", "--help"]);
    assert_eq!(code(&out), 0);
    let t = text(&out);
    assert!(t.contains("train.beta = "), "{t}");
    assert!(t.contains("world.n_attrs = 12"), "{t}");
}

#[test]
fn zero_shot_run_on_generated_world() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(
        &cfg,
        r#"{"world": {"n_attrs": 6, "n_objs": 8, "dim": 16, "samples_per_composition": 4},
            "builder": {"T": 3}, "train": {"seeds": [0]}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = compil(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "run",
        "--strategy",
        "zero_shot",
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"][0]["steps"].as_array().unwrap().len(), 3);
}
