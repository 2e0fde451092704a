use std::fs;
use std::path::Path;
use std::process::Command;

use ktan_cli::checkpoint::Checkpoint;
use ktan_cli::compare::{compare_configs, CompareOptions};
use ktan_cli::config::ExperimentConfig;
use ktan_cli::log::read_log;
use ktan_cli::run::{self, RegressorSummary, Summary, CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE};
use ktan_cli::CliError;
use ktan_core::desk;
use ktan_core::metrics::Phase;
use ktan_core::regressor::solve_regressor_geometry;
use ktan_core::train::Method;

fn tiny(root: &Path, method: &str) -> ExperimentConfig {
    let text = format!(
        r#"
[dataset]
train_per_class = 16
test_per_class = 8

[teacher]
dir = "{root}/teacher"
regressor_dir = "{root}/regressor"
epochs = 1
regressor_steps = 6

[method]
name = "{method}"
epochs = 2

[optimizer]
batch_size = 16

[adversarial]
pretrain_epochs = 1

[output]
dir = "{root}/{method}"
"#,
        root = root.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ktan"))
}

#[test]
fn student_run_writes_summary_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "student");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let sa = run::train(&cfg, &a, false).unwrap();
    let sb = run::train(&cfg, &b, false).unwrap();
    assert_eq!(sa, sb);
    assert!((0.0..=1.0).contains(&sa.test_accuracy));
    for f in [METRICS_FILE, CHECKPOINT_FILE, SUMMARY_FILE, "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(a.join(SUMMARY_FILE)).unwrap();
    assert!(text.contains("test_accuracy"));
    let evals = read_log(&a.join(METRICS_FILE)).unwrap();
    assert_eq!(evals.iter().filter(|r| r.phase == Some(Phase::Eval)).count(), 2);
}

#[test]
fn output_collisions_need_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "student");
    let out = dir.path().join("run");
    run::train(&cfg, &out, false).unwrap();
    fs::write(out.join("notes.txt"), "keep").unwrap();
    assert!(matches!(run::train(&cfg, &out, false), Err(CliError::Exists(_))));
    run::train(&cfg, &out, true).unwrap();
    assert_eq!(fs::read_to_string(out.join("notes.txt")).unwrap(), "keep");
}

#[test]
fn transfer_methods_need_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "ktan");
    let err = run::train(&cfg, &cfg.output.dir, false).unwrap_err().to_string();
    assert!(err.contains("train-teacher"), "{err}");
    run::train_teacher(&cfg, false).unwrap();
    let err = run::train(&cfg, &cfg.output.dir, false).unwrap_err().to_string();
    assert!(err.contains("train-regressor"), "{err}");

    let mut other = cfg.clone();
    other.method.seed = 9;
    let err = run::train_regressor_cmd(&other, false).unwrap_err().to_string();
    assert!(err.contains("different"), "{err}");
}

#[test]
fn teacher_and_regressor_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "ktan");
    cfg.teacher.regressor_steps = 40;
    let teacher = run::train_teacher(&cfg, false).unwrap();
    assert_eq!(teacher.method, Method::Teacher);

    let report = run::eval(&cfg.teacher.dir).unwrap();
    assert!(report.matches(), "{report:?}");
    assert_eq!(report.test_accuracy, teacher.test_accuracy);

    let reg = run::train_regressor_cmd(&cfg, false).unwrap();
    let expected = solve_regressor_geometry(
        desk::teacher([1, 16, 16], 4).feature_map_shape().unwrap(),
        desk::student([1, 16, 16], 4).feature_map_shape().unwrap(),
        [1, 1],
        [0, 0],
    )
    .unwrap();
    assert_eq!(reg.kernel, expected.kernel);
    let ck = Checkpoint::<f32>::load(&cfg.teacher.regressor_dir.join(CHECKPOINT_FILE)).unwrap();
    let stored = ck.regressor.unwrap();
    assert_eq!(stored.spec, expected);
    assert!(stored.trained);
    assert!(stored.state.params.iter().all(|p| p.frozen));
    let on_disk: RegressorSummary = run::read_toml(&cfg.teacher.regressor_dir.join(SUMMARY_FILE)).unwrap();
    assert_eq!(on_disk, reg);

    let ce: Vec<f64> = read_log(&cfg.teacher.regressor_dir.join(METRICS_FILE))
        .unwrap()
        .iter()
        .filter_map(|r| r.ce)
        .collect();
    let head: f64 = ce[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = ce[ce.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "regressor ce {head} -> {tail}");

    let ktan = run::train(&cfg, &cfg.output.dir, false).unwrap();
    assert_eq!(ktan.pretrain_steps, 4);
    assert_eq!(ktan.adversarial_iterations, 4);
    assert!(run::eval(&cfg.output.dir).unwrap().matches());
    let ck = Checkpoint::<f32>::load(&cfg.output.dir.join(CHECKPOINT_FILE)).unwrap();
    assert!(ck.discriminator.is_some());
    assert_eq!(ck.cursor.phase, Phase::Adversarial);
    assert_eq!(ck.cursor.iteration, 4);
}

#[test]
fn stale_checkpoint_versions_are_hard_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "student");
    let out = dir.path().join("run");
    run::train(&cfg, &out, false).unwrap();
    let path = out.join(CHECKPOINT_FILE);
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let err = run::eval(&out).unwrap_err().to_string();
    assert!(err.contains("version 2"), "{err}");
}

#[test]
fn compare_reports_every_method_and_reproduces_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs: Vec<ExperimentConfig> = ["student", "dln", "ktan"].iter().map(|m| tiny(dir.path(), m)).collect();
    let opts = |out: &str, threads| CompareOptions {
        config_dir: dir.path().into(),
        seeds: vec![3, 4],
        out: dir.path().join(out),
        overwrite: false,
        threads,
    };
    let one = compare_configs(&cfgs, &opts("one", 1)).unwrap();
    let two = compare_configs(&cfgs, &opts("two", 2)).unwrap();
    assert!(one.cells.iter().all(|c| c.result.is_ok()));
    assert_eq!(one.cells.len(), 8);
    let text = one.render();
    for m in ["teacher", "student", "dln", "ktan"] {
        assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(m)).count(), 1, "{m}\n{text}");
    }
    let sums = |r: &ktan_cli::compare::CompareReport| -> Vec<Summary> {
        r.cells.iter().map(|c| c.result.clone().unwrap()).collect()
    };
    assert_eq!(sums(&one), sums(&two));
    assert_eq!(
        fs::read(dir.path().join("one/report.txt")).unwrap(),
        fs::read(dir.path().join("two/report.txt")).unwrap()
    );
    let again = compare_configs(&cfgs, &CompareOptions { overwrite: true, ..opts("one", 1) }).unwrap();
    assert_eq!(sums(&again), sums(&one));
}

#[test]
fn shipped_desk_configs_parse_and_compare_cleanly() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk");
    let cfgs = ktan_cli::compare::load_method_configs(&dir).unwrap();
    let methods: Vec<Method> = cfgs.iter().map(|c| c.method.name).collect();
    assert!(methods.contains(&Method::Ktan) && methods.contains(&Method::Student) && methods.contains(&Method::Dln));
}

#[test]
fn binary_rejects_bad_method_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[method]\nname = \"fitnets\"\n").unwrap();
    let out = bin().arg("train").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("name") && err.contains("line"), "{err}");
}

#[test]
fn binary_gradcheck_lists_each_operation_once() {
    let out = bin().arg("gradcheck").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ktan_core::verify::GRADIENT_CASES {
        assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(name)).count(), 1, "{name}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn binary_eval_and_reference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "student");
    let path = dir.path().join("student.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let out_dir = dir.path().join("cli-run");
    let status = bin()
        .args(["train", "--seed", "5", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: Summary = run::read_toml(&out_dir.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.seed, 5);
    assert!(bin().arg("eval").arg(&out_dir).status().unwrap().success());
    assert_eq!(bin().arg("train").arg("--config").arg(&path).arg("--out").arg(&out_dir).status().unwrap().code(), Some(2));

    let reference = bin().arg("config-reference").output().unwrap();
    let shipped = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.md")).unwrap();
    assert_eq!(String::from_utf8_lossy(&reference.stdout), shipped);
}
