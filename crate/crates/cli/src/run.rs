//! The training subcommands as library calls. Each run owns one directory
//! holding `config.toml`, `metrics.log`, `checkpoint.bin` and `summary.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ktan_core::data::{generate_synthetic, load_dataset, Dataset};
use ktan_core::metrics::{MetricsRecord, Phase};
use ktan_core::nn::{Layer, Network, NetworkSpec};
use ktan_core::regressor::{solve_regressor_geometry, train_regressor, Regressor, RegressorHead};
use ktan_core::rng::{self, streams};
use ktan_core::train::{evaluate, network_for, run_experiment, Cursor, Method};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSection, ExperimentConfig, OptimizerSection};
use crate::error::{CliError, CliResult};
use crate::log::{read_log, LogWriter};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const ARTIFACTS: [&str; 4] = [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, SUMMARY_FILE];

/// Equality bound between a reloaded checkpoint's accuracy and its summary.
pub const EVAL_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub method: Method,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub pretrain_steps: usize,
    pub adversarial_iterations: usize,
    pub config_hash: String,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorSummary {
    pub seed: u64,
    pub teacher_map: [usize; 3],
    pub student_map: [usize; 3],
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    /// `teacher` when the teacher's classifier scored the regressed maps,
    /// `auxiliary` when a throwaway dense head did.
    pub head: String,
    pub steps: usize,
    pub first_ce: f64,
    pub last_ce: f64,
    pub config_hash: String,
    pub checkpoint_sha256: String,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn digest<S: Serialize>(v: &S) -> [u8; 32] {
    Sha256::digest(toml::to_string(v).expect("key serializes").as_bytes()).into()
}

#[derive(Serialize)]
struct TeacherKey<'a> {
    seed: u64,
    dataset: &'a DatasetSection,
    optimizer: &'a OptimizerSection,
    preset: &'a str,
    generator: &'a Option<Vec<Layer>>,
    classifier: &'a Option<Vec<Layer>>,
    epochs: usize,
    lr_main: f64,
    lr_decay_epochs: &'a [usize],
}

#[derive(Serialize)]
struct RegressorKey<'a> {
    teacher: String,
    student_preset: &'a str,
    student_generator: &'a Option<Vec<Layer>>,
    student_classifier: &'a Option<Vec<Layer>>,
    steps: usize,
    lr: f64,
    stride: [usize; 2],
    padding: [usize; 2],
}

/// Identifies everything a teacher checkpoint depends on.
pub fn teacher_key(cfg: &ExperimentConfig) -> [u8; 32] {
    let t = &cfg.teacher;
    digest(&TeacherKey {
        seed: cfg.method.seed,
        dataset: &cfg.dataset,
        optimizer: &cfg.optimizer,
        preset: &t.preset,
        generator: &t.generator,
        classifier: &t.classifier,
        epochs: t.epochs,
        lr_main: t.lr_main,
        lr_decay_epochs: &t.lr_decay_epochs,
    })
}

/// Identifies everything a regressor checkpoint depends on.
pub fn regressor_key(cfg: &ExperimentConfig) -> [u8; 32] {
    let t = &cfg.teacher;
    digest(&RegressorKey {
        teacher: hex(&teacher_key(cfg)),
        student_preset: &cfg.student.preset,
        student_generator: &cfg.student.generator,
        student_classifier: &cfg.student.classifier,
        steps: t.regressor_steps,
        lr: t.regressor_lr,
        stride: t.regressor_stride,
        padding: t.regressor_padding,
    })
}

/// Hash of the config with its directory fields blanked, so the same run
/// written elsewhere hashes the same.
pub fn run_hash(cfg: &ExperimentConfig) -> [u8; 32] {
    let mut c = cfg.clone();
    c.output.dir = PathBuf::new();
    c.teacher.dir = PathBuf::new();
    c.teacher.regressor_dir = PathBuf::new();
    c.hash()
}

pub fn load_data(cfg: &ExperimentConfig) -> CliResult<(Dataset<f32>, Dataset<f32>)> {
    let d = &cfg.dataset;
    match (&d.train_file, &d.test_file) {
        (Some(train), Some(test)) => {
            let train = load_dataset::<f32>(train)?;
            let test = load_dataset::<f32>(test)?;
            if train.image_shape() != test.image_shape() || train.classes() != test.classes() {
                return Err(CliError::Config(format!(
                    "train images {:?} with {} classes vs test images {:?} with {} classes",
                    train.image_shape(),
                    train.classes(),
                    test.image_shape(),
                    test.classes()
                )));
            }
            Ok((train, test))
        }
        _ => Ok(generate_synthetic::<f32>(&d.synthetic(), d.seed)?),
    }
}

fn specs(cfg: &ExperimentConfig, data: &Dataset<f32>) -> CliResult<(NetworkSpec, NetworkSpec)> {
    let input = data.image_shape();
    let classes = data.classes();
    Ok((cfg.teacher_spec(input, classes)?, cfg.student_spec(input, classes)?))
}

/// Creates `dir` and clears the artifact files a run writes. Existing
/// artifacts are an error unless `overwrite` is set; other files are kept.
pub fn prepare_dir(dir: &Path, overwrite: bool) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for name in ARTIFACTS {
        let p = dir.join(name);
        if p.exists() {
            if !overwrite {
                return Err(CliError::Exists(p));
            }
            fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
        }
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_toml<S: Serialize>(path: &Path, v: &S) -> CliResult<()> {
    write(path, toml::to_string(v).expect("summary serializes").as_bytes())
}

pub fn read_toml<D: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<D> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn missing(what: &str, path: &Path, command: &str) -> CliError {
    CliError::Core(ktan_core::Error::Missing(format!(
        "{what} checkpoint {} not found; run `ktan {command}` first",
        path.display()
    )))
}

pub fn load_teacher(cfg: &ExperimentConfig) -> CliResult<Network<f32>> {
    let path = cfg.teacher.dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(missing("teacher", &path, "train-teacher"));
    }
    let ck = Checkpoint::<f32>::load(&path)?;
    if ck.config_hash != teacher_key(cfg) {
        return Err(CliError::Checkpoint(format!(
            "{} was trained under a different dataset, teacher, optimizer or seed; rerun train-teacher",
            path.display()
        )));
    }
    ck.network
        .ok_or_else(|| CliError::Checkpoint(format!("{} holds no network", path.display())))
}

pub fn load_regressor(cfg: &ExperimentConfig) -> CliResult<Regressor<f32>> {
    let path = cfg.teacher.regressor_dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(missing("regressor", &path, "train-regressor"));
    }
    let ck = Checkpoint::<f32>::load(&path)?;
    if ck.config_hash != regressor_key(cfg) {
        return Err(CliError::Checkpoint(format!(
            "{} was trained for a different teacher, student or regressor setting; rerun train-regressor",
            path.display()
        )));
    }
    match ck.regressor {
        Some(r) if r.trained => Ok(r),
        _ => Err(CliError::Checkpoint(format!("{} holds no trained regressor", path.display()))),
    }
}

/// Runs `cfg.method` into `out`. Teacher runs are keyed for reuse by the
/// transfer methods.
pub fn train(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> CliResult<Summary> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let (teacher_spec, student_spec) = specs(cfg, &train)?;
    let method = cfg.method.name;
    let teacher = if method.needs_teacher() { Some(load_teacher(cfg)?) } else { None };
    let regressor = if method.needs_regressor() { Some(load_regressor(cfg)?) } else { None };
    let tcfg = cfg.train_config();
    let spec = network_for(method, &teacher_spec, &student_spec);

    prepare_dir(out, overwrite)?;
    write(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut log = LogWriter::create(&out.join(METRICS_FILE))?;
    let outcome = run_experiment(&tcfg, &spec, &train, &test, teacher.as_ref(), regressor.as_ref(), &mut log);
    log.finish()?;
    let outcome = outcome?;

    let hash = if method == Method::Teacher { teacher_key(cfg) } else { run_hash(cfg) };
    let ck = Checkpoint {
        network: Some(outcome.network),
        optimizer: Some(outcome.optimizer),
        discriminator: outcome.discriminator,
        regressor: None,
        cursor: outcome.cursor,
        config_hash: hash,
    };
    let bytes = ck.encode();
    write(&out.join(CHECKPOINT_FILE), &bytes)?;
    let summary = Summary {
        method,
        seed: cfg.method.seed,
        train_accuracy: outcome.train_accuracy,
        test_accuracy: outcome.test_accuracy,
        best_epoch: outcome.best_epoch,
        best_test_accuracy: outcome.best_test_accuracy,
        pretrain_steps: outcome.pretrain_steps,
        adversarial_iterations: outcome.adversarial_iterations,
        config_hash: hex(&hash),
        checkpoint_sha256: sha256_hex(&bytes),
    };
    write_toml(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Trains the teacher into `teacher.dir`.
pub fn train_teacher(cfg: &ExperimentConfig, overwrite: bool) -> CliResult<Summary> {
    let mut c = cfg.clone();
    c.method.name = Method::Teacher;
    train(&c, &cfg.teacher.dir, overwrite)
}

/// Solves the regressor kernel for the configured teacher and student maps
/// and trains it against the frozen teacher into `teacher.regressor_dir`.
pub fn train_regressor_cmd(cfg: &ExperimentConfig, overwrite: bool) -> CliResult<RegressorSummary> {
    cfg.validate()?;
    let (train, _) = load_data(cfg)?;
    let (_, student_spec) = specs(cfg, &train)?;
    let teacher = load_teacher(cfg)?;
    let t = &cfg.teacher;
    let rspec = solve_regressor_geometry(
        teacher.spec.feature_map_shape()?,
        student_spec.feature_map_shape()?,
        t.regressor_stride,
        t.regressor_padding,
    )?;
    let seed = cfg.method.seed;
    let init = Regressor::init(rspec, rng::derive(seed, streams::REGRESSOR))?;

    let out = &t.regressor_dir;
    prepare_dir(out, overwrite)?;
    write(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut log = LogWriter::create(&out.join(METRICS_FILE))?;
    let trained = train_regressor(&teacher, init, &train, &cfg.regressor_train_config(), &mut log);
    log.finish()?;
    let (reg, head) = trained?;

    let ce: Vec<f64> = read_log(&out.join(METRICS_FILE))?
        .iter()
        .filter(|r| r.phase == Some(Phase::Regressor))
        .filter_map(|r| r.ce)
        .collect();
    let hash = regressor_key(cfg);
    let ck = Checkpoint {
        network: None,
        optimizer: None,
        discriminator: None,
        regressor: Some(reg),
        cursor: Cursor {
            phase: Phase::Regressor,
            iteration: t.regressor_steps as u64,
        },
        config_hash: hash,
    };
    let bytes = ck.encode();
    write(&out.join(CHECKPOINT_FILE), &bytes)?;
    let summary = RegressorSummary {
        seed,
        teacher_map: rspec.teacher_map,
        student_map: rspec.student_map,
        kernel: rspec.kernel,
        stride: rspec.stride,
        padding: rspec.padding,
        head: match head {
            RegressorHead::Teacher => "teacher".into(),
            RegressorHead::Auxiliary => "auxiliary".into(),
        },
        steps: ce.len(),
        first_ce: ce.first().copied().unwrap_or(f64::NAN),
        last_ce: ce.last().copied().unwrap_or(f64::NAN),
        config_hash: hex(&hash),
        checkpoint_sha256: sha256_hex(&bytes),
    };
    write_toml(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub recorded_train_accuracy: f64,
    pub recorded_test_accuracy: f64,
}

impl EvalReport {
    pub fn max_deviation(&self) -> f64 {
        (self.train_accuracy - self.recorded_train_accuracy)
            .abs()
            .max((self.test_accuracy - self.recorded_test_accuracy).abs())
    }

    pub fn matches(&self) -> bool {
        self.max_deviation() <= EVAL_TOLERANCE
    }
}

/// Reloads a run's checkpoint, re-evaluates it on the run's data and
/// compares with the accuracies in its summary.
pub fn eval(dir: &Path) -> CliResult<EvalReport> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let summary: Summary = read_toml(&dir.join(SUMMARY_FILE))?;
    let ck = Checkpoint::<f32>::load(&dir.join(CHECKPOINT_FILE))?;
    let net = ck
        .network
        .ok_or_else(|| CliError::Checkpoint(format!("{} holds no network", dir.display())))?;
    let (train, test) = load_data(&cfg)?;
    let batch = cfg.optimizer.eval_batch_size;
    Ok(EvalReport {
        method: summary.method,
        train_accuracy: evaluate(&net, &train, batch)?,
        test_accuracy: evaluate(&net, &test, batch)?,
        recorded_train_accuracy: summary.train_accuracy,
        recorded_test_accuracy: summary.test_accuracy,
    })
}

/// Fraction of the first adversarial epoch's iterations in which the
/// discriminator scored regressed teacher maps above student maps.
pub fn discriminator_separation(records: &[MetricsRecord], iterations: usize) -> Option<f64> {
    let adv: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.phase == Some(Phase::Adversarial))
        .take(iterations)
        .collect();
    if adv.is_empty() {
        return None;
    }
    let wins = adv
        .iter()
        .filter(|r| matches!((r.d_teacher, r.d_student), (Some(t), Some(s)) if t > s))
        .count();
    Some(wins as f64 / adv.len() as f64)
}
