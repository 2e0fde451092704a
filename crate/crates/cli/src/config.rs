//! The experiment file: one TOML document with the sections `dataset`,
//! `teacher`, `student`, `method`, `optimizer`, `adversarial` and `output`.
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ktan_core::data::{AugmentConfig, SyntheticSpec};
use ktan_core::desk;
use ktan_core::nn::{Layer, NetworkSpec};
use ktan_core::regressor::RegressorTrainConfig;
use ktan_core::train::{Method, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub method: MethodSection,
    pub optimizer: OptimizerSection,
    pub adversarial: AdversarialSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Generator seed of the synthetic splits.
    pub seed: u64,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub channels: usize,
    pub noise: f64,
    /// Dataset files to load instead of generating the synthetic splits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
    pub augment: bool,
    pub flip_probability: f64,
    pub crop_padding: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        let a = AugmentConfig::default();
        DatasetSection {
            seed: 0,
            classes: s.classes,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            size: s.size,
            channels: s.channels,
            noise: s.noise,
            train_file: None,
            test_file: None,
            augment: a.enabled,
            flip_probability: a.horizontal_flip_probability,
            crop_padding: a.crop_padding,
        }
    }
}

impl DatasetSection {
    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            size: self.size,
            channels: self.channels,
            noise: self.noise,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            enabled: self.augment,
            horizontal_flip_probability: self.flip_probability,
            crop_padding: self.crop_padding,
        }
    }
}

/// A named architecture, or explicit layer lists replacing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Layer>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<Vec<Layer>>,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            preset: "desk".into(),
            generator: None,
            classifier: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Layer>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<Vec<Layer>>,
    /// Where `train-teacher` writes and the transfer methods read the teacher.
    pub dir: PathBuf,
    pub epochs: usize,
    pub lr_main: f64,
    pub lr_decay_epochs: Vec<usize>,
    /// Where `train-regressor` writes and the transfer methods read the regressor.
    pub regressor_dir: PathBuf,
    pub regressor_steps: usize,
    pub regressor_lr: f64,
    pub regressor_stride: [usize; 2],
    pub regressor_padding: [usize; 2],
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            preset: "desk".into(),
            generator: None,
            classifier: None,
            dir: PathBuf::from("runs/teacher"),
            epochs: 15,
            lr_main: 0.02,
            lr_decay_epochs: vec![10],
            regressor_dir: PathBuf::from("runs/regressor"),
            regressor_steps: 1000,
            regressor_lr: 0.0005,
            regressor_stride: [1, 1],
            regressor_padding: [0, 0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub name: Method,
    pub seed: u64,
    pub epochs: usize,
    pub beta: f64,
    pub temperature: f64,
    pub kd_weight: f64,
    pub kd_scale_t2: bool,
    pub fitnet_weight: f64,
    pub fitnet_weighting: bool,
}

impl Default for MethodSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        MethodSection {
            name: Method::Ktan,
            seed: 0,
            epochs: 15,
            beta: t.beta,
            temperature: t.temperature,
            kd_weight: t.kd_weight,
            kd_scale_t2: t.kd_scale_t2,
            fitnet_weight: t.fitnet_weight,
            fitnet_weighting: t.fitnet_weighting,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub batch_size: usize,
    pub lr_main: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub eval_batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimizerSection {
            batch_size: t.batch_size,
            lr_main: 0.02,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: t.lr_decay_factor,
            eval_batch_size: t.eval_batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialSection {
    pub alpha: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_discriminator: Option<f64>,
    /// Supervised epochs before the adversarial phase.
    pub pretrain_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub discriminator_channels: usize,
    pub discriminator_steps: usize,
}

impl Default for AdversarialSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        AdversarialSection {
            alpha: 0.1,
            lr: 0.001,
            lr_discriminator: None,
            pretrain_epochs: 10,
            pretrain_steps: None,
            iterations: None,
            discriminator_channels: t.discriminator_channels,
            discriminator_steps: t.discriminator_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/experiment"),
        }
    }
}

fn network(section: &str, preset: &str, generator: &Option<Vec<Layer>>, classifier: &Option<Vec<Layer>>, input: [usize; 3], classes: usize) -> CliResult<NetworkSpec> {
    let base = match (section, preset) {
        ("teacher", "desk") => desk::teacher(input, classes),
        ("student", "desk") => desk::student(input, classes),
        _ => {
            return Err(CliError::Config(format!(
                "{section}.preset: unknown architecture {preset:?}; expected \"desk\""
            )))
        }
    };
    let spec = match (generator, classifier) {
        (None, None) => base,
        (Some(g), Some(c)) => NetworkSpec {
            name: format!("custom-{section}"),
            input,
            generator: g.clone(),
            classifier: c.clone(),
        },
        _ => {
            return Err(CliError::Config(format!(
                "{section}: generator and classifier must be given together"
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML of the fully resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.dataset.train_file.is_some() != self.dataset.test_file.is_some() {
            return Err(CliError::Config(
                "dataset.train_file and dataset.test_file must be given together".into(),
            ));
        }
        if self.dataset.train_file.is_none() {
            self.dataset.synthetic().validate()?;
        }
        self.dataset.augment().validate()?;
        if self.method.epochs == 0 || self.teacher.epochs == 0 {
            return Err(CliError::Config("method.epochs and teacher.epochs must be at least 1".into()));
        }
        if self.teacher.regressor_steps == 0 {
            return Err(CliError::Config("teacher.regressor_steps must be at least 1".into()));
        }
        self.train_config().validate()?;
        self.teacher_train_config().validate()?;
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.dataset.channels, self.dataset.size, self.dataset.size]
    }

    pub fn teacher_spec(&self, input: [usize; 3], classes: usize) -> CliResult<NetworkSpec> {
        let t = &self.teacher;
        network("teacher", &t.preset, &t.generator, &t.classifier, input, classes)
    }

    pub fn student_spec(&self, input: [usize; 3], classes: usize) -> CliResult<NetworkSpec> {
        let s = &self.student;
        network("student", &s.preset, &s.generator, &s.classifier, input, classes)
    }

    fn common(&self) -> TrainConfig {
        let o = &self.optimizer;
        let m = &self.method;
        let a = &self.adversarial;
        TrainConfig {
            method: m.name,
            alpha: a.alpha,
            beta: m.beta,
            temperature: m.temperature,
            kd_weight: m.kd_weight,
            kd_scale_t2: m.kd_scale_t2,
            fitnet_weight: m.fitnet_weight,
            fitnet_weighting: m.fitnet_weighting,
            k_pretrain_steps: None,
            adversarial_iterations: a.iterations,
            discriminator_steps: a.discriminator_steps,
            discriminator_channels: a.discriminator_channels,
            batch_size: o.batch_size,
            lr_main: o.lr_main,
            lr_adversarial: a.lr,
            lr_discriminator: a.lr_discriminator,
            weight_decay: o.weight_decay,
            momentum: o.momentum,
            lr_decay_epochs: o.lr_decay_epochs.clone(),
            lr_decay_factor: o.lr_decay_factor,
            seed: m.seed,
            epochs: m.epochs,
            augment: self.dataset.augment(),
            eval_batch_size: o.eval_batch_size,
        }
    }

    /// Training settings of `method.name`; a teacher method uses the
    /// teacher's epochs and learning rate.
    pub fn train_config(&self) -> TrainConfig {
        if self.method.name == Method::Teacher {
            return self.teacher_train_config();
        }
        let mut t = self.common();
        let bpe = self.batches_per_epoch();
        t.k_pretrain_steps = Some(self.adversarial.pretrain_steps.unwrap_or(self.adversarial.pretrain_epochs * bpe));
        t
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            method: Method::Teacher,
            epochs: self.teacher.epochs,
            lr_main: self.teacher.lr_main,
            lr_decay_epochs: self.teacher.lr_decay_epochs.clone(),
            ..self.common()
        }
    }

    pub fn regressor_train_config(&self) -> RegressorTrainConfig {
        RegressorTrainConfig {
            steps: self.teacher.regressor_steps,
            batch_size: self.optimizer.batch_size,
            learning_rate: self.teacher.regressor_lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            seed: self.method.seed,
            augment: self.dataset.augment(),
        }
    }

    fn batches_per_epoch(&self) -> usize {
        let n = self.dataset.classes * self.dataset.train_per_class;
        n.div_ceil(self.optimizer.batch_size.max(1))
    }

    /// Every key path the parser accepts, in document order.
    pub fn key_paths() -> Vec<String> {
        let value = toml::Value::try_from(Self::populated()).expect("config serializes");
        let mut keys = Vec::new();
        if let toml::Value::Table(sections) = value {
            for (section, body) in sections {
                if let toml::Value::Table(fields) = body {
                    keys.extend(fields.keys().map(|k| format!("{section}.{k}")));
                }
            }
        }
        keys
    }

    /// Defaults with every optional key filled in.
    pub fn populated() -> Self {
        let mut c = ExperimentConfig::default();
        c.dataset.train_file = Some(PathBuf::from("data/train.ktds"));
        c.dataset.test_file = Some(PathBuf::from("data/test.ktds"));
        let t = desk::teacher([1, 16, 16], 4);
        c.teacher.generator = Some(t.generator);
        c.teacher.classifier = Some(t.classifier);
        let s = desk::student([1, 16, 16], 4);
        c.student.generator = Some(s.generator);
        c.student.classifier = Some(s.classifier);
        c.adversarial.lr_discriminator = Some(c.adversarial.lr);
        c.adversarial.pretrain_steps = Some(630);
        c.adversarial.iterations = Some(315);
        c
    }
}
