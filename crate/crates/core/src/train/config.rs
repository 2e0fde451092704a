use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The large network on labels alone.
    Teacher,
    /// The small network on labels alone.
    Student,
    /// Labels plus softened teacher logits.
    Kd,
    /// Labels plus feature-map regression onto the regressed teacher map.
    Dln,
    /// Feature-map pretraining followed by adversarial feature-map transfer.
    Ktan,
    /// Ktan with the label loss replaced by the KD loss.
    KtanKd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Teacher,
        Method::Student,
        Method::Kd,
        Method::Dln,
        Method::Ktan,
        Method::KtanKd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Teacher => "teacher",
            Method::Student => "student",
            Method::Kd => "kd",
            Method::Dln => "dln",
            Method::Ktan => "ktan",
            Method::KtanKd => "ktan_kd",
        }
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, Method::Teacher | Method::Student)
    }

    pub fn needs_regressor(self) -> bool {
        matches!(self, Method::Dln | Method::Ktan | Method::KtanKd)
    }

    pub fn uses_kd(self) -> bool {
        matches!(self, Method::Kd | Method::KtanKd)
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Method::Ktan | Method::KtanKd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::InvalidArgument(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight of the generator adversarial term.
    pub alpha: f64,
    /// Weight of the feature-map MSE term.
    pub beta: f64,
    pub temperature: f64,
    /// Weight of the softened-teacher term in the KD loss.
    pub kd_weight: f64,
    pub kd_scale_t2: bool,
    /// Feature-map weight used by dln when `fitnet_weighting` is set.
    pub fitnet_weight: f64,
    pub fitnet_weighting: bool,
    /// Supervised steps before the adversarial phase; one epoch if unset.
    pub k_pretrain_steps: Option<usize>,
    /// Adversarial iterations; the remainder of the epoch budget if unset.
    pub adversarial_iterations: Option<usize>,
    /// Discriminator updates per student update.
    pub discriminator_steps: usize,
    pub discriminator_channels: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_adversarial: f64,
    /// Discriminator learning rate; `lr_adversarial` if unset.
    pub lr_discriminator: Option<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Epochs at which `lr_main` is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ktan,
            alpha: 0.6,
            beta: 0.5,
            temperature: 4.0,
            kd_weight: 0.9,
            kd_scale_t2: true,
            fitnet_weight: 4.0,
            fitnet_weighting: false,
            k_pretrain_steps: None,
            adversarial_iterations: None,
            discriminator_steps: 1,
            discriminator_channels: 16,
            batch_size: 32,
            lr_main: 0.2,
            lr_adversarial: 1e-2,
            lr_discriminator: None,
            weight_decay: 1e-4,
            momentum: 0.9,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            seed: 0,
            epochs: 15,
            augment: AugmentConfig::default(),
            eval_batch_size: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("fitnet_weight", self.fitnet_weight),
            ("lr_main", self.lr_main),
            ("lr_adversarial", self.lr_adversarial),
            ("lr_discriminator", self.discriminator_lr()),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(Error::InvalidArgument(format!("kd_weight must lie in [0, 1], got {}", self.kd_weight)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("discriminator_steps", self.discriminator_steps),
            ("discriminator_channels", self.discriminator_channels),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        self.augment.validate()
    }

    pub fn discriminator_lr(&self) -> f64 {
        self.lr_discriminator.unwrap_or(self.lr_adversarial)
    }

    /// Learning rate of supervised updates during `epoch`.
    pub fn main_lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr_main * self.lr_decay_factor.powi(drops as i32)
    }

    /// Feature-map weight of the supervised phase.
    pub fn transfer_weight(&self) -> f64 {
        match self.method {
            Method::Dln if self.fitnet_weighting => self.fitnet_weight,
            Method::Dln | Method::Ktan | Method::KtanKd => self.beta,
            _ => 0.0,
        }
    }

    /// `(pretrain steps, adversarial iterations)` for `batches_per_epoch`.
    pub fn step_budget(&self, batches_per_epoch: usize) -> (usize, usize) {
        let total = self.epochs * batches_per_epoch;
        if self.method.is_adversarial() {
            let k = self.k_pretrain_steps.unwrap_or(batches_per_epoch);
            let a = self.adversarial_iterations.unwrap_or(total.saturating_sub(k));
            (k, a)
        } else {
            (total, 0)
        }
    }
}
