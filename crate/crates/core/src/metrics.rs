//! Per-iteration training records.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Teacher-to-student layer training with the teacher frozen.
    Regressor,
    /// Supervised updates, with or without a transfer term.
    Pretrain,
    Adversarial,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Regressor => "regressor",
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
            Phase::Eval => "eval",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regressor" => Ok(Phase::Regressor),
            "pretrain" => Ok(Phase::Pretrain),
            "adversarial" => Ok(Phase::Adversarial),
            "eval" => Ok(Phase::Eval),
            other => Err(Error::Format(format!("unknown phase {other:?}"))),
        }
    }
}

/// One training or evaluation event. Absent fields were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Option<Phase>,
    /// Step index within the phase; the epoch number for eval records.
    pub iteration: u64,
    pub ce: Option<f64>,
    pub kd: Option<f64>,
    pub mse_fm: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d: Option<f64>,
    /// Mean discriminator output on regressed teacher maps.
    pub d_teacher: Option<f64>,
    /// Mean discriminator output on student maps.
    pub d_student: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub lr: Option<f64>,
}

impl MetricsRecord {
    pub fn new(phase: Phase, iteration: u64) -> Self {
        MetricsRecord {
            phase: Some(phase),
            iteration,
            ..Default::default()
        }
    }

    /// `(key, value)` pairs of every present numeric field, in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        [
            ("ce", self.ce),
            ("kd", self.kd),
            ("mse_fm", self.mse_fm),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("d_teacher", self.d_teacher),
            ("d_student", self.d_student),
            ("train_acc", self.train_acc),
            ("test_acc", self.test_acc),
            ("lr", self.lr),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    /// Sets a numeric field by key.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot = match key {
            "ce" => &mut self.ce,
            "kd" => &mut self.kd,
            "mse_fm" => &mut self.mse_fm,
            "adv_g" => &mut self.adv_g,
            "adv_d" => &mut self.adv_d,
            "d_teacher" => &mut self.d_teacher,
            "d_student" => &mut self.d_student,
            "train_acc" => &mut self.train_acc,
            "test_acc" => &mut self.test_acc,
            "lr" => &mut self.lr,
            other => return Err(Error::Format(format!("unknown metrics key {other:?}"))),
        };
        *slot = Some(value);
        Ok(())
    }

    /// Fails on the first non-finite value, naming it.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.values().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((k, v)) => Err(Error::NonFinite(format!(
                "{k}={v} at {} iteration {}",
                self.phase.map_or("?", Phase::as_str),
                self.iteration
            ))),
            None => Ok(()),
        }
    }
}

/// Receives records as they are produced.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards every record.
#[derive(Clone, Copy, Debug, Default)]
pub struct Discard;

impl MetricsSink for Discard {
    fn record(&mut self, _: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}
