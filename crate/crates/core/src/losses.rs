//! Training objectives: label cross-entropy, softened-teacher KD, the
//! feature-map MSE and the adversarial pair.
//!
//! Every teacher-derived input is taken as a plain [`Tensor`] and enters the
//! executor as a constant, so no gradient can reach the teacher.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Ops, Real, Tensor};

/// Probabilities fed to a logarithm are clamped into `[P_MIN, 1 − P_MIN]`.
pub const P_MIN: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Ce,
    Kd,
    MseFm,
    AdvG,
    AdvD,
    Total,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Kd => "kd",
            LossKind::MseFm => "mse_fm",
            LossKind::AdvG => "adv_g",
            LossKind::AdvD => "adv_d",
            LossKind::Total => "total",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scalar loss node tagged with the objective it came from.
#[derive(Clone, Debug)]
pub struct LossValue<V> {
    pub value: V,
    pub kind: LossKind,
}

impl<V> LossValue<V> {
    /// Reads the scalar and fails if it is NaN or infinite, naming the term.
    pub fn scalar<T: Real, O: Ops<T, Value = V>>(&self, ops: &O) -> Result<T> {
        let v = ops.value(&self.value).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("{} loss", self.kind)))
        }
    }
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows of logits", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    Ok(())
}

fn logits_dims<T: Real>(op: &'static str, logits: &Tensor<T>) -> Result<(usize, usize)> {
    match logits.shape() {
        [n, k] => Ok((*n, *k)),
        other => Err(Error::shape(op, format!("logits must be [N, K], got {other:?}"))),
    }
}

/// Batch mean of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Real, O: Ops<T>>(
    ops: &mut O,
    logits: &O::Value,
    labels: &[usize],
) -> Result<LossValue<O::Value>> {
    let (n, k) = logits_dims("cross_entropy", ops.value(logits))?;
    check_labels(n, k, labels)?;
    let log_probs = ops.log_softmax(logits)?;
    let picked = ops.pick(&log_probs, labels)?;
    let mean = ops.mean(&picked)?;
    Ok(LossValue {
        value: ops.scale(&mean, -T::one())?,
        kind: LossKind::Ce,
    })
}

/// Knowledge-distillation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdSettings<T> {
    pub temperature: T,
    /// Weight of the softened-teacher term; `1 − w` goes to the label term.
    pub teacher_weight: T,
    /// Multiply the softened term by `T²` so its gradient scale does not
    /// shrink with temperature.
    pub scale_by_t2: bool,
}

impl<T: Real> KdSettings<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > T::zero()) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "KD temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.teacher_weight >= T::zero() && self.teacher_weight <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "KD teacher weight must lie in [0, 1], got {}",
                self.teacher_weight
            )));
        }
        Ok(())
    }
}

/// Teacher soft targets `softmax(teacher_logits / T)`.
pub fn soft_targets<T: Real>(teacher_logits: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    let inv = T::one() / temperature;
    kernels::softmax(&teacher_logits.map(|v| v * inv))
}

/// `w·T²·CE(softmax(t/T), log_softmax(s/T)) + (1 − w)·CE(s, y)`.
pub fn kd_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    student_logits: &O::Value,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    settings: KdSettings<T>,
) -> Result<LossValue<O::Value>> {
    settings.validate()?;
    if ops.value(student_logits).shape() != teacher_logits.shape() {
        return Err(Error::shape(
            "kd_loss",
            format!(
                "student logits {:?} vs teacher logits {:?}",
                ops.value(student_logits).shape(),
                teacher_logits.shape()
            ),
        ));
    }
    let (n, _) = logits_dims("kd_loss", teacher_logits)?;
    let t = settings.temperature;
    let targets = ops.constant(soft_targets(teacher_logits, t)?);
    let softened = ops.scale(student_logits, T::one() / t)?;
    let log_probs = ops.log_softmax(&softened)?;
    let weighted = ops.mul(&log_probs, &targets)?;
    let total = ops.sum(&weighted)?;
    let soft_ce = ops.scale(&total, -T::one() / T::from_usize(n).unwrap())?;

    let hard = cross_entropy(ops, student_logits, labels)?;
    let w = settings.teacher_weight;
    let soft_scale = if settings.scale_by_t2 { w * t * t } else { w };
    let soft_term = ops.scale(&soft_ce, soft_scale)?;
    let hard_term = ops.scale(&hard.value, T::one() - w)?;
    Ok(LossValue {
        value: ops.add(&soft_term, &hard_term)?,
        kind: LossKind::Kd,
    })
}

/// Mean squared difference over every element of equal-shaped maps.
pub fn mse_feature_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    teacher_map: &Tensor<T>,
    student_map: &O::Value,
) -> Result<LossValue<O::Value>> {
    let s_shape = ops.value(student_map).shape();
    if s_shape != teacher_map.shape() {
        return Err(Error::shape(
            "mse_feature_loss",
            format!(
                "regressed teacher map {:?} and student map {s_shape:?} differ; the regressor is mis-sized",
                teacher_map.shape()
            ),
        ));
    }
    let target = ops.constant(teacher_map.clone());
    let diff = ops.sub(student_map, &target)?;
    let sq = ops.square(&diff)?;
    Ok(LossValue {
        value: ops.mean(&sq)?,
        kind: LossKind::MseFm,
    })
}

fn check_probabilities<T: Real>(what: &str, p: &Tensor<T>) -> Result<()> {
    if let Some(v) = p.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::InvalidArgument(format!(
            "{what} must be probabilities in [0, 1], found {v}"
        )));
    }
    Ok(())
}

fn clamped_log<T: Real, O: Ops<T>>(ops: &mut O, p: &O::Value, complement: bool) -> Result<O::Value> {
    let lo = T::from_f64_lossy(P_MIN);
    let c = ops.clamp(p, lo, T::one() - lo)?;
    let arg = if complement {
        ops.affine(&c, -T::one(), T::one())?
    } else {
        c
    };
    ops.log(&arg)
}

/// Discriminator objective with teacher maps labelled 1 and student maps 0:
/// `mean(−log D(teacher)) + mean(−log(1 − D(student)))`.
pub fn discriminator_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    d_teacher: &O::Value,
    d_student: &O::Value,
) -> Result<LossValue<O::Value>> {
    check_probabilities("discriminator outputs on teacher maps", ops.value(d_teacher))?;
    check_probabilities("discriminator outputs on student maps", ops.value(d_student))?;
    let real = clamped_log(ops, d_teacher, false)?;
    let fake = clamped_log(ops, d_student, true)?;
    let real = ops.mean(&real)?;
    let fake = ops.mean(&fake)?;
    let sum = ops.add(&real, &fake)?;
    Ok(LossValue {
        value: ops.scale(&sum, -T::one())?,
        kind: LossKind::AdvD,
    })
}

/// Non-saturating generator term `mean(−log D(student))`: small when the
/// discriminator takes student maps for teacher maps.
pub fn generator_adversarial_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    d_student: &O::Value,
) -> Result<LossValue<O::Value>> {
    check_probabilities("discriminator outputs on student maps", ops.value(d_student))?;
    let l = clamped_log(ops, d_student, false)?;
    let m = ops.mean(&l)?;
    Ok(LossValue {
        value: ops.scale(&m, -T::one())?,
        kind: LossKind::AdvG,
    })
}

/// `task + α·adv_g + β·mse_fm`, the student-generator objective of the
/// adversarial phase. `task` is cross-entropy or, when combined with KD,
/// the KD loss.
pub fn student_total_loss<T: Real, O: Ops<T>>(
    ops: &mut O,
    task: &LossValue<O::Value>,
    adv_g: &LossValue<O::Value>,
    mse_fm: &LossValue<O::Value>,
    alpha: T,
    beta: T,
) -> Result<LossValue<O::Value>> {
    if !(alpha >= T::zero()) || !(beta >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative: alpha={alpha} beta={beta}"
        )));
    }
    let a = ops.scale(&adv_g.value, alpha)?;
    let b = ops.scale(&mse_fm.value, beta)?;
    let partial = ops.add(&task.value, &a)?;
    Ok(LossValue {
        value: ops.add(&partial, &b)?,
        kind: LossKind::Total,
    })
}

/// `task + β·mse_fm`, or just `task` when there is no transfer term.
pub fn with_transfer<T: Real, O: Ops<T>>(
    ops: &mut O,
    task: LossValue<O::Value>,
    mse_fm: Option<&LossValue<O::Value>>,
    beta: T,
) -> Result<LossValue<O::Value>> {
    match mse_fm {
        None => Ok(task),
        Some(m) => {
            let b = ops.scale(&m.value, beta)?;
            Ok(LossValue {
                value: ops.add(&task.value, &b)?,
                kind: LossKind::Total,
            })
        }
    }
}
