//! The teacher-to-student layer: one convolution that resizes teacher feature
//! maps to the student's feature-map shape.

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, AugmentConfig, Batcher, Dataset};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::metrics::{MetricsRecord, MetricsSink, Phase};
use crate::nn::{init_param, Bound, Network, NetworkState, Part, Sgd};
use crate::rng::{self, streams};
use crate::tensor::{ConvGeometry, NoGrad, Ops, Real, Tape, Tensor};

/// Sizing of the regressor convolution. Per-axis arrays are `[h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegressorSpec {
    /// `[C, H, W]` of teacher feature maps.
    pub teacher_map: [usize; 3],
    /// `[C, H, W]` of student feature maps.
    pub student_map: [usize; 3],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub kernel: [usize; 2],
}

impl RegressorSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.teacher_map[0],
            out_channels: self.student_map[0],
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Checks the sizing equation `(M_t + 2P − K)/S + 1 = M_s` on both axes.
    pub fn validate(&self) -> Result<()> {
        let (ho, wo) = self
            .geometry()
            .output_extent(self.teacher_map[1], self.teacher_map[2])
            .map_err(|e| self.infeasible(e.to_string()))?;
        if [ho, wo] != [self.student_map[1], self.student_map[2]] {
            return Err(self.infeasible(format!("kernel {:?} yields {ho}x{wo}", self.kernel)));
        }
        Ok(())
    }

    fn infeasible(&self, detail: String) -> Error {
        Error::InfeasibleRegressor {
            teacher: self.teacher_map,
            student: self.student_map,
            detail,
        }
    }
}

/// Solves the kernel `K = M_t + 2P − S·(M_s − 1)` on each spatial axis.
pub fn solve_regressor_geometry(
    teacher_map: [usize; 3],
    student_map: [usize; 3],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<RegressorSpec> {
    let infeasible = |detail: String| Error::InfeasibleRegressor {
        teacher: teacher_map,
        student: student_map,
        detail,
    };
    if teacher_map.contains(&0) || student_map.contains(&0) {
        return Err(infeasible("map extents must be positive".into()));
    }
    if stride.contains(&0) {
        return Err(infeasible(format!("stride must be positive, got {stride:?}")));
    }
    let mut kernel = [0usize; 2];
    for axis in 0..2 {
        let (mt, ms) = (teacher_map[axis + 1] as i64, student_map[axis + 1] as i64);
        let (s, p) = (stride[axis] as i64, padding[axis] as i64);
        let k = mt + 2 * p - s * (ms - 1);
        if k < 1 {
            let name = ["height", "width"][axis];
            return Err(infeasible(format!(
                "{name}: kernel {mt} + 2*{p} - {s}*({ms} - 1) = {k} is not positive"
            )));
        }
        kernel[axis] = k as usize;
    }
    let spec = RegressorSpec {
        teacher_map,
        student_map,
        stride,
        padding,
        kernel,
    };
    spec.validate()?;
    Ok(spec)
}

pub const WEIGHT: &str = "regressor.weight";
pub const BIAS: &str = "regressor.bias";

/// Regressor parameters and whether training has finished. A trained
/// regressor is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor<T> {
    pub spec: RegressorSpec,
    pub state: NetworkState<T>,
    pub trained: bool,
}

impl<T: Real> Regressor<T> {
    pub fn init(spec: RegressorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let g = spec.geometry();
        let mut rng = rng::seeded(seed);
        let fan_in = g.patch_len();
        let params = vec![
            init_param(
                WEIGHT.into(),
                Part::Generator,
                vec![g.out_channels, g.in_channels, g.kernel[0], g.kernel[1]],
                fan_in,
                false,
                &mut rng,
            )?,
            init_param(BIAS.into(), Part::Generator, vec![g.out_channels], fan_in, true, &mut rng)?,
        ];
        Ok(Regressor {
            spec,
            state: NetworkState { params },
            trained: false,
        })
    }

    /// Pairs a spec with loaded parameters, checking their shapes.
    pub fn from_parts(spec: RegressorSpec, state: NetworkState<T>, trained: bool) -> Result<Self> {
        spec.validate()?;
        let g = spec.geometry();
        let expected = [
            (WEIGHT, vec![g.out_channels, g.in_channels, g.kernel[0], g.kernel[1]]),
            (BIAS, vec![g.out_channels]),
        ];
        let ok = state.params.len() == 2
            && state
                .params
                .iter()
                .zip(&expected)
                .all(|(p, (name, shape))| p.name == *name && p.value.shape() == shape.as_slice());
        if !ok {
            return Err(Error::Spec(format!("regressor parameters do not match {spec:?}")));
        }
        let mut reg = Regressor { spec, state, trained };
        if trained {
            reg.state.freeze_all(true);
        }
        Ok(reg)
    }

    pub fn bind<O: Ops<T>>(&self, ops: &mut O) -> Bound<O::Value> {
        self.state.bind(ops)
    }

    /// Maps `[N, C_t, H_t, W_t]` teacher maps to `[N, C_s, H_s, W_s]`.
    pub fn apply<O: Ops<T>>(&self, ops: &mut O, bound: &Bound<O::Value>, teacher_map: &O::Value) -> Result<O::Value> {
        let shape = ops.value(teacher_map).shape();
        if shape.len() != 4 || shape[1..] != self.spec.teacher_map {
            return Err(Error::shape(
                "apply_regressor",
                format!("expected teacher maps [N, {:?}], got {shape:?}", self.spec.teacher_map),
            ));
        }
        let [w, b] = bound.values() else {
            unreachable!("regressor binds exactly two parameters")
        };
        ops.conv2d(teacher_map, w, b, self.spec.geometry())
    }

    /// Regressed teacher maps without gradient tracking.
    pub fn regress(&self, teacher_map: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ops = NoGrad::unchecked();
        let bound = self.bind(&mut ops);
        self.apply(&mut ops, &bound, teacher_map)
    }
}

/// Free-standing `apply_regressor` on plain tensors.
pub fn apply_regressor<T: Real>(reg: &Regressor<T>, teacher_map: &Tensor<T>) -> Result<Tensor<T>> {
    reg.regress(teacher_map)
}

/// Settings for training the regressor with the teacher frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        RegressorTrainConfig {
            steps: 200,
            batch_size: 32,
            learning_rate: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

/// Which classifier reads the regressor's output during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegressorHead {
    /// The teacher's own classifier, frozen; used when the student map
    /// shape equals the teacher map shape.
    Teacher,
    /// A fresh single dense layer, trained with the regressor and then
    /// discarded.
    Auxiliary,
}

/// Trains only the regressor (and an auxiliary head if one is needed) by
/// cross-entropy on `classifier(regressor(teacher_generator(x)))`.
/// Returns the trained, frozen regressor and the head that was used.
pub fn train_regressor<T: Real>(
    teacher: &Network<T>,
    mut reg: Regressor<T>,
    data: &Dataset<T>,
    cfg: &RegressorTrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(Regressor<T>, RegressorHead)> {
    let teacher_map = teacher.spec.feature_map_shape()?;
    if teacher_map != reg.spec.teacher_map {
        return Err(Error::shape(
            "train_regressor",
            format!(
                "teacher produces maps {teacher_map:?} but the regressor expects {:?}",
                reg.spec.teacher_map
            ),
        ));
    }
    if data.image_shape() != teacher.spec.input {
        return Err(Error::shape(
            "train_regressor",
            format!("dataset images {:?} vs teacher input {:?}", data.image_shape(), teacher.spec.input),
        ));
    }
    let classes = teacher.spec.num_classes()?;

    let mut frozen_teacher = teacher.clone();
    frozen_teacher.state.freeze_all(true);

    let head_kind = if reg.spec.student_map == teacher_map {
        RegressorHead::Teacher
    } else {
        RegressorHead::Auxiliary
    };
    let features: usize = reg.spec.student_map.iter().product();
    let mut aux = {
        let mut r = rng::stream(cfg.seed, streams::AUX_HEAD);
        NetworkState {
            params: vec![
                init_param("aux.weight".into(), Part::Classifier, vec![features, classes], features, false, &mut r)?,
                init_param("aux.bias".into(), Part::Classifier, vec![classes], features, true, &mut r)?,
            ],
        }
    };

    reg.state.freeze_all(false);
    reg.trained = false;
    let (lr, mu, wd) = (
        T::from_f64_lossy(cfg.learning_rate),
        T::from_f64_lossy(cfg.momentum),
        T::from_f64_lossy(cfg.weight_decay),
    );
    let mut reg_opt = Sgd::new(lr, mu, wd)?;
    let mut aux_opt = Sgd::new(lr, mu, wd)?;
    let batcher = Batcher::new(data.len(), cfg.batch_size, rng::derive(cfg.seed, streams::SHUFFLE))?;
    let mut aug_rng = rng::stream(cfg.seed, streams::AUGMENT);

    for (step, batch) in batcher.take(cfg.steps).enumerate() {
        let b = data.gather(&batch.indices)?;
        let x = augment_batch(&b.images, &cfg.augment, &mut aug_rng)?;
        let m_t = frozen_teacher.feature_map(&x)?;

        let mut tape = Tape::new();
        let reg_bound = reg.bind(&mut tape);
        let input = tape.constant(m_t);
        let regressed = reg.apply(&mut tape, &reg_bound, &input)?;
        let (logits, aux_bound) = match head_kind {
            RegressorHead::Teacher => {
                let tb = frozen_teacher.bind(&mut tape);
                (frozen_teacher.forward_classifier(&mut tape, &tb, &regressed)?, None)
            }
            RegressorHead::Auxiliary => {
                let ab = aux.bind(&mut tape);
                let flat = tape.flatten(&regressed)?;
                let [w, bias] = ab.values() else { unreachable!() };
                (tape.dense(&flat, w, bias)?, Some(ab))
            }
        };
        let ce = cross_entropy(&mut tape, &logits, &b.labels)?;
        let ce_value = ce.scalar(&tape)?;
        let grads = tape.backward(ce.value)?;
        let reg_grads = reg.state.param_grads(&reg_bound, &grads);
        reg_opt.step(&mut reg.state, &reg_grads)?;
        if let Some(ab) = aux_bound {
            let aux_grads = aux.param_grads(&ab, &grads);
            aux_opt.step(&mut aux, &aux_grads)?;
        }

        let mut record = MetricsRecord::new(Phase::Regressor, step as u64);
        record.ce = Some(ce_value.to_f64_lossy());
        record.ensure_finite()?;
        sink.record(&record)?;
    }

    reg.state.freeze_all(true);
    reg.trained = true;
    Ok((reg, head_kind))
}
