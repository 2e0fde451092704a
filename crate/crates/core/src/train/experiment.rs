use super::config::{Method, TrainConfig};
use super::discriminator::{Discriminator, DiscriminatorSpec};
use super::evaluate::evaluate;
use crate::data::{augment_batch, Batcher, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, discriminator_loss, generator_adversarial_loss, kd_loss, mse_feature_loss, student_total_loss,
    with_transfer, KdSettings, LossValue,
};
use crate::metrics::{MetricsRecord, MetricsSink, Phase};
use crate::nn::{record_forward, Network, NetworkSpec, Part, Sgd};
use crate::regressor::Regressor;
use crate::rng::{self, streams};
use crate::tensor::{NoGrad, Ops, Real, Tape, Tensor, Var};

/// Teacher-side inputs for one batch, computed once and shared by every
/// sub-update of the iteration.
#[derive(Clone, Debug, Default)]
pub struct TeacherSignals<T> {
    /// `regressor(teacher_generator(x))`, shaped like a student map.
    pub regressed_map: Option<Tensor<T>>,
    pub logits: Option<Tensor<T>>,
}

/// Position of a run: the phase it is in and the step within that phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cursor {
    pub phase: Phase,
    pub iteration: u64,
}

/// State of one training run. The teacher and regressor are only ever
/// borrowed immutably.
pub struct Trainer<'a, T: Real> {
    pub cfg: TrainConfig,
    pub network: Network<T>,
    pub optimizer: Sgd<T>,
    pub discriminator: Option<Discriminator<T>>,
    pub discriminator_optimizer: Option<Sgd<T>>,
    teacher: Option<&'a Network<T>>,
    regressor: Option<&'a Regressor<T>>,
}

fn real<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<'a, T: Real> Trainer<'a, T> {
    /// Initializes the network to train from `spec` and checks that the
    /// frozen components fit it.
    pub fn new(
        cfg: TrainConfig,
        spec: NetworkSpec,
        teacher: Option<&'a Network<T>>,
        regressor: Option<&'a Regressor<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let method = cfg.method;
        let teacher = if method.needs_teacher() {
            Some(teacher.ok_or_else(|| Error::Missing(format!("method {method} needs a trained teacher")))?)
        } else {
            None
        };
        let regressor = if method.needs_regressor() {
            Some(regressor.ok_or_else(|| Error::Missing(format!("method {method} needs a trained regressor")))?)
        } else {
            None
        };

        let student_map = spec.feature_map_shape()?;
        if let Some(t) = teacher {
            if t.spec.num_classes()? != spec.num_classes()? || t.spec.input != spec.input {
                return Err(Error::Spec(format!(
                    "teacher {} and student {} disagree on input shape or class count",
                    t.spec.name, spec.name
                )));
            }
        }
        if let (Some(t), Some(r)) = (teacher, regressor) {
            if r.spec.teacher_map != t.spec.feature_map_shape()? || r.spec.student_map != student_map {
                return Err(Error::shape(
                    "regressor",
                    format!(
                        "regressor maps {:?} -> {:?}, but teacher maps are {:?} and student maps {:?}",
                        r.spec.teacher_map,
                        r.spec.student_map,
                        t.spec.feature_map_shape()?,
                        student_map
                    ),
                ));
            }
            if !r.trained {
                return Err(Error::Missing("the regressor has not been trained".into()));
            }
        }

        let network = Network::init(spec, rng::derive(cfg.seed, streams::INIT))?;
        let optimizer = Sgd::new(real(cfg.lr_main), real(cfg.momentum), real(cfg.weight_decay))?;
        let (discriminator, discriminator_optimizer) = if method.is_adversarial() {
            let d = Discriminator::init(
                DiscriminatorSpec {
                    input: student_map,
                    channels: cfg.discriminator_channels,
                },
                rng::derive(cfg.seed, streams::DISCRIMINATOR),
            )?;
            let opt = Sgd::new(real(cfg.discriminator_lr()), real(cfg.momentum), real(cfg.weight_decay))?;
            (Some(d), Some(opt))
        } else {
            (None, None)
        };
        Ok(Trainer {
            cfg,
            network,
            optimizer,
            discriminator,
            discriminator_optimizer,
            teacher,
            regressor,
        })
    }

    pub fn teacher(&self) -> Option<&'a Network<T>> {
        self.teacher
    }

    pub fn regressor(&self) -> Option<&'a Regressor<T>> {
        self.regressor
    }

    fn kd_settings(&self) -> KdSettings<T> {
        KdSettings {
            temperature: real(self.cfg.temperature),
            teacher_weight: real(self.cfg.kd_weight),
            scale_by_t2: self.cfg.kd_scale_t2,
        }
    }

    /// Runs the frozen teacher (and regressor) on `x`, computing only what
    /// the requested updates consume.
    pub fn teacher_signals(&self, x: &Tensor<T>, need_map: bool) -> Result<TeacherSignals<T>> {
        let Some(teacher) = self.teacher else {
            return Ok(TeacherSignals::default());
        };
        let need_logits = self.cfg.method.uses_kd();
        let need_map = need_map && self.regressor.is_some();
        if !need_map && !need_logits {
            return Ok(TeacherSignals::default());
        }
        let m_t = teacher.feature_map(x)?;
        let logits = if need_logits { Some(teacher.classify_map(&m_t)?) } else { None };
        let regressed_map = match self.regressor {
            Some(r) if need_map => Some(r.regress(&m_t)?),
            _ => None,
        };
        Ok(TeacherSignals { regressed_map, logits })
    }

    /// Label loss or KD loss on `logits`, recording its components.
    fn task_loss(
        &self,
        tape: &mut Tape<T>,
        logits: &Var,
        labels: &[usize],
        signals: &TeacherSignals<T>,
        record: &mut MetricsRecord,
    ) -> Result<LossValue<Var>> {
        if self.cfg.method.uses_kd() {
            let teacher_logits = signals
                .logits
                .as_ref()
                .ok_or_else(|| Error::Missing("teacher logits for the KD loss".into()))?;
            let kd = kd_loss(tape, logits, teacher_logits, labels, self.kd_settings())?;
            let ce = cross_entropy(&mut NoGrad::unchecked(), tape.value(logits), labels)?;
            record.ce = Some(ce.scalar(&NoGrad::unchecked())?.to_f64_lossy());
            record.kd = Some(kd.scalar(tape)?.to_f64_lossy());
            Ok(kd)
        } else {
            let ce = cross_entropy(tape, logits, labels)?;
            record.ce = Some(ce.scalar(tape)?.to_f64_lossy());
            Ok(ce)
        }
    }

    fn regressed<'s>(&self, signals: &'s TeacherSignals<T>) -> Result<&'s Tensor<T>> {
        signals
            .regressed_map
            .as_ref()
            .ok_or_else(|| Error::Missing("regressed teacher map for this batch".into()))
    }

    /// One joint update of the whole network by the task loss plus the
    /// weighted feature-map term when its weight is positive.
    pub fn supervised_step(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        signals: &TeacherSignals<T>,
        iteration: u64,
    ) -> Result<MetricsRecord> {
        let mut record = MetricsRecord::new(Phase::Pretrain, iteration);
        let mut tape = Tape::unchecked();
        let (bound, map, logits) = record_forward(&self.network, &mut tape, x)?;
        let task = self.task_loss(&mut tape, &logits, labels, signals, &mut record)?;
        let weight = self.cfg.transfer_weight();
        let mse = if weight > 0.0 {
            let m = mse_feature_loss(&mut tape, self.regressed(signals)?, &map)?;
            record.mse_fm = Some(m.scalar(&tape)?.to_f64_lossy());
            Some(m)
        } else {
            None
        };
        let loss = with_transfer(&mut tape, task, mse.as_ref(), real(weight))?;
        loss.scalar(&tape)?;
        let grads = tape.backward(loss.value)?;
        let g = self.network.param_grads(&bound, &grads);
        self.optimizer.step(&mut self.network.state, &g)?;
        Ok(record)
    }

    fn discriminator_parts(&mut self) -> Result<(&mut Discriminator<T>, &mut Sgd<T>)> {
        match (&mut self.discriminator, &mut self.discriminator_optimizer) {
            (Some(d), Some(o)) => Ok((d, o)),
            _ => Err(Error::Missing(format!(
                "method {} has no discriminator",
                self.cfg.method
            ))),
        }
    }

    /// Updates only the discriminator, with teacher maps labelled 1 and
    /// student maps 0. Both inputs are constants.
    pub fn discriminator_update(
        &mut self,
        student_map: &Tensor<T>,
        regressed_map: &Tensor<T>,
        record: &mut MetricsRecord,
    ) -> Result<()> {
        let steps = self.cfg.discriminator_steps;
        let (disc, opt) = self.discriminator_parts()?;
        for i in 0..steps {
            let mut tape = Tape::unchecked();
            let bound = disc.bind(&mut tape);
            let s = tape.constant(student_map.clone());
            let t = tape.constant(regressed_map.clone());
            let d_student = disc.forward(&mut tape, &bound, &s)?;
            let d_teacher = disc.forward(&mut tape, &bound, &t)?;
            let loss = discriminator_loss(&mut tape, &d_teacher, &d_student)?;
            let value = loss.scalar(&tape)?;
            if i == 0 {
                record.adv_d = Some(value.to_f64_lossy());
                record.d_teacher = Some(tape.value(&d_teacher).mean().to_f64_lossy());
                record.d_student = Some(tape.value(&d_student).mean().to_f64_lossy());
            }
            let grads = tape.backward(loss.value)?;
            let g = disc.state.param_grads(&bound, &grads);
            opt.step(&mut disc.state, &g)?;
        }
        Ok(())
    }

    /// Updates only the student generator by
    /// `task + α·adv_g + β·mse_fm`. Gradients pass through the
    /// discriminator and classifier, whose parameters stay fixed.
    pub fn generator_update(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        signals: &TeacherSignals<T>,
        record: &mut MetricsRecord,
    ) -> Result<()> {
        let regressed = self.regressed(signals)?;
        let disc = self
            .discriminator
            .take()
            .ok_or_else(|| Error::Missing("discriminator".into()))?;
        self.network.state.set_part_frozen(Part::Classifier, true);
        let result = (|| -> Result<()> {
            let mut tape = Tape::unchecked();
            let (bound, map, logits) = record_forward(&self.network, &mut tape, x)?;
            let task = self.task_loss(&mut tape, &logits, labels, signals, record)?;
            let d_bound = disc.state.bind_constants(&mut tape);
            let d_student = disc.forward(&mut tape, &d_bound, &map)?;
            let adv_g = generator_adversarial_loss(&mut tape, &d_student)?;
            let mse = mse_feature_loss(&mut tape, regressed, &map)?;
            record.adv_g = Some(adv_g.scalar(&tape)?.to_f64_lossy());
            record.mse_fm = Some(mse.scalar(&tape)?.to_f64_lossy());
            let total = student_total_loss(&mut tape, &task, &adv_g, &mse, real(self.cfg.alpha), real(self.cfg.beta))?;
            total.scalar(&tape)?;
            let grads = tape.backward(total.value)?;
            let g = self.network.param_grads(&bound, &grads);
            self.optimizer.step(&mut self.network.state, &g)
        })();
        self.network.state.set_part_frozen(Part::Classifier, false);
        self.discriminator = Some(disc);
        result
    }

    /// Updates only the classifier by the task loss on the current
    /// student maps.
    pub fn classifier_update(&mut self, x: &Tensor<T>, labels: &[usize], signals: &TeacherSignals<T>) -> Result<()> {
        let map = self.network.feature_map(x)?;
        self.network.state.set_part_frozen(Part::Generator, true);
        let result = (|| -> Result<()> {
            let mut tape = Tape::unchecked();
            let bound = self.network.bind(&mut tape);
            let m = tape.constant(map);
            let logits = self.network.forward_classifier(&mut tape, &bound, &m)?;
            let mut scratch = MetricsRecord::default();
            let task = self.task_loss(&mut tape, &logits, labels, signals, &mut scratch)?;
            let grads = tape.backward(task.value)?;
            let g = self.network.param_grads(&bound, &grads);
            self.optimizer.step(&mut self.network.state, &g)
        })();
        self.network.state.set_part_frozen(Part::Generator, false);
        result
    }

    /// One adversarial iteration: discriminator, then student generator,
    /// then classifier, each seeing the parameters left by the previous
    /// sub-update.
    pub fn adversarial_step(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        signals: &TeacherSignals<T>,
        iteration: u64,
    ) -> Result<MetricsRecord> {
        let mut record = MetricsRecord::new(Phase::Adversarial, iteration);
        let student_map = self.network.feature_map(x)?;
        let regressed = self.regressed(signals)?.clone();
        self.discriminator_update(&student_map, &regressed, &mut record)?;
        self.generator_update(x, labels, signals, &mut record)?;
        self.classifier_update(x, labels, signals)?;
        Ok(record)
    }
}

/// Result of a finished run.
pub struct Outcome<T: Real> {
    pub network: Network<T>,
    pub optimizer: Sgd<T>,
    pub discriminator: Option<Discriminator<T>>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub pretrain_steps: usize,
    pub adversarial_iterations: usize,
    pub cursor: Cursor,
}

/// Trains a network of shape `spec` by `cfg.method`. Every step emits a
/// record; each completed epoch (and the end of the run) emits an eval
/// record with train and test accuracy.
pub fn run_experiment<T: Real>(
    cfg: &TrainConfig,
    spec: &NetworkSpec,
    train: &Dataset<T>,
    test: &Dataset<T>,
    teacher: Option<&Network<T>>,
    regressor: Option<&Regressor<T>>,
    sink: &mut dyn MetricsSink,
) -> Result<Outcome<T>> {
    if train.image_shape() != spec.input || test.image_shape() != spec.input {
        return Err(Error::shape(
            "run_experiment",
            format!("dataset images {:?} vs network input {:?}", train.image_shape(), spec.input),
        ));
    }
    if train.classes() != spec.num_classes()? {
        return Err(Error::Spec(format!(
            "dataset has {} classes, network {} has {}",
            train.classes(),
            spec.name,
            spec.num_classes()?
        )));
    }
    let mut trainer = Trainer::new(cfg.clone(), spec.clone(), teacher, regressor)?;
    let batcher = Batcher::new(train.len(), cfg.batch_size, rng::derive(cfg.seed, streams::SHUFFLE))?;
    let (k, a) = cfg.step_budget(batcher.batches_per_epoch());
    if k + a == 0 {
        return Err(Error::InvalidArgument("the run has no training steps".into()));
    }
    let mut aug_rng = rng::stream(cfg.seed, streams::AUGMENT);
    let needs_map_in_pretrain = cfg.transfer_weight() > 0.0;

    let (mut best_epoch, mut best_acc) = (0, f64::NEG_INFINITY);
    let (mut train_acc, mut test_acc) = (0.0, 0.0);
    let mut cursor = Cursor {
        phase: Phase::Pretrain,
        iteration: 0,
    };
    for (step, b) in batcher.take(k + a).enumerate() {
        let batch = train.gather(&b.indices)?;
        let x = augment_batch(&batch.images, &cfg.augment, &mut aug_rng)?;
        let record = if step < k {
            trainer.optimizer.learning_rate = real(cfg.main_lr_at(b.epoch));
            let signals = trainer.teacher_signals(&x, needs_map_in_pretrain)?;
            cursor = Cursor {
                phase: Phase::Pretrain,
                iteration: step as u64 + 1,
            };
            trainer.supervised_step(&x, &batch.labels, &signals, step as u64)?
        } else {
            trainer.optimizer.learning_rate = real(cfg.lr_adversarial);
            let signals = trainer.teacher_signals(&x, true)?;
            let it = (step - k) as u64;
            cursor = Cursor {
                phase: Phase::Adversarial,
                iteration: it + 1,
            };
            trainer.adversarial_step(&x, &batch.labels, &signals, it)?
        };
        record.ensure_finite()?;
        sink.record(&record)?;

        if b.last_in_epoch || step + 1 == k + a {
            train_acc = evaluate(&trainer.network, train, cfg.eval_batch_size)?;
            test_acc = evaluate(&trainer.network, test, cfg.eval_batch_size)?;
            let epoch = b.epoch + 1;
            if test_acc > best_acc {
                best_acc = test_acc;
                best_epoch = epoch;
            }
            let mut eval = MetricsRecord::new(Phase::Eval, epoch as u64);
            eval.train_acc = Some(train_acc);
            eval.test_acc = Some(test_acc);
            eval.lr = Some(trainer.optimizer.learning_rate.to_f64_lossy());
            sink.record(&eval)?;
        }
    }

    Ok(Outcome {
        network: trainer.network,
        optimizer: trainer.optimizer,
        discriminator: trainer.discriminator,
        train_accuracy: train_acc,
        test_accuracy: test_acc,
        best_epoch,
        best_test_accuracy: best_acc,
        pretrain_steps: k,
        adversarial_iterations: a,
        cursor,
    })
}

/// The network a method trains: the teacher spec for `Method::Teacher`,
/// otherwise the student spec.
pub fn network_for(method: Method, teacher: &NetworkSpec, student: &NetworkSpec) -> NetworkSpec {
    if method == Method::Teacher {
        teacher.clone()
    } else {
        student.clone()
    }
}
