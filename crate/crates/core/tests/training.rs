use ktan_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use ktan_core::desk;
use ktan_core::metrics::{Discard, MetricsRecord, Phase};
use ktan_core::nn::{Network, Part};
use ktan_core::regressor::{solve_regressor_geometry, train_regressor, Regressor, RegressorTrainConfig};
use ktan_core::train::{run_experiment, Method, TrainConfig, Trainer};

struct Fixture {
    train: Dataset<f32>,
    test: Dataset<f32>,
    teacher: Network<f32>,
    regressor: Regressor<f32>,
}

fn fixture() -> Fixture {
    let spec = SyntheticSpec {
        train_per_class: 24,
        test_per_class: 8,
        ..SyntheticSpec::default()
    };
    let (train, test) = generate_synthetic::<f32>(&spec, 1).unwrap();
    let cfg = TrainConfig {
        method: Method::Teacher,
        epochs: 1,
        lr_main: 0.01,
        batch_size: 16,
        seed: 2,
        ..TrainConfig::default()
    };
    let ts = desk::teacher([1, 16, 16], 4);
    let mut teacher = run_experiment(&cfg, &ts, &train, &test, None, None, &mut Discard).unwrap().network;
    teacher.state.freeze_all(true);
    let rs = solve_regressor_geometry(
        ts.feature_map_shape().unwrap(),
        desk::student([1, 16, 16], 4).feature_map_shape().unwrap(),
        [1, 1],
        [0, 0],
    )
    .unwrap();
    let rcfg = RegressorTrainConfig {
        steps: 6,
        learning_rate: 0.0005,
        seed: 3,
        ..RegressorTrainConfig::default()
    };
    let (regressor, _) = train_regressor(&teacher, Regressor::init(rs, 3).unwrap(), &train, &rcfg, &mut Discard).unwrap();
    Fixture {
        train,
        test,
        teacher,
        regressor,
    }
}

fn base(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 2,
        batch_size: 16,
        lr_main: 0.01,
        lr_adversarial: 0.002,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn log_of(f: &Fixture, cfg: &TrainConfig) -> Vec<MetricsRecord> {
    let mut log = Vec::new();
    let spec = desk::student([1, 16, 16], 4);
    run_experiment(cfg, &spec, &f.train, &f.test, Some(&f.teacher), Some(&f.regressor), &mut log).unwrap();
    log
}

#[test]
fn reductions_give_identical_logs() {
    let f = fixture();
    let steps = 2 * f.train.len().div_ceil(16);

    let dln = log_of(&f, &base(Method::Dln));
    let ktan = log_of(
        &f,
        &TrainConfig {
            alpha: 0.0,
            k_pretrain_steps: Some(steps),
            adversarial_iterations: Some(0),
            ..base(Method::Ktan)
        },
    );
    assert_eq!(dln, ktan);

    let student = log_of(&f, &base(Method::Student));
    let dln0 = log_of(
        &f,
        &TrainConfig {
            beta: 0.0,
            ..base(Method::Dln)
        },
    );
    assert_eq!(student, dln0);

    let kd = log_of(&f, &base(Method::Kd));
    let ktan_kd = log_of(
        &f,
        &TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            k_pretrain_steps: Some(steps),
            adversarial_iterations: Some(0),
            ..base(Method::KtanKd)
        },
    );
    assert_eq!(kd, ktan_kd);
    assert_ne!(kd, student);
}

#[test]
fn reruns_are_identical() {
    let f = fixture();
    let cfg = TrainConfig {
        k_pretrain_steps: Some(3),
        adversarial_iterations: Some(4),
        ..base(Method::Ktan)
    };
    let a = log_of(&f, &cfg);
    let b = log_of(&f, &cfg);
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|r| r.phase == Some(Phase::Adversarial)).count(), 4);
}

#[test]
fn frozen_components_survive_a_full_run() {
    let f = fixture();
    let teacher_before = f.teacher.state.fingerprint();
    let reg_before = f.regressor.state.fingerprint();
    for method in [Method::Dln, Method::Ktan, Method::KtanKd, Method::Kd] {
        let cfg = TrainConfig {
            k_pretrain_steps: Some(4),
            adversarial_iterations: Some(6),
            ..base(method)
        };
        log_of(&f, &cfg);
        assert_eq!(f.teacher.state.fingerprint(), teacher_before);
        assert_eq!(f.regressor.state.fingerprint(), reg_before);
    }
}

#[test]
fn each_adversarial_sub_update_touches_only_its_parameters() {
    let f = fixture();
    let spec = desk::student([1, 16, 16], 4);
    let mut trainer = Trainer::new(base(Method::Ktan), spec, Some(&f.teacher), Some(&f.regressor)).unwrap();
    let teacher_fp = f.teacher.state.fingerprint();
    let reg_fp = f.regressor.state.fingerprint();
    let fps = |t: &Trainer<f32>| {
        (
            t.network.state.part_fingerprint(Some(Part::Generator)),
            t.network.state.part_fingerprint(Some(Part::Classifier)),
            t.discriminator.as_ref().unwrap().state.fingerprint(),
        )
    };
    for it in 0..10u64 {
        let idx: Vec<usize> = (0..16).map(|i| (i * 7 + it as usize * 16) % f.train.len()).collect();
        let batch = f.train.gather(&idx).unwrap();
        let signals = trainer.teacher_signals(&batch.images, true).unwrap();
        let mut record = MetricsRecord::new(Phase::Adversarial, it);

        let (g0, c0, d0) = fps(&trainer);
        let student_map = trainer.network.feature_map(&batch.images).unwrap();
        let regressed = signals.regressed_map.clone().unwrap();
        trainer.discriminator_update(&student_map, &regressed, &mut record).unwrap();
        let (g1, c1, d1) = fps(&trainer);
        assert_eq!((g1, c1), (g0, c0));
        assert_ne!(d1, d0);

        trainer.generator_update(&batch.images, &batch.labels, &signals, &mut record).unwrap();
        let (g2, c2, d2) = fps(&trainer);
        assert_ne!(g2, g1);
        assert_eq!((c2, d2), (c1, d1));

        trainer.classifier_update(&batch.images, &batch.labels, &signals).unwrap();
        let (g3, c3, d3) = fps(&trainer);
        assert_ne!(c3, c2);
        assert_eq!((g3, d3), (g2, d2));

        assert_eq!(f.teacher.state.fingerprint(), teacher_fp);
        assert_eq!(f.regressor.state.fingerprint(), reg_fp);
        assert!(record.adv_g.unwrap().is_finite());
    }
}
