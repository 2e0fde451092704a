//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;

use ktan_cli::compare::{compare_configs, load_method_configs, seed_dir, seed_layout, CompareOptions};
use ktan_cli::config::ExperimentConfig;
use ktan_cli::log::read_log;
use ktan_cli::run::{self, load_data, load_regressor, load_teacher, CHECKPOINT_FILE, METRICS_FILE};
use ktan_core::losses::{cross_entropy, discriminator_loss, kd_loss, mse_feature_loss, KdSettings};
use ktan_core::metrics::{Discard, MetricsRecord, Phase};
use ktan_core::nn::Part;
use ktan_core::rng;
use ktan_core::tensor::{NoGrad, Tape, Tensor};
use ktan_core::train::{run_experiment, Method, Trainer};
use ktan_core::verify::{check_conv, gradient_suite, sweep_regressor_geometry, GRADIENT_CASES};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const COMPARED: [Method; 3] = [Method::Student, Method::Dln, Method::Ktan];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("aborted: {msg}"))
        }
    }
}

fn conv_oracle() -> Verdict {
    let t = Instant::now();
    let c = check_conv(256, 11).unwrap();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        c.geometries >= 200 && c.max_abs_error <= 1e-10 && secs < 30.0,
        format!(
            "{} geometries, max abs error {:.2e} (limit 1e-10), {secs:.1} s (limit 30 s)",
            c.geometries, c.max_abs_error
        ),
    )
}

fn gradient_check() -> Verdict {
    let t = Instant::now();
    let cases = gradient_suite(1e-5, 0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .unwrap();
    let covered = GRADIENT_CASES
        .iter()
        .all(|n| cases.iter().filter(|c| c.name == *n).count() == 1)
        && cases.len() == GRADIENT_CASES.len();
    let losses = ["ce", "kd", "mse_fm", "adv_g", "adv_d", "student_total"];
    let has_losses = losses.iter().all(|l| cases.iter().any(|c| c.name == *l));
    verdict(
        covered && has_losses && worst.max_relative_error < 1e-4 && secs < 60.0,
        format!(
            "{} operations and losses, worst {} at {:.2e} (limit 1e-4, eps 1e-5), {secs:.1} s (limit 60 s)",
            cases.len(),
            worst.name,
            worst.max_relative_error
        ),
    )
}

fn regressor_sweep() -> Verdict {
    let t = Instant::now();
    let s = sweep_regressor_geometry(16);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        s.mismatches.is_empty() && s.cases == 16 * 16 * 2 * 2 && secs < 5.0,
        format!(
            "{} cases ({} feasible, {} rejected), {} mismatches, {secs:.2} s (limit 5 s)",
            s.cases,
            s.feasible,
            s.rejected,
            s.mismatches.len()
        ),
    )
}

fn random_tensor(r: &mut rng::Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn loss_algebra() -> Verdict {
    let mut r = rng::seeded(4);
    let (mut kd_exact, mut mse_zero, mut chance_err, mut uniform_err) = (true, true, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = r.random_range(1..6usize);
        let k = r.random_range(2..11usize);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let s = random_tensor(&mut r, &[n, k], 4.0);
        let te = random_tensor(&mut r, &[n, k], 4.0);
        let settings = KdSettings {
            temperature: r.random_range(0.5..8.0),
            teacher_weight: 0.0,
            scale_by_t2: r.random_bool(0.5),
        };
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let kd = kd_loss(&mut tape, &sv, &te, &labels, settings).unwrap();
        let kd_val = kd.scalar(&tape).unwrap();
        let kd_grad = tape.backward(kd.value).unwrap().get(sv).unwrap().clone();
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let ce = cross_entropy(&mut tape, &sv, &labels).unwrap();
        let ce_val = ce.scalar(&tape).unwrap();
        let ce_grad = tape.backward(ce.value).unwrap().get(sv).unwrap().clone();
        kd_exact &= kd_val.to_bits() == ce_val.to_bits()
            && kd_grad.data().iter().zip(ce_grad.data()).all(|(a, b)| a.to_bits() == b.to_bits());

        let x = random_tensor(&mut r, &[n, 3, 2, 2], 2.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let m = mse_feature_loss(&mut tape, &x, &xv).unwrap();
        let mv = m.scalar(&tape).unwrap();
        let g = tape.backward(m.value).unwrap();
        mse_zero &= mv == 0.0 && g.get(xv).unwrap().data().iter().all(|&v| v == 0.0);

        let half = Tensor::full([n, 1], 0.5).unwrap();
        let mut ops = NoGrad::new();
        let d = discriminator_loss(&mut ops, &half, &half).unwrap().scalar(&ops).unwrap();
        chance_err = chance_err.max((d - 2.0 * 2f64.ln()).abs());

        let c = r.random_range(-20.0..20.0);
        let flat = Tensor::full([n, k], c).unwrap();
        let u = cross_entropy(&mut ops, &flat, &labels).unwrap().scalar(&ops).unwrap();
        uniform_err = uniform_err.max((u - (k as f64).ln()).abs());
    }
    verdict(
        kd_exact && mse_zero && chance_err <= 1e-9 && uniform_err <= 1e-9,
        format!(
            "kd(w=0) = ce bit-exact: {kd_exact}; mse(x,x) = 0 with zero gradient: {mse_zero}; \
             chance discriminator loss error {chance_err:.1e}; uniform ce error {uniform_err:.1e} (limits 1e-9)"
        ),
    )
}

/// Desk configs of the compared methods, laid out for `seed` under `root`.
fn desk(root: &Path, seed: u64) -> Vec<ExperimentConfig> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk");
    load_method_configs(&dir)
        .unwrap()
        .into_iter()
        .filter(|c| COMPARED.contains(&c.method.name))
        .map(|c| seed_layout(&c, seed, &seed_dir(root, seed)))
        .collect()
}

fn pick(cfgs: &[ExperimentConfig], m: Method) -> ExperimentConfig {
    cfgs.iter().find(|c| c.method.name == m).unwrap().clone()
}

fn batches_per_epoch(cfg: &ExperimentConfig) -> usize {
    (cfg.dataset.classes * cfg.dataset.train_per_class).div_ceil(cfg.optimizer.batch_size)
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

/// Trains the seed-0 teacher and regressor where the comparison expects them.
fn prerequisites(root: &Path) -> f64 {
    let t = Instant::now();
    let ktan = pick(&desk(root, 0), Method::Ktan);
    run::train_teacher(&ktan, false).unwrap();
    run::train_regressor_cmd(&ktan, false).unwrap();
    t.elapsed().as_secs_f64()
}

fn reductions(root: &Path) -> Verdict {
    let cfgs = desk(root, 0);
    let out = root.join("reductions");
    let dln = pick(&cfgs, Method::Dln);
    let mut ktan = pick(&cfgs, Method::Ktan);
    let total = ktan.method.epochs * batches_per_epoch(&ktan);
    ktan.adversarial.alpha = 0.0;
    ktan.adversarial.pretrain_steps = Some(total);
    ktan.adversarial.iterations = Some(0);
    let t = Instant::now();
    run::train(&dln, &out.join("dln"), false).unwrap();
    run::train(&ktan, &out.join("ktan-alpha0"), false).unwrap();
    let first = t.elapsed().as_secs_f64();
    let a = same_bytes(&out.join("dln").join(METRICS_FILE), &out.join("ktan-alpha0").join(METRICS_FILE));

    let student = pick(&cfgs, Method::Student);
    let mut dln0 = dln.clone();
    dln0.method.beta = 0.0;
    let t = Instant::now();
    run::train(&student, &out.join("student"), false).unwrap();
    run::train(&dln0, &out.join("dln-beta0"), false).unwrap();
    let second = t.elapsed().as_secs_f64();
    let b = same_bytes(&out.join("student").join(METRICS_FILE), &out.join("dln-beta0").join(METRICS_FILE));
    let lines = read_log(&out.join("dln").join(METRICS_FILE)).unwrap().len();
    verdict(
        a && b && first < 120.0 && second < 120.0,
        format!(
            "ktan(alpha 0, {total} pretrain steps, 0 adversarial) = dln: {a}; dln(beta 0) = student: {b}; \
             {lines} log lines each; {first:.1} s and {second:.1} s (limit 120 s each)"
        ),
    )
}

fn freeze_isolation(root: &Path) -> Verdict {
    let ktan = pick(&desk(root, 0), Method::Ktan);
    let teacher = load_teacher(&ktan).unwrap();
    let regressor = load_regressor(&ktan).unwrap();
    let (train, test) = load_data(&ktan).unwrap();
    let (t0, r0) = (teacher.state.fingerprint(), regressor.state.fingerprint());
    let cfg = ktan.train_config();
    let spec = ktan.student_spec(train.image_shape(), train.classes()).unwrap();
    let outcome = run_experiment(&cfg, &spec, &train, &test, Some(&teacher), Some(&regressor), &mut Discard).unwrap();
    let full = teacher.state.fingerprint() == t0 && regressor.state.fingerprint() == r0;

    let mut trainer = Trainer::new(cfg, spec, Some(&teacher), Some(&regressor)).unwrap();
    let fps = |t: &Trainer<f32>| {
        (
            t.network.state.part_fingerprint(Some(Part::Generator)),
            t.network.state.part_fingerprint(Some(Part::Classifier)),
            t.discriminator.as_ref().unwrap().state.fingerprint(),
            teacher.state.fingerprint(),
            regressor.state.fingerprint(),
        )
    };
    let mut violations = Vec::new();
    for it in 0..10u64 {
        let idx: Vec<usize> = (0..32).map(|i| (it as usize * 32 + i) % train.len()).collect();
        let batch = train.gather(&idx).unwrap();
        let signals = trainer.teacher_signals(&batch.images, true).unwrap();
        let mut record = MetricsRecord::new(Phase::Adversarial, it);
        let before = fps(&trainer);
        let student_map = trainer.network.feature_map(&batch.images).unwrap();
        let regressed = signals.regressed_map.clone().unwrap();
        trainer.discriminator_update(&student_map, &regressed, &mut record).unwrap();
        let after_d = fps(&trainer);
        trainer.generator_update(&batch.images, &batch.labels, &signals, &mut record).unwrap();
        let after_g = fps(&trainer);
        trainer.classifier_update(&batch.images, &batch.labels, &signals).unwrap();
        let after_c = fps(&trainer);
        let only = |a: (u64, u64, u64, u64, u64), b: (u64, u64, u64, u64, u64), changed: usize| {
            let a = [a.0, a.1, a.2, a.3, a.4];
            let b = [b.0, b.1, b.2, b.3, b.4];
            (0..5).all(|i| (a[i] != b[i]) == (i == changed))
        };
        if !only(before, after_d, 2) {
            violations.push(format!("iteration {it} discriminator update"));
        }
        if !only(after_d, after_g, 0) {
            violations.push(format!("iteration {it} generator update"));
        }
        if !only(after_g, after_c, 1) {
            violations.push(format!("iteration {it} classifier update"));
        }
    }
    verdict(
        full && violations.is_empty(),
        format!(
            "teacher and regressor unchanged across a {}+{} step ktan run: {full}; \
             10 iterations x 3 sub-updates each changed only their own parameters: {}",
            outcome.pretrain_steps,
            outcome.adversarial_iterations,
            if violations.is_empty() { "true".to_string() } else { violations.join(", ") }
        ),
    )
}

fn ordering(root: &Path, prep_secs: f64) -> Verdict {
    let cfgs: Vec<ExperimentConfig> = desk(root, 0);
    let t = Instant::now();
    let report = compare_configs(
        &cfgs,
        &CompareOptions {
            config_dir: PathBuf::new(),
            seeds: SEEDS.to_vec(),
            out: root.to_path_buf(),
            overwrite: false,
            threads: 1,
        },
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64() + prep_secs;
    let failed: Vec<String> = report
        .cells
        .iter()
        .filter_map(|c| c.result.as_ref().err().map(|e| format!("{} seed {}: {e}", c.method.as_str(), c.seed)))
        .collect();
    if !failed.is_empty() {
        return verdict(false, format!("failed runs: {}", failed.join("; ")));
    }
    let mean = |m| report.stats_for(m).unwrap().mean();
    let (t_, k, d, s) = (mean(Method::Teacher), mean(Method::Ktan), mean(Method::Dln), mean(Method::Student));
    let gap = k - s;
    verdict(
        t_ > k && k > s && gap >= 0.01 && k >= d && secs < 900.0,
        format!(
            "5-seed means: teacher {:.2}%, ktan {:.2}%, dln {:.2}%, student {:.2}%; \
             ktan - student {:+.2} points (need >= 1); {secs:.0} s (limit 900 s)",
            100.0 * t_,
            100.0 * k,
            100.0 * d,
            100.0 * s,
            100.0 * gap
        ),
    )
}

fn discriminator_signal(root: &Path) -> Verdict {
    let mut fractions = Vec::new();
    let mut finite = true;
    for seed in SEEDS {
        let cfg = pick(&desk(root, seed), Method::Ktan);
        let records = read_log(&cfg.output.dir.join(METRICS_FILE)).unwrap();
        fractions.push(run::discriminator_separation(&records, batches_per_epoch(&cfg)).unwrap_or(0.0));
        finite &= records
            .iter()
            .filter(|r| r.phase == Some(Phase::Adversarial))
            .all(|r| r.adv_g.is_some_and(f64::is_finite));
    }
    let worst = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = fractions.iter().map(|f| format!("{:.0}%", 100.0 * f)).collect();
    verdict(
        worst >= 0.8 && finite,
        format!(
            "first adversarial epoch with D(teacher) > D(student), per seed: {} (need >= 80%); adv_g finite: {finite}",
            shown.join(", ")
        ),
    )
}

fn reproducibility(root: &Path) -> Verdict {
    let cfg = pick(&desk(root, 0), Method::Ktan);
    let rerun = root.join("rerun-ktan");
    run::train(&cfg, &rerun, false).unwrap();
    let metrics = same_bytes(&rerun.join(METRICS_FILE), &cfg.output.dir.join(METRICS_FILE));
    let checkpoint = same_bytes(&rerun.join(CHECKPOINT_FILE), &cfg.output.dir.join(CHECKPOINT_FILE));
    let mut worst = 0.0f64;
    for dir in [
        cfg.teacher.dir.clone(),
        seed_dir(root, 0).join("student"),
        seed_dir(root, 0).join("dln"),
        cfg.output.dir.clone(),
        rerun,
    ] {
        worst = worst.max(run::eval(&dir).unwrap().max_deviation());
    }
    verdict(
        metrics && checkpoint && worst <= 1e-12,
        format!(
            "rerun metrics identical: {metrics}; checkpoint identical: {checkpoint}; \
             reloaded accuracy deviation {worst:.1e} (limit 1e-12)"
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut all = true;
    let mut emit = |n: usize, name: &str, v: Verdict| {
        all &= v.pass;
        println!("{} {n} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    emit(1, "conv oracle", guarded(conv_oracle));
    emit(2, "gradient check", guarded(gradient_check));
    emit(3, "regressor geometry sweep", guarded(regressor_sweep));
    emit(4, "loss algebra", guarded(loss_algebra));
    let prep = catch_unwind(AssertUnwindSafe(|| prerequisites(root)));
    let prep_secs = *prep.as_ref().unwrap_or(&0.0);
    let ready = prep.is_ok();
    let blocked = || verdict(false, "seed-0 teacher or regressor training failed".into());
    emit(5, "reductions", if ready { guarded(|| reductions(root)) } else { blocked() });
    emit(6, "freeze and isolation", if ready { guarded(|| freeze_isolation(root)) } else { blocked() });
    let ordered = if ready { guarded(|| ordering(root, prep_secs)) } else { blocked() };
    let compared = !ordered.detail.starts_with("aborted") && !ordered.detail.starts_with("failed runs") && ready;
    emit(7, "method ordering", ordered);
    let no_runs = || verdict(false, "the 5-seed comparison did not complete".into());
    emit(8, "discriminator signal", if compared { guarded(|| discriminator_signal(root)) } else { no_runs() });
    emit(9, "reproducibility", if compared { guarded(|| reproducibility(root)) } else { no_runs() });
    if !all {
        std::process::exit(1);
    }
}
