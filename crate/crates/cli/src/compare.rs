//! The method-by-seed matrix and its ordering report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ktan_core::train::Method;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::run::{self, load_teacher, read_toml, regressor_key, teacher_key, Summary, CHECKPOINT_FILE, SUMMARY_FILE};

/// Method pairs whose mean accuracies the verdict compares, with whether
/// a tie passes.
pub const EXPECTED_ORDER: [(Method, Method, bool); 3] = [
    (Method::Teacher, Method::Ktan, false),
    (Method::Ktan, Method::Dln, true),
    (Method::Dln, Method::Student, false),
];

pub const REPORT_FILE: &str = "report.txt";

#[derive(Clone, Debug)]
pub struct CompareOptions {
    pub config_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub overwrite: bool,
    pub threads: usize,
}

/// One cell of the matrix.
#[derive(Clone, Debug)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: Result<Summary, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodStats {
    pub method: Method,
    pub accuracies: Vec<f64>,
    pub failures: usize,
}

impl MethodStats {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation; zero for a single run.
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn min(&self) -> f64 {
        self.accuracies.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub cells: Vec<Cell>,
    pub stats: Vec<MethodStats>,
    pub verdict: Vec<(Method, Method, bool)>,
}

impl CompareReport {
    pub fn stats_for(&self, m: Method) -> Option<&MethodStats> {
        self.stats.iter().find(|s| s.method == m && !s.accuracies.is_empty())
    }

    pub fn ordering_holds(&self) -> bool {
        !self.verdict.is_empty() && self.verdict.iter().all(|v| v.2)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<u64> = {
            let mut v: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let _ = writeln!(s, "test accuracy (%) over seeds {seeds:?}");
        let _ = writeln!(
            s,
            "{:<10} {:>4} {:>8} {:>7} {:>8} {:>8}  per seed",
            "method", "runs", "mean", "std", "min", "max"
        );
        for st in &self.stats {
            if st.accuracies.is_empty() {
                let _ = writeln!(s, "{:<10} {:>4}  all runs failed", st.method.as_str(), 0);
                continue;
            }
            let per: Vec<String> = st.accuracies.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
            let _ = writeln!(
                s,
                "{:<10} {:>4} {:>8.2} {:>7.2} {:>8.2} {:>8.2}  {}",
                st.method.as_str(),
                st.accuracies.len(),
                100.0 * st.mean(),
                100.0 * st.std(),
                100.0 * st.min(),
                100.0 * st.max(),
                per.join(" ")
            );
        }
        for c in &self.cells {
            if let Err(e) = &c.result {
                let _ = writeln!(s, "FAILED {} seed {}: {e}", c.method.as_str(), c.seed);
            }
        }
        for (a, b, ok) in &self.verdict {
            let tie = EXPECTED_ORDER.iter().any(|&(x, y, t)| x == *a && y == *b && t);
            let rel = if tie { ">=" } else { ">" };
            let (ma, mb) = (self.stats_for(*a).unwrap().mean(), self.stats_for(*b).unwrap().mean());
            let _ = writeln!(
                s,
                "{} {} {} {}: {:.2} vs {:.2}",
                if *ok { "holds" } else { "fails" },
                a.as_str(),
                rel,
                b.as_str(),
                100.0 * ma,
                100.0 * mb
            );
        }
        let _ = writeln!(
            s,
            "ordering {}",
            if self.ordering_holds() { "holds" } else { "does not hold" }
        );
        s
    }
}

/// Reads every `*.toml` in `dir`, one config per method.
pub fn load_method_configs(dir: &Path) -> CliResult<Vec<ExperimentConfig>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let mut cfgs: Vec<ExperimentConfig> = Vec::new();
    for p in &paths {
        let c = ExperimentConfig::load(p)?;
        if cfgs.iter().any(|o| o.method.name == c.method.name) {
            return Err(CliError::Config(format!(
                "{}: a second config for method {}",
                p.display(),
                c.method.name.as_str()
            )));
        }
        cfgs.push(c);
    }
    if cfgs.is_empty() {
        return Err(CliError::Config(format!("no .toml configs in {}", dir.display())));
    }
    cfgs.sort_by_key(|c| Method::ALL.iter().position(|&m| m == c.method.name));
    let key = teacher_key(&cfgs[0]);
    if cfgs.iter().any(|c| teacher_key(c) != key) {
        return Err(CliError::Config(
            "configs disagree on the dataset, optimizer or teacher sections".into(),
        ));
    }
    let needing: Vec<&ExperimentConfig> = cfgs.iter().filter(|c| c.method.name.needs_regressor()).collect();
    if let Some(first) = needing.first() {
        if needing.iter().any(|c| regressor_key(c) != regressor_key(first)) {
            return Err(CliError::Config(
                "transfer configs disagree on the student or regressor settings".into(),
            ));
        }
    }
    Ok(cfgs)
}

fn teacher_cached(cfg: &ExperimentConfig) -> bool {
    cfg.teacher.dir.join(SUMMARY_FILE).exists() && load_teacher(cfg).is_ok()
}

fn regressor_cached(cfg: &ExperimentConfig) -> bool {
    cfg.teacher.regressor_dir.join(CHECKPOINT_FILE).exists() && run::load_regressor(cfg).is_ok()
}

/// `cfg` at `seed` with the teacher, regressor and run directories placed
/// under `root`, as the matrix lays them out.
pub fn seed_layout(cfg: &ExperimentConfig, seed: u64, root: &Path) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.method.seed = seed;
    c.teacher.dir = root.join("teacher");
    c.teacher.regressor_dir = root.join("regressor");
    c.output.dir = root.join(c.method.name.as_str());
    c
}

/// Runs every method for one seed under `root`. A teacher or regressor
/// already trained under the same key is reused.
fn run_seed(cfgs: &[ExperimentConfig], seed: u64, root: &Path, overwrite: bool) -> Vec<Cell> {
    let seeded: Vec<ExperimentConfig> = cfgs.iter().map(|c| seed_layout(c, seed, root)).collect();
    let base = &seeded[0];
    let teacher_dir = base.teacher.dir.clone();
    let teacher: Result<Summary, String> = if teacher_cached(base) {
        read_toml(&teacher_dir.join(SUMMARY_FILE)).map_err(|e| e.to_string())
    } else {
        run::train_teacher(base, overwrite).map_err(|e| e.to_string())
    };
    let mut cells = vec![Cell {
        method: Method::Teacher,
        seed,
        dir: teacher_dir,
        result: teacher.clone(),
    }];

    let regressor: Result<(), String> = match seeded.iter().find(|c| c.method.name.needs_regressor()) {
        None => Ok(()),
        Some(_) if teacher.is_err() => Err("teacher failed".into()),
        Some(c) if regressor_cached(c) => Ok(()),
        Some(c) => run::train_regressor_cmd(c, overwrite)
            .map(|_| ())
            .map_err(|e| format!("regressor: {e}")),
    };

    for c in seeded.iter().filter(|c| c.method.name != Method::Teacher) {
        let m = c.method.name;
        let result = if m.needs_teacher() && teacher.is_err() {
            Err("teacher failed".into())
        } else if m.needs_regressor() && regressor.is_err() {
            Err(regressor.clone().unwrap_err())
        } else {
            run::train(c, &c.output.dir, overwrite).map_err(|e| e.to_string())
        };
        cells.push(Cell {
            method: m,
            seed,
            dir: c.output.dir.clone(),
            result,
        });
    }
    cells
}

fn tabulate(cells: Vec<Cell>) -> CompareReport {
    let mut stats: Vec<MethodStats> = Vec::new();
    for m in Method::ALL {
        let mine: Vec<&Cell> = cells.iter().filter(|c| c.method == m).collect();
        if mine.is_empty() {
            continue;
        }
        stats.push(MethodStats {
            method: m,
            accuracies: mine.iter().filter_map(|c| c.result.as_ref().ok()).map(|s| s.test_accuracy).collect(),
            failures: mine.iter().filter(|c| c.result.is_err()).count(),
        });
    }
    let mut report = CompareReport {
        cells,
        stats,
        verdict: Vec::new(),
    };
    for (a, b, tie) in EXPECTED_ORDER {
        if let (Some(sa), Some(sb)) = (report.stats_for(a), report.stats_for(b)) {
            let (ma, mb) = (sa.mean(), sb.mean());
            report.verdict.push((a, b, if tie { ma >= mb } else { ma > mb }));
        }
    }
    report
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Runs each method config for every seed into `out/seed-<s>/<method>`,
/// then writes and returns the report. Failed cells are reported, not
/// fatal.
pub fn compare(opts: &CompareOptions) -> CliResult<CompareReport> {
    let cfgs = load_method_configs(&opts.config_dir)?;
    compare_configs(&cfgs, opts)
}

pub fn compare_configs(cfgs: &[ExperimentConfig], opts: &CompareOptions) -> CliResult<CompareReport> {
    if opts.seeds.is_empty() {
        return Err(CliError::Config("no seeds given".into()));
    }
    fs::create_dir_all(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Vec<Cell>)>> = Mutex::new(Vec::new());
    let workers = opts.threads.clamp(1, opts.seeds.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = opts.seeds.get(i) else { break };
                let cells = run_seed(cfgs, seed, &seed_dir(&opts.out, seed), opts.overwrite);
                results.lock().unwrap().push((i, cells));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.0);
    let report = tabulate(results.into_iter().flat_map(|r| r.1).collect());
    let path = opts.out.join(REPORT_FILE);
    fs::write(&path, report.render()).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(method: Method, seed: u64, acc: Option<f64>) -> Cell {
        Cell {
            method,
            seed,
            dir: PathBuf::new(),
            result: acc
                .map(|a| Summary {
                    method,
                    seed,
                    train_accuracy: a,
                    test_accuracy: a,
                    best_epoch: 1,
                    best_test_accuracy: a,
                    pretrain_steps: 0,
                    adversarial_iterations: 0,
                    config_hash: String::new(),
                    checkpoint_sha256: String::new(),
                })
                .ok_or_else(|| "boom".to_string()),
        }
    }

    #[test]
    fn stats_and_verdict() {
        let cells = vec![
            cell(Method::Teacher, 0, Some(0.9)),
            cell(Method::Teacher, 1, Some(1.0)),
            cell(Method::Student, 0, Some(0.5)),
            cell(Method::Student, 1, None),
            cell(Method::Dln, 0, Some(0.6)),
            cell(Method::Dln, 1, Some(0.6)),
            cell(Method::Ktan, 0, Some(0.6)),
            cell(Method::Ktan, 1, Some(0.6)),
        ];
        let r = tabulate(cells);
        let t = r.stats_for(Method::Teacher).unwrap();
        assert!((t.mean() - 0.95).abs() < 1e-15);
        assert!((t.std() - (0.005f64).sqrt()).abs() < 1e-15);
        assert_eq!((t.min(), t.max()), (0.9, 1.0));
        assert_eq!(r.stats_for(Method::Student).unwrap().failures, 1);
        assert!(r.ordering_holds());
        let text = r.render();
        assert_eq!(text.lines().filter(|l| l.starts_with("ktan ")).count(), 1);
        assert!(text.contains("FAILED student seed 1: boom"));
        assert!(text.contains("holds ktan >= dln"));
    }

    #[test]
    fn a_broken_link_fails_the_ordering() {
        let r = tabulate(vec![
            cell(Method::Teacher, 0, Some(0.9)),
            cell(Method::Ktan, 0, Some(0.95)),
        ]);
        assert_eq!(r.verdict, vec![(Method::Teacher, Method::Ktan, false)]);
        assert!(!r.ordering_holds());
    }
}
