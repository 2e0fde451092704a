//! Metrics log: one line per record, `key=value` pairs separated by spaces,
//! starting with `phase` and `iteration`. Floats print in their shortest
//! round-trip form, so parsing a log recovers every value bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ktan_core::metrics::{MetricsRecord, MetricsSink, Phase};

use crate::error::{CliError, CliResult};

pub fn format_record(r: &MetricsRecord) -> String {
    let mut line = format!(
        "phase={} iteration={}",
        r.phase.map_or("none", Phase::as_str),
        r.iteration
    );
    for (k, v) in r.values() {
        line.push_str(&format!(" {k}={v}"));
    }
    line
}

pub fn parse_record(line: &str) -> CliResult<MetricsRecord> {
    let mut r = MetricsRecord::default();
    let mut seen_phase = false;
    for field in line.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| CliError::Log(format!("field {field:?} is not key=value")))?;
        match k {
            "phase" => {
                seen_phase = true;
                r.phase = if v == "none" { None } else { Some(v.parse()?) };
            }
            "iteration" => {
                r.iteration = v.parse().map_err(|_| CliError::Log(format!("bad iteration {v:?}")))?;
            }
            _ => {
                let x: f64 = v.parse().map_err(|_| CliError::Log(format!("bad value {k}={v:?}")))?;
                r.set(k, x)?;
            }
        }
    }
    if !seen_phase {
        return Err(CliError::Log(format!("line without phase: {line:?}")));
    }
    Ok(r)
}

pub fn read_log(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_record(&line).map_err(|e| CliError::Log(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Appends formatted records to a file and keeps eval records in memory.
pub struct LogWriter {
    path: PathBuf,
    out: BufWriter<File>,
    pub evals: Vec<MetricsRecord>,
    pub records: usize,
}

impl LogWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(LogWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            evals: Vec::new(),
            records: 0,
        })
    }

    pub fn finish(mut self) -> CliResult<Vec<MetricsRecord>> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))?;
        Ok(self.evals)
    }
}

impl MetricsSink for LogWriter {
    fn record(&mut self, record: &MetricsRecord) -> ktan_core::Result<()> {
        writeln!(self.out, "{}", format_record(record))?;
        self.records += 1;
        if record.phase == Some(Phase::Eval) {
            self.evals.push(record.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_bit_exactly() {
        let mut r = MetricsRecord::new(Phase::Adversarial, 12);
        r.ce = Some(0.1 + 0.2);
        r.adv_d = Some(1e-300);
        r.d_teacher = Some(f64::from(0.7f32));
        r.lr = Some(1e-3);
        let line = format_record(&r);
        assert_eq!(line.split_whitespace().next(), Some("phase=adversarial"));
        let back = parse_record(&line).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.ce.unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse_record("iteration=1 ce=0.5").is_err());
        assert!(parse_record("phase=pretrain iteration=x").is_err());
        assert!(parse_record("phase=pretrain iteration=1 bogus=1").is_err());
        assert!(parse_record("phase=pretrain ce").is_err());
    }

    #[test]
    fn writer_keeps_evals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        let mut w = LogWriter::create(&path).unwrap();
        let mut e = MetricsRecord::new(Phase::Eval, 1);
        e.test_acc = Some(0.5);
        w.record(&MetricsRecord::new(Phase::Pretrain, 1)).unwrap();
        w.record(&e).unwrap();
        assert_eq!(w.finish().unwrap(), vec![e.clone()]);
        let all = read_log(&path).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1], e);
    }
}
