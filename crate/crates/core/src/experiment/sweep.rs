use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::run::{
    ensure_dir, run_experiment, write_text, RunSummary, INCOMPLETE_FILE, SUMMARY_FILE,
};
use crate::error::{Error, Result};

pub const CURVE_FILE: &str = "curve.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: Mode,
    /// 0 for the end-to-end baseline.
    pub k: usize,
    pub final_test_error: f64,
    pub final_train_error: f64,
    pub wall_ms: f64,
}

impl CurvePoint {
    fn of(s: &RunSummary) -> Self {
        Self {
            mode: s.mode,
            k: s.k,
            final_test_error: s.final_test_error,
            final_train_error: s.final_train_error,
            wall_ms: s.wall_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<RunSummary>,
    pub curve: Vec<CurvePoint>,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("mode,k,final_test_error,final_train_error,wall_ms\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3}",
            p.mode.as_str(),
            p.k,
            p.final_test_error,
            p.final_train_error,
            p.wall_ms
        );
    }
    out
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::Format(format!("{}: bad row `{line}`", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let [mode, k, test, train, wall] = f[..] else {
                return Err(bad(line));
            };
            let mode: Mode = serde_json::from_value(serde_json::Value::String(mode.into()))
                .map_err(|_| bad(line))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(CurvePoint {
                mode,
                k: k.parse().map_err(|_| bad(line))?,
                final_test_error: num(test)?,
                final_train_error: num(train)?,
                wall_ms: num(wall)?,
            })
        })
        .collect()
}

/// Runs `base` once per K, sharing its seed, each under `<output>/k<K>`,
/// plus the end-to-end baseline under `<output>/bp` when `with_baseline`.
/// Writes `curve.csv` in `<output>`. Any failed run leaves the sweep
/// marked incomplete.
pub fn sweep_k(base: &ExperimentConfig, ks: &[usize], with_baseline: bool) -> Result<SweepResult> {
    let mut seen = BTreeSet::new();
    let mut problems: Vec<String> = ks
        .iter()
        .filter(|k| !seen.insert(**k))
        .map(|k| format!("K = {k} appears more than once in the sweep"))
        .collect();
    if ks.is_empty() {
        problems.push("the K list is empty".into());
    }
    if base.mode == Mode::BpBaseline {
        problems.push(
            "sweep needs a block-wise mode; the baseline is added with the baseline option".into(),
        );
    }
    let mut configs = Vec::new();
    for &k in ks {
        let cfg = ExperimentConfig {
            k,
            output_dir: base.output_dir.join(format!("k{k}")),
            ..base.clone()
        };
        problems.extend(cfg.problems().into_iter().map(|p| format!("K = {k}: {p}")));
        configs.push(cfg);
    }
    if with_baseline {
        configs.push(ExperimentConfig {
            mode: Mode::BpBaseline,
            lambda1: 1.0,
            lambda2: 1.0,
            output_dir: base.output_dir.join("bp"),
            ..base.clone()
        });
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let out = &base.output_dir;
    ensure_dir(out)?;
    let marker = out.join(INCOMPLETE_FILE);
    write_text(&marker, "sweep started\n")?;
    let mut runs = Vec::new();
    for cfg in &configs {
        match run_experiment(cfg) {
            Ok(s) => runs.push(s),
            Err(e) => {
                let _ = write_text(&marker, &format!("run {} failed: {e}\n", cfg.run_id()));
                return Err(e);
            }
        }
    }
    let curve: Vec<CurvePoint> = runs.iter().map(CurvePoint::of).collect();
    write_text(&out.join(CURVE_FILE), &curve_csv(&curve))?;
    let json = serde_json::to_string_pretty(&runs).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&out.join(SUMMARY_FILE), &(json + "\n"))?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(SweepResult { runs, curve })
}
