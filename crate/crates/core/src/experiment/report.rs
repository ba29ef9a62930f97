use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::Mode;
use super::run::{read_metrics, RunSummary, INCOMPLETE_FILE, METRICS_FILE, SUMMARY_FILE};
use super::sweep::{read_curve, CurvePoint, CURVE_FILE};
use crate::error::{Error, Result};

fn pct(e: f64) -> String {
    format!("{:6.2}%", 100.0 * e)
}

fn render_curve(out: &mut String, curve: &[CurvePoint]) {
    let _ = writeln!(
        out,
        "{:<16} {:>4} {:>10} {:>10} {:>10}",
        "mode", "K", "test err", "train err", "wall s"
    );
    for p in curve {
        let k = if p.k == 0 {
            "-".to_string()
        } else {
            p.k.to_string()
        };
        let _ = writeln!(
            out,
            "{:<16} {:>4} {:>10} {:>10} {:>10.1}",
            p.mode.as_str(),
            k,
            pct(p.final_test_error),
            pct(p.final_train_error),
            p.wall_ms / 1e3
        );
    }
    let mut blockwise: Vec<&CurvePoint> = curve
        .iter()
        .filter(|p| p.mode != Mode::BpBaseline)
        .collect();
    blockwise.sort_by_key(|p| p.k);
    if blockwise.len() >= 2 {
        let rising = blockwise
            .windows(2)
            .filter(|w| w[1].final_test_error > w[0].final_test_error)
            .count();
        let _ = writeln!(
            out,
            "\ntest error rises in {rising} of {} steps of increasing K",
            blockwise.len() - 1
        );
    }
}

fn render_run(out: &mut String, dir: &Path) -> Result<()> {
    let summary_path = dir.join(SUMMARY_FILE);
    if summary_path.exists() {
        let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        let s: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", summary_path.display())))?;
        let _ = writeln!(out, "run {}", s.run_id);
        let _ = writeln!(
            out,
            "  {} on {}, {} params, blocks {:?}, {} epochs / {} steps",
            s.preset, s.dataset, s.param_count, s.block_sizes, s.epochs, s.steps
        );
        let _ = writeln!(
            out,
            "  final test error {} ({}/{} correct), train error {}, {:.1} s",
            pct(s.final_test_error),
            s.test_correct,
            s.test_total,
            pct(s.final_train_error),
            s.wall_ms / 1e3
        );
    }
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        let rows = read_metrics(&metrics)?;
        let _ = writeln!(
            out,
            "  {:>5} {:>8} {:>10} {:>10} {:>10} {:>10}",
            "epoch", "step", "lr", "L_out", "train", "test"
        );
        for r in rows {
            let _ = writeln!(
                out,
                "  {:>5} {:>8} {:>10.2e} {:>10.4} {:>10} {:>10}",
                r.epoch,
                r.step,
                r.lr,
                r.loss_global,
                pct(r.train_error),
                pct(r.test_error)
            );
        }
    }
    Ok(())
}

/// Plain-text summary of a run or sweep directory.
pub fn render_report(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut out = String::new();
    let marker = dir.join(INCOMPLETE_FILE);
    if marker.exists() {
        let note = fs::read_to_string(&marker).unwrap_or_default();
        let _ = writeln!(out, "INCOMPLETE: {}", note.trim());
    }
    let curve = dir.join(CURVE_FILE);
    if curve.exists() {
        render_curve(&mut out, &read_curve(&curve)?);
        return Ok(out);
    }
    if dir.join(METRICS_FILE).exists() || dir.join(SUMMARY_FILE).exists() {
        render_run(&mut out, dir)?;
        return Ok(out);
    }
    let mut found = false;
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).exists())
        .collect();
    entries.sort();
    for sub in entries {
        found = true;
        render_run(&mut out, &sub)?;
    }
    if !found {
        return Err(Error::Format(format!(
            "{}: no run or sweep outputs",
            dir.display()
        )));
    }
    Ok(out)
}
