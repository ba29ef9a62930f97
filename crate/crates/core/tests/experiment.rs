use std::fs;
use std::path::Path;

use bwbpf_core::experiment::{
    parse_config, read_curve, read_metrics, render_report, run_experiment, run_gradcheck, sweep_k,
    ExperimentConfig, MetricsRow, Mode, CONFIG_ECHO_FILE, CURVE_FILE, INCOMPLETE_FILE,
    METRICS_FILE, SUMMARY_FILE,
};
use bwbpf_core::ErrorCategory;

fn synthetic_cfg(dir: &Path, mode: &str, precision: &str) -> ExperimentConfig {
    let flags: Vec<(String, String)> = [
        ("preset", "vgg-small"),
        ("dataset", "synthetic"),
        ("synthetic-size", "16"),
        ("synthetic-classes", "3"),
        ("synthetic-per-class", "20"),
        ("synthetic-test-per-class", "5"),
        ("batch-size", "8"),
        ("epochs", "2"),
        ("k", "4"),
        ("seed", "11"),
        ("mode", mode),
        ("precision", precision),
        ("output-dir", dir.to_str().unwrap()),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    parse_config(None, &flags).unwrap()
}

fn without_wall_ms(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn sequential_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = run_experiment(&synthetic_cfg(&a, "bwbpf-seq", "f32")).unwrap();
    let sb = run_experiment(&synthetic_cfg(&b, "bwbpf-seq", "f32")).unwrap();
    assert_eq!(
        without_wall_ms(&a.join(METRICS_FILE)),
        without_wall_ms(&b.join(METRICS_FILE))
    );
    assert_eq!(sa.final_test_error, sb.final_test_error);
    for f in [SUMMARY_FILE, CONFIG_ECHO_FILE] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(!a.join(INCOMPLETE_FILE).exists());
}

#[test]
fn metrics_schema_and_summary_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synthetic_cfg(tmp.path(), "bwbpf-seq", "f32");
    let summary = run_experiment(&cfg).unwrap();
    let text = fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header, MetricsRow::header(4));
    let rows = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 2);
    for line in text.lines().skip(1) {
        let numeric = line
            .split(',')
            .skip(1)
            .filter(|f| f.parse::<f64>().is_ok())
            .count();
        assert_eq!(numeric, 4 + 8);
    }
    let last = rows.last().unwrap();
    assert_eq!(last.test_error, summary.final_test_error);
    assert_eq!(
        summary.final_test_error,
        1.0 - summary.test_correct as f64 / summary.test_total as f64
    );
    assert_eq!(summary.steps, last.step);
    let echoed = fs::read_to_string(tmp.path().join(CONFIG_ECHO_FILE)).unwrap();
    assert_eq!(parse_config(Some(&echoed), &[]).unwrap(), cfg);
}

#[test]
fn pipeline_run_matches_sequential_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("seq"), tmp.path().join("pipe"));
    run_experiment(&synthetic_cfg(&a, "bwbpf-seq", "f64")).unwrap();
    run_experiment(&synthetic_cfg(&b, "bwbpf-pipeline", "f64")).unwrap();
    let strip = |rows: Vec<MetricsRow>| -> Vec<MetricsRow> {
        rows.into_iter()
            .map(|r| MetricsRow {
                run_id: String::new(),
                wall_ms: 0.0,
                ..r
            })
            .collect()
    };
    assert_eq!(
        strip(read_metrics(&a.join(METRICS_FILE)).unwrap()),
        strip(read_metrics(&b.join(METRICS_FILE)).unwrap())
    );
}

#[test]
fn baseline_logs_no_local_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let s = run_experiment(&synthetic_cfg(tmp.path(), "bp-baseline", "f32")).unwrap();
    assert_eq!(s.k, 0);
    let rows = read_metrics(&tmp.path().join(METRICS_FILE)).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.loss_local.is_empty() && r.loss_total == r.loss_global));
}

#[test]
fn failed_run_leaves_incomplete_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_cfg(tmp.path(), "bwbpf-seq", "f32");
    cfg.dataset = "mnist".into();
    cfg.data_dir = Some(tmp.path().join("missing"));
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Data);
    let marker = fs::read_to_string(tmp.path().join(INCOMPLETE_FILE)).unwrap();
    assert!(marker.contains("failed"), "{marker}");
}

#[test]
fn degenerate_sweep_equals_standalone_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_cfg(&tmp.path().join("sweep"), "bwbpf-seq", "f32");
    cfg.epochs = 1;
    let sweep = sweep_k(&cfg, &[1], false).unwrap();
    let alone = run_experiment(&ExperimentConfig {
        k: 1,
        output_dir: tmp.path().join("alone"),
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(sweep.curve.len(), 1);
    assert_eq!(sweep.curve[0].final_test_error, alone.final_test_error);
    assert_eq!(sweep.curve[0].final_train_error, alone.final_train_error);
    let curve = read_curve(&cfg.output_dir.join(CURVE_FILE)).unwrap();
    assert_eq!(curve[0].k, 1);
    assert_eq!(curve[0].mode, Mode::BwbpfSeq);
    let report = render_report(&cfg.output_dir).unwrap();
    assert!(report.contains("bwbpf-seq"), "{report}");
    assert!(render_report(&tmp.path().join("alone"))
        .unwrap()
        .contains("final test error"));
}

#[test]
fn sweep_rejects_duplicates_and_bad_k() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synthetic_cfg(tmp.path(), "bwbpf-seq", "f32");
    let err = sweep_k(&cfg, &[2, 4, 2, 9], false).unwrap_err();
    let text = err.to_string();
    assert!(
        text.contains("more than once") && text.contains("K = 9"),
        "{text}"
    );
    assert_eq!(err.category(), ErrorCategory::Validation);
    assert!(!tmp.path().join(CURVE_FILE).exists());
}

#[test]
fn gradient_check_suite_passes() {
    let suite = run_gradcheck(7).unwrap();
    assert!(suite.model_params <= 5000, "{}", suite.model_params);
    for case in &suite.cases {
        assert!(case.passed, "{case:?}");
    }
    assert_eq!(suite.cases.len(), 14);
}
