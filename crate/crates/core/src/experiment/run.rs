use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode, Precision};
use crate::arch::{DecoupledModel, Network};
use crate::data::{
    augment, batches, load_cifar10, load_mnist, synthetic, Dataset, Normalization, Split,
};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, PipelineBatch, PipelineConfig};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{bp_step, bwbpf_step, evaluate, StepMetrics, TrainState};

const AUGMENT_STREAM: u64 = 0xa06_0000;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.echo";
pub const INCOMPLETE_FILE: &str = "INCOMPLETE";

/// One logged row: epoch means of the step losses, running training error
/// of the epoch and the test error after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss_global: f64,
    pub loss_local: Vec<f64>,
    pub loss_total: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn header(k: usize) -> Vec<String> {
        let mut h: Vec<String> = ["run_id", "epoch", "step", "lr", "loss_global"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=k).map(|l| format!("loss_local_{l}")));
        h.extend(
            ["loss_total", "train_error", "test_error", "wall_ms"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.run_id.clone(),
            self.epoch.to_string(),
            self.step.to_string(),
            self.lr.to_string(),
            self.loss_global.to_string(),
        ];
        r.extend(self.loss_local.iter().map(f64::to_string));
        r.extend([
            self.loss_total.to_string(),
            self.train_error.to_string(),
            self.test_error.to_string(),
            format!("{:.3}", self.wall_ms),
        ]);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: Mode,
    pub preset: String,
    pub dataset: String,
    pub precision: Precision,
    /// Blocks; 0 for end-to-end training.
    pub k: usize,
    pub block_sizes: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub skipped_batches: u64,
    pub param_count: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub normalization: Normalization,
    pub final_train_error: f64,
    /// `1 − accuracy` of the output layer on the test split.
    pub final_test_error: f64,
    pub test_correct: usize,
    pub test_total: usize,
    pub wall_ms: f64,
}

/// Loads (or generates) the configured train and test splits.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = |default: &str| {
        cfg.data_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(default))
    };
    let (train, test) = match cfg.dataset.as_str() {
        "mnist" => load_mnist(&dir("data/mnist"))?,
        "cifar10" => load_cifar10(&dir("data/cifar-10-batches-bin"))?,
        "synthetic" => {
            let per = cfg.synthetic_per_class + cfg.synthetic_test_per_class;
            let shape = [
                cfg.synthetic_channels,
                cfg.synthetic_size,
                cfg.synthetic_size,
            ];
            let all = synthetic(
                cfg.synthetic_classes,
                per,
                shape,
                cfg.seed,
                cfg.synthetic_separation,
            )?;
            let n_train = cfg.synthetic_classes * cfg.synthetic_per_class;
            (
                all.slice(0, n_train, Split::Train),
                all.slice(n_train, all.len(), Split::Test),
            )
        }
        other => {
            return Err(Error::Validation(vec![format!(
                "unknown dataset `{other}`"
            )]))
        }
    };
    let limit = |d: Dataset, n: usize| if n == 0 { d } else { d.take(n) };
    let (train, test) = (limit(train, cfg.train_limit), limit(test, cfg.test_limit));
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((train, test))
}

enum Model<T> {
    Decoupled(DecoupledModel<T>),
    Base(Network<T>),
}

struct MetricsWriter {
    csv: csv::Writer<File>,
    path: PathBuf,
}

impl MetricsWriter {
    fn create(path: PathBuf, k: usize) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut csv = csv::Writer::from_writer(file);
        csv.write_record(MetricsRow::header(k))
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { csv, path })
    }

    fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv
            .write_record(row.record())
            .map_err(|e| Error::Format(e.to_string()))?;
        self.csv.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs one experiment, writing `metrics.csv`, `summary.json` and
/// `config.echo` under the output directory. An `INCOMPLETE` marker exists
/// there until the run finishes successfully.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment_with(cfg, |_| {})
}

/// As [`run_experiment`], calling `on_row` after every epoch.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    on_row: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE_FILE);
    write_file(&marker, "run started\n")?;
    write_file(&out.join(CONFIG_ECHO_FILE), &cfg.to_toml()?)?;
    let result = match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, on_row),
        Precision::F64 => run_typed::<f64>(cfg, on_row),
    };
    match &result {
        Ok(summary) => {
            let json =
                serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
            write_file(&out.join(SUMMARY_FILE), &(json + "\n"))?;
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
        Err(e) => {
            let _ = write_file(&marker, &format!("run failed: {e}\n"));
        }
    }
    result
}

fn run_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunSummary> {
    let started = Instant::now();
    let (train, test) = load_datasets(cfg)?;
    let spec = cfg.architecture()?;
    let sgd = cfg.sgd();
    let weights = cfg.weights();
    let run_id = cfg.run_id();

    let mut model = if cfg.mode.is_blockwise() {
        Model::Decoupled(DecoupledModel::<T>::build(&spec, cfg.k, cfg.seed)?)
    } else {
        Model::Base(Network::<T>::new(&spec, cfg.seed)?)
    };
    let (k, block_sizes, param_count) = match &model {
        Model::Decoupled(m) => (m.k(), m.partition().sizes(), m.param_count()),
        Model::Base(n) => (0, Vec::new(), n.param_count()),
    };

    // Batch-norm cannot normalize a single sample at 1x1 resolution, so
    // one-sample remainders are left out of every epoch.
    let usable = |epoch: u64| -> Result<(Vec<Vec<usize>>, u64)> {
        let all = batches(train.len(), sgd.batch_size, cfg.seed, epoch)?;
        let n = all.len();
        let kept: Vec<Vec<usize>> = all.into_iter().filter(|b| b.len() >= 2).collect();
        let skipped = (n - kept.len()) as u64;
        Ok((kept, skipped))
    };
    let per_epoch = usable(0)?.0.len() as u64;
    if per_epoch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} training samples do not make a batch of two",
            train.len()
        )));
    }
    let mut state = TrainState::<T>::new(per_epoch * sgd.epochs as u64);
    let mut writer = MetricsWriter::create(cfg.output_dir.join(METRICS_FILE), k)?;
    let pcfg = PipelineConfig {
        queue_capacity: cfg.queue_capacity,
        ..PipelineConfig::default()
    };

    let mut skipped_batches = 0;
    let mut last_train_error = f64::NAN;
    let mut last_eval = None;
    for epoch in 0..sgd.epochs as u64 {
        state.epoch = epoch;
        let (order, skipped) = usable(epoch)?;
        skipped_batches += skipped;
        let mut aug_rng = Rng::with_stream(cfg.seed, AUGMENT_STREAM + epoch);
        let mut make = |idx: &[usize]| -> Result<(Tensor<T>, Vec<usize>)> {
            let (mut x, y) = train.batch::<T>(idx)?;
            augment(&mut x, cfg.augment, &mut aug_rng)?;
            Ok((x, y))
        };
        let first = state.log.len();
        match &mut model {
            Model::Decoupled(m) if cfg.mode == Mode::BwbpfPipeline => {
                let source = order.iter().map(|idx| {
                    make(idx).map(|(images, labels)| PipelineBatch {
                        epoch,
                        images,
                        labels,
                    })
                });
                run_pipeline(m, source, weights, &sgd, &mut state, &pcfg)?;
            }
            Model::Decoupled(m) => {
                for idx in &order {
                    let (x, y) = make(idx)?;
                    bwbpf_step(m, x, &y, weights, &sgd, &mut state)?;
                }
            }
            Model::Base(n) => {
                for idx in &order {
                    let (x, y) = make(idx)?;
                    bp_step(n, x, &y, &sgd, &mut state)?;
                }
            }
        }
        let eval = match &mut model {
            Model::Decoupled(m) => evaluate(m, &test, cfg.eval_batch_size)?,
            Model::Base(n) => evaluate(n, &test, cfg.eval_batch_size)?,
        };
        let row = epoch_row(
            &run_id,
            &state.log[first..],
            k,
            weights_for(cfg),
            eval.error,
            started,
        )?;
        last_train_error = row.train_error;
        writer.append(&row)?;
        on_row(&row);
        last_eval = Some(eval);
    }
    let eval = last_eval.ok_or(Error::EmptyDataset)?;
    Ok(RunSummary {
        run_id,
        mode: cfg.mode,
        preset: cfg.preset.clone(),
        dataset: cfg.dataset.clone(),
        precision: cfg.precision,
        k,
        block_sizes,
        seed: cfg.seed,
        epochs: sgd.epochs,
        steps: state.step,
        skipped_batches,
        param_count,
        train_samples: train.len(),
        test_samples: test.len(),
        normalization: train.normalization().clone(),
        final_train_error: last_train_error,
        final_test_error: eval.error,
        test_correct: eval.correct,
        test_total: eval.total,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn weights_for(cfg: &ExperimentConfig) -> crate::trainer::LossWeights {
    if cfg.mode.is_blockwise() {
        cfg.weights()
    } else {
        crate::trainer::LossWeights::default()
    }
}

fn epoch_row(
    run_id: &str,
    steps: &[StepMetrics],
    k: usize,
    weights: crate::trainer::LossWeights,
    test_error: f64,
    started: Instant,
) -> Result<MetricsRow> {
    let last = steps.last().ok_or(Error::EmptyDataset)?;
    let n = steps.len() as f64;
    let mean = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().fold(0.0, |acc, s| acc + f(s)) / n;
    let loss_local: Vec<f64> = (0..k).map(|l| mean(&|s| s.local_losses[l])).collect();
    let loss_global = mean(&|s| s.global_loss);
    let (correct, count) = steps
        .iter()
        .fold((0, 0), |(c, t), s| (c + s.correct, t + s.count));
    Ok(MetricsRow {
        run_id: run_id.to_string(),
        epoch: last.epoch,
        step: last.step + 1,
        lr: last.lr,
        loss_global,
        loss_total: crate::trainer::weighted_total(weights, loss_global, &loss_local),
        loss_local,
        train_error: 1.0 - correct as f64 / count as f64,
        test_error,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Reads back a `metrics.csv`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    let k = header.len().checked_sub(9).ok_or_else(|| {
        Error::Format(format!(
            "{}: {} columns is too few",
            path.display(),
            header.len()
        ))
    })?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                Error::Format(format!("{}: bad field {i} in {rec:?}", path.display()))
            })
        };
        rows.push(MetricsRow {
            run_id: rec.get(0).unwrap_or_default().to_string(),
            epoch: num(1)? as u64,
            step: num(2)? as u64,
            lr: num(3)?,
            loss_global: num(4)?,
            loss_local: (0..k).map(|l| num(5 + l)).collect::<Result<_>>()?,
            loss_total: num(5 + k)?,
            train_error: num(6 + k)?,
            test_error: num(7 + k)?,
            wall_ms: num(8 + k)?,
        });
    }
    Ok(rows)
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
