//! Concurrent block-wise executor. Each block and the output layer run on
//! their own thread, connected by bounded queues. A stage emits its output
//! for a batch before updating its own weights, so downstream stages see
//! the same activations as the sequential trainer and the final weights
//! agree bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::mpsc::{channel, sync_channel, Receiver, Sender, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::arch::{Block, DecoupledModel, Head};
use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{
    block_forward, global_update, local_update, lr_at, LossWeights, SgdConfig, TrainState,
    Velocities,
};

/// One training batch fed to the first stage.
#[derive(Debug, Clone)]
pub struct PipelineBatch<T> {
    pub epoch: u64,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// What travels between stages: a detached activation and the labels.
#[derive(Debug, Clone)]
pub struct StageMessage<T> {
    pub batch_id: u64,
    pub epoch: u64,
    pub activation: Arc<Tensor<T>>,
    pub labels: Arc<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    Panic,
    Error,
}

/// Test hook: make `stage` fail when it reaches `batch_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub stage: usize,
    pub batch_id: u64,
    pub kind: FaultKind,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub queue_capacity: usize,
    /// Extra per-batch work injected into each stage, indexed by stage
    /// (blocks first, output layer last). Missing entries mean no delay.
    pub stage_delays: Vec<Duration>,
    pub fault: Option<Fault>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 2,
            stage_delays: Vec::new(),
            fault: None,
        }
    }
}

impl PipelineConfig {
    fn delay(&self, stage: usize) -> Duration {
        self.stage_delays.get(stage).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: usize,
    pub busy: Duration,
    pub idle: Duration,
    pub batches: u64,
    /// Offsets from the start of the run.
    pub first_start: Option<Duration>,
    pub first_end: Option<Duration>,
    pub last_end: Option<Duration>,
    /// Most activations this stage held at once (queued plus in hand).
    pub peak_held: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall: Duration,
    pub stages: Vec<StageTiming>,
}

impl RunTiming {
    pub fn batches(&self) -> u64 {
        self.stages.last().map_or(0, |s| s.batches)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub timing: RunTiming,
    /// Parameter identities owned by each stage.
    pub owned: Vec<BTreeSet<ParamId>>,
}

struct Record {
    batch_id: u64,
    stage: usize,
    epoch: u64,
    loss: f64,
    correct: usize,
    count: usize,
}

enum StageFailure {
    /// The downstream stage went away; not a root cause.
    Disconnected,
    Failed(Error),
}

impl From<Error> for StageFailure {
    fn from(e: Error) -> Self {
        StageFailure::Failed(e)
    }
}

enum StageKind<'a, T> {
    Block(&'a mut Block<T>),
    Output(&'a mut Head<T>),
}

struct Worker<'a, T> {
    stage: usize,
    kind: StageKind<'a, T>,
    velocities: Velocities<T>,
    inbox: Receiver<StageMessage<T>>,
    inbox_count: &'a AtomicI64,
    outbox: Option<(SyncSender<StageMessage<T>>, &'a AtomicI64)>,
    sink: Sender<Record>,
    delay: Duration,
    fault: Option<Fault>,
    cfg: &'a SgdConfig,
    weights: LossWeights,
    total_steps: u64,
    origin: Instant,
}

struct WorkerResult<T> {
    velocities: Velocities<T>,
    timing: StageTiming,
    outcome: std::result::Result<(), StageFailure>,
}

impl<T: Scalar> Worker<'_, T> {
    fn run(mut self) -> WorkerResult<T> {
        let mut timing = StageTiming {
            stage: self.stage,
            ..StageTiming::default()
        };
        let outcome = self.serve(&mut timing);
        WorkerResult {
            velocities: self.velocities,
            timing,
            outcome,
        }
    }

    fn serve(&mut self, timing: &mut StageTiming) -> std::result::Result<(), StageFailure> {
        let mut last_id: Option<u64> = None;
        loop {
            let wait = Instant::now();
            let Ok(msg) = self.inbox.recv() else {
                return Ok(());
            };
            timing.idle += wait.elapsed();
            let held = self.inbox_count.fetch_sub(1, Ordering::SeqCst);
            timing.peak_held = timing.peak_held.max(held.max(1) as usize);
            if last_id.is_some_and(|id| id >= msg.batch_id) {
                return Err(Error::Stage {
                    stage: self.stage,
                    reason: format!(
                        "batch {} arrived after batch {}",
                        msg.batch_id,
                        last_id.unwrap_or(0)
                    ),
                }
                .into());
            }
            last_id = Some(msg.batch_id);

            let start = Instant::now();
            timing.first_start.get_or_insert(start - self.origin);
            thread::sleep(self.delay);
            if let Some(f) = self
                .fault
                .filter(|f| f.stage == self.stage && f.batch_id == msg.batch_id)
            {
                match f.kind {
                    FaultKind::Panic => panic!("injected fault in stage {}", self.stage),
                    FaultKind::Error => {
                        return Err(Error::Stage {
                            stage: self.stage,
                            reason: format!("injected fault at batch {}", msg.batch_id),
                        }
                        .into())
                    }
                }
            }
            let lr = lr_at(msg.batch_id, self.total_steps, self.cfg);
            let record = match &mut self.kind {
                StageKind::Block(block) => {
                    let fwd = block_forward(block, Arc::clone(&msg.activation))?;
                    let (tx, count) = self.outbox.as_ref().expect("block stages have an outbox");
                    let emit = Instant::now();
                    timing.busy += emit - start;
                    let out = StageMessage {
                        batch_id: msg.batch_id,
                        epoch: msg.epoch,
                        activation: fwd.output(),
                        labels: Arc::clone(&msg.labels),
                    };
                    tx.send(out).map_err(|_| StageFailure::Disconnected)?;
                    count.fetch_add(1, Ordering::SeqCst);
                    let resumed = Instant::now();
                    timing.idle += resumed - emit;
                    let loss = local_update(
                        block,
                        fwd,
                        &msg.labels,
                        self.weights.lambda2,
                        self.cfg,
                        lr,
                        &mut self.velocities,
                    )?;
                    timing.busy += resumed.elapsed();
                    Record {
                        batch_id: msg.batch_id,
                        stage: self.stage,
                        epoch: msg.epoch,
                        loss,
                        correct: 0,
                        count: msg.labels.len(),
                    }
                }
                StageKind::Output(head) => {
                    let (loss, correct) = global_update(
                        head,
                        Arc::clone(&msg.activation),
                        &msg.labels,
                        self.weights.lambda1,
                        self.cfg,
                        lr,
                        &mut self.velocities,
                    )?;
                    timing.busy += start.elapsed();
                    Record {
                        batch_id: msg.batch_id,
                        stage: self.stage,
                        epoch: msg.epoch,
                        loss,
                        correct,
                        count: msg.labels.len(),
                    }
                }
            };
            let end = self.origin.elapsed();
            timing.first_end.get_or_insert(end);
            timing.last_end = Some(end);
            timing.batches += 1;
            // The collector outlives every worker.
            let _ = self.sink.send(record);
        }
    }
}

fn take_velocities<T>(all: &mut Velocities<T>, ids: &BTreeSet<ParamId>) -> Velocities<T> {
    ids.iter().filter_map(|id| all.remove_entry(id)).collect()
}

/// Trains `model` on `source` with one thread per stage. Batch `i` of the
/// source is step `state.step + i`; metrics are appended to `state.log` in
/// step order exactly as the sequential trainer would log them.
pub fn run_pipeline<T, I>(
    model: &mut DecoupledModel<T>,
    source: I,
    weights: LossWeights,
    cfg: &SgdConfig,
    state: &mut TrainState<T>,
    pcfg: &PipelineConfig,
) -> Result<PipelineRun>
where
    T: Scalar,
    I: IntoIterator<Item = Result<PipelineBatch<T>>>,
{
    if pcfg.queue_capacity == 0 {
        return Err(Error::InvalidArgument("queue capacity must be >= 1".into()));
    }
    let k = model.k();
    let stages = k + 1;
    let mut owned: Vec<BTreeSet<ParamId>> = model
        .blocks()
        .iter()
        .map(|b| b.params().iter().map(|p| p.id).collect())
        .collect();
    owned.push(model.classifier().params().iter().map(|p| p.id).collect());
    let mut stage_velocities: Vec<Velocities<T>> = owned
        .iter()
        .map(|ids| take_velocities(&mut state.velocities, ids))
        .collect();

    let counts: Vec<AtomicI64> = (0..stages).map(|_| AtomicI64::new(0)).collect();
    let (sink_tx, sink_rx) = channel::<Record>();
    let first_step = state.step;
    let origin = Instant::now();

    let (results, feed_error) = thread::scope(|scope| {
        let mut senders = Vec::with_capacity(stages);
        let mut receivers = Vec::with_capacity(stages);
        for _ in 0..stages {
            let (tx, rx) = sync_channel::<StageMessage<T>>(pcfg.queue_capacity);
            senders.push(tx);
            receivers.push(rx);
        }
        let mut senders = senders.into_iter();
        let feed = senders.next().expect("at least one stage");
        let outboxes: Vec<Option<SyncSender<StageMessage<T>>>> =
            senders.map(Some).chain(std::iter::once(None)).collect();

        let (blocks, classifier) = model.split_stages_mut();
        let kinds = blocks
            .iter_mut()
            .map(StageKind::Block)
            .chain(std::iter::once(StageKind::Output(classifier)));

        let mut handles = Vec::with_capacity(stages);
        for (stage, ((kind, inbox), outbox)) in kinds.zip(receivers).zip(outboxes).enumerate() {
            let worker = Worker {
                stage,
                kind,
                velocities: std::mem::take(&mut stage_velocities[stage]),
                inbox,
                inbox_count: &counts[stage],
                outbox: outbox.map(|tx| (tx, &counts[stage + 1])),
                sink: sink_tx.clone(),
                delay: pcfg.delay(stage),
                fault: pcfg.fault,
                cfg,
                weights,
                total_steps: state.total_steps,
                origin,
            };
            handles.push(
                thread::Builder::new()
                    .name(format!("stage-{stage}"))
                    .spawn_scoped(scope, move || worker.run())
                    .map_err(|e| Error::Stage {
                        stage,
                        reason: format!("spawn failed: {e}"),
                    }),
            );
        }

        let mut feed_error = None;
        for (i, item) in source.into_iter().enumerate() {
            let batch = match item {
                Ok(b) => b,
                Err(e) => {
                    feed_error = Some(e);
                    break;
                }
            };
            let msg = StageMessage {
                batch_id: first_step + i as u64,
                epoch: batch.epoch,
                activation: Arc::new(batch.images),
                labels: Arc::new(batch.labels),
            };
            if feed.send(msg).is_err() {
                break;
            }
            counts[0].fetch_add(1, Ordering::SeqCst);
        }
        drop(feed);

        let results: Vec<Result<std::thread::Result<WorkerResult<T>>>> =
            handles.into_iter().map(|h| h.map(|h| h.join())).collect();
        (results, feed_error)
    });
    drop(sink_tx);
    let wall = origin.elapsed();

    let mut timing = RunTiming {
        wall,
        stages: Vec::with_capacity(stages),
    };
    let mut panicked = None;
    let mut failure = None;
    for (stage, result) in results.into_iter().enumerate() {
        match result {
            Err(e) => {
                failure.get_or_insert(e);
            }
            Ok(Err(_)) => {
                panicked.get_or_insert(stage);
            }
            Ok(Ok(r)) => {
                state.velocities.extend(r.velocities);
                timing.stages.push(r.timing);
                if let Err(StageFailure::Failed(e)) = r.outcome {
                    failure.get_or_insert(e);
                }
            }
        }
    }
    if let Some(stage) = panicked {
        return Err(Error::StagePanicked { stage });
    }
    if let Some(e) = failure.or(feed_error) {
        return Err(e);
    }

    let mut by_batch: BTreeMap<u64, Vec<Record>> = BTreeMap::new();
    for r in sink_rx.try_iter() {
        by_batch.entry(r.batch_id).or_default().push(r);
    }
    for (batch_id, mut records) in by_batch {
        records.sort_by_key(|r| r.stage);
        if records.len() != stages || batch_id != state.step {
            return Err(Error::Stage {
                stage: records.len().min(k),
                reason: format!("batch {batch_id} did not pass every stage"),
            });
        }
        let out = records.pop().expect("output stage record");
        state.epoch = out.epoch;
        let lr = lr_at(batch_id, state.total_steps, cfg);
        let locals = records.iter().map(|r| r.loss).collect();
        state.finish_step(lr, out.loss, locals, weights, out.correct, out.count);
    }
    Ok(PipelineRun { timing, owned })
}

/// Reference executor: the same stage work and injected delays, one stage
/// after another on the calling thread.
pub fn run_sequential<T, I>(
    model: &mut DecoupledModel<T>,
    source: I,
    weights: LossWeights,
    cfg: &SgdConfig,
    state: &mut TrainState<T>,
    stage_delays: &[Duration],
) -> Result<RunTiming>
where
    T: Scalar,
    I: IntoIterator<Item = Result<PipelineBatch<T>>>,
{
    let k = model.k();
    let delay = |s: usize| stage_delays.get(s).copied().unwrap_or_default();
    let origin = Instant::now();
    let mut stages: Vec<StageTiming> = (0..=k)
        .map(|stage| StageTiming {
            stage,
            peak_held: 1,
            ..StageTiming::default()
        })
        .collect();
    for item in source {
        let batch = item?;
        state.epoch = batch.epoch;
        let lr = state.lr(cfg);
        let mut h = Arc::new(batch.images);
        let mut locals = Vec::with_capacity(k);
        for (s, block) in model.blocks_mut().iter_mut().enumerate() {
            let start = Instant::now();
            thread::sleep(delay(s));
            let fwd = block_forward(block, h)?;
            h = fwd.output();
            locals.push(local_update(
                block,
                fwd,
                &batch.labels,
                weights.lambda2,
                cfg,
                lr,
                &mut state.velocities,
            )?);
            stages[s].record(start, origin);
        }
        let start = Instant::now();
        thread::sleep(delay(k));
        let (global, correct) = global_update(
            model.classifier_mut(),
            h,
            &batch.labels,
            weights.lambda1,
            cfg,
            lr,
            &mut state.velocities,
        )?;
        stages[k].record(start, origin);
        state.finish_step(lr, global, locals, weights, correct, batch.labels.len());
    }
    let wall = origin.elapsed();
    for s in &mut stages {
        s.idle = wall.saturating_sub(s.busy);
    }
    Ok(RunTiming { wall, stages })
}

impl StageTiming {
    fn record(&mut self, start: Instant, origin: Instant) {
        let end = origin.elapsed();
        self.busy += start.elapsed();
        self.first_start.get_or_insert(start - origin);
        self.first_end.get_or_insert(end);
        self.last_end = Some(end);
        self.batches += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub busy_fraction: f64,
    pub idle_fraction: f64,
    pub batches: u64,
    /// Batches per second between this stage's first and last completion.
    pub steady_throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub stages: Vec<StageSummary>,
    pub wall_ms: f64,
    pub batches: u64,
    pub batches_per_sec: f64,
    /// Output-stage completions per second once the pipeline is full.
    pub steady_batches_per_sec: f64,
    /// Measured sequential wall time over this run's wall time.
    pub speedup: f64,
    /// Total stage work over the slowest stage's work: the best a
    /// pipeline can do against running the stages back to back.
    pub bottleneck_speedup: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn steady_rate(s: &StageTiming) -> f64 {
    match (s.first_end, s.last_end) {
        (Some(a), Some(b)) if b > a && s.batches > 1 => {
            (s.batches - 1) as f64 / (b - a).as_secs_f64()
        }
        _ => 0.0,
    }
}

/// Summarizes a run. `sequential` is the measured reference; without it
/// the run is its own baseline and the speedup is 1.
pub fn throughput_report(
    timing: &RunTiming,
    sequential: Option<&RunTiming>,
) -> Result<ThroughputReport> {
    let batches = timing.batches();
    if batches == 0 || timing.stages.is_empty() {
        return Err(Error::InvalidArgument(
            "throughput report of an empty run".into(),
        ));
    }
    let wall = timing.wall.as_secs_f64().max(f64::MIN_POSITIVE);
    let stages = timing
        .stages
        .iter()
        .map(|s| StageSummary {
            stage: s.stage,
            busy_ms: ms(s.busy),
            idle_ms: ms(s.idle),
            busy_fraction: s.busy.as_secs_f64() / wall,
            idle_fraction: s.idle.as_secs_f64() / wall,
            batches: s.batches,
            steady_throughput: steady_rate(s),
        })
        .collect();
    let total_busy: f64 = timing.stages.iter().map(|s| s.busy.as_secs_f64()).sum();
    let slowest = timing
        .stages
        .iter()
        .map(|s| s.busy.as_secs_f64())
        .fold(0.0, f64::max);
    let speedup = match sequential {
        Some(seq) => seq.wall.as_secs_f64() / wall,
        None => 1.0,
    };
    Ok(ThroughputReport {
        stages,
        wall_ms: wall * 1e3,
        batches,
        batches_per_sec: batches as f64 / wall,
        steady_batches_per_sec: steady_rate(timing.stages.last().expect("non-empty")),
        speedup,
        bottleneck_speedup: if slowest > 0.0 {
            total_busy / slowest
        } else {
            1.0
        },
    })
}

impl ThroughputReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,busy-ms,idle-ms,batches,steady-throughput\n");
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{},{:.3}",
                s.stage, s.busy_ms, s.idle_ms, s.batches, s.steady_throughput
            );
        }
        out
    }
}

/// Convenience: wraps an iterator of batches as an infallible source.
pub fn infallible<T>(
    batches: impl IntoIterator<Item = PipelineBatch<T>>,
) -> impl Iterator<Item = Result<PipelineBatch<T>>> {
    batches.into_iter().map(Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(busy_ms: u64, batches: u64) -> StageTiming {
        StageTiming {
            busy: Duration::from_millis(busy_ms),
            batches,
            first_end: Some(Duration::from_millis(10)),
            last_end: Some(Duration::from_millis(10 + 10 * (batches - 1))),
            ..StageTiming::default()
        }
    }

    #[test]
    fn report_normalization_and_bottleneck_law() {
        let seq = RunTiming {
            wall: Duration::from_millis(1300),
            stages: vec![
                stage(100, 10),
                stage(100, 10),
                stage(100, 10),
                stage(1000, 10),
            ],
        };
        let r = throughput_report(&seq, None).unwrap();
        assert_eq!(r.speedup, 1.0);
        assert!((r.bottleneck_speedup - 1.3).abs() < 1e-12);
        let r = throughput_report(&seq, Some(&seq)).unwrap();
        assert_eq!(r.speedup, 1.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("stage,busy-ms,idle-ms,batches,steady-throughput\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(throughput_report(&RunTiming::default(), None).is_err());
    }
}
