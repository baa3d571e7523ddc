//! Sample ingestion, frame assembly and the periodic publish loop.

use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use shm_core::frame::{
    assemble_frame, compute_snapshot, evaluate_thresholds, FrameComputationError, FrameSnapshot,
    NodeDisplacementFrame, SampleBuffer, SampleRejection, WarningEvent, DEFAULT_STALENESS_WINDOW_MS,
};
use tokio::time::MissedTickBehavior;

use crate::clock::Clock;
use crate::hub::Hub;
use crate::registry::{Registry, RegistryError};
use crate::store::{self, JsonlAppender, StoreError};
use crate::wire::{RejectedSample, WireSample};

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub staleness_window_ms: i64,
    /// Frames are assembled for `now - alignment_lag_ms`, giving batched
    /// devices time to deliver every sample of a frame instant.
    pub alignment_lag_ms: i64,
    pub publish_period: Duration,
    /// Samples retained per device.
    pub buffer_capacity: usize,
    /// Ingest-to-broadcast latencies retained for percentiles.
    pub latency_window: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            staleness_window_ms: DEFAULT_STALENESS_WINDOW_MS,
            alignment_lag_ms: 0,
            publish_period: Duration::from_millis(50),
            buffer_capacity: 256,
            latency_window: 100_000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("device {0:?} has no active binding")]
    UnknownDevice(String),
    #[error("device {device_id:?}: {rejection}")]
    Rejected { device_id: String, rejection: SampleRejection },
    #[error("frame at {frame_t_ms} does not follow previous frame at {last_t_ms}")]
    NonMonotonicFrame { frame_t_ms: i64, last_t_ms: i64 },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub samples_accepted: u64,
    pub samples_out_of_order: u64,
    pub samples_non_finite: u64,
    pub unknown_device_requests: u64,
    pub frames_emitted: u64,
    pub frames_skipped: u64,
    pub chain_failures: u64,
    pub warnings_emitted: u64,
}

/// Result of accepting one batch from a device.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchOutcome {
    pub accepted: usize,
    pub rejected: Vec<RejectedSample>,
}

/// Everything produced by one frame tick.
#[derive(Clone, Debug)]
pub struct TickOutcome {
    pub frame: NodeDisplacementFrame,
    pub snapshot: Arc<FrameSnapshot>,
    pub warnings: Vec<WarningEvent>,
    pub errors: Vec<FrameComputationError>,
    pub delivered: usize,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[Duration], p: f64) -> Option<Duration> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug)]
struct DeviceStream {
    buffer: SampleBuffer,
    /// (newest sample in batch, wall time the batch was accepted), awaiting
    /// their first broadcast.
    pending: VecDeque<(i64, Instant)>,
}

#[derive(Debug, Default)]
struct Latencies {
    samples: VecDeque<Duration>,
}

pub struct Engine {
    registry: Arc<Registry>,
    hub: Arc<Hub>,
    config: EngineConfig,
    clock: Clock,
    streams: Mutex<HashMap<String, DeviceStream>>,
    /// Last frame timestamp per structure; its lock also serializes ticks.
    frames: Mutex<HashMap<String, i64>>,
    logs: Mutex<JsonlAppender>,
    log_dir: Option<PathBuf>,
    stats: Mutex<EngineStats>,
    latencies: Mutex<Latencies>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Engine {
    /// Logs (samples, frames, warnings) go under the registry's data
    /// directory when it has one.
    pub fn new(registry: Arc<Registry>, hub: Arc<Hub>, config: EngineConfig, clock: Clock) -> Self {
        let log_dir = registry.data_dir().map(|d| d.to_owned());
        Engine {
            registry,
            hub,
            config,
            clock,
            streams: Mutex::new(HashMap::new()),
            frames: Mutex::new(HashMap::new()),
            logs: Mutex::new(JsonlAppender::new()),
            log_dir,
            stats: Mutex::new(EngineStats::default()),
            latencies: Mutex::new(Latencies::default()),
        }
    }

    /// An engine with its own hub, which looks structures up in `registry`.
    pub fn with_registry(registry: Arc<Registry>, config: EngineConfig, clock: Clock) -> Self {
        let lookup = registry.clone();
        let hub = Arc::new(Hub::new(move |id| lookup.contains(id)));
        Self::new(registry, hub, config, clock)
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn stats(&self) -> EngineStats {
        self.stats.lock().clone()
    }

    /// Ingest-to-broadcast latency percentile (`p` in `[0, 100]`).
    pub fn latency_percentile(&self, p: f64) -> Option<Duration> {
        let lat = self.latencies.lock();
        let mut sorted: Vec<_> = lat.samples.iter().copied().collect();
        sorted.sort_unstable();
        percentile(&sorted, p)
    }

    pub fn latency_count(&self) -> usize {
        self.latencies.lock().samples.len()
    }

    /// Accepts a single sample.
    pub fn accept_sample(&self, sample: &shm_core::frame::DisplacementSample) -> Result<(), EngineError> {
        let wire = WireSample { t_ms: sample.t_ms, dx_m: sample.dx, dy_m: sample.dy, dz_m: sample.dz };
        let outcome = self.accept_batch(&sample.device_id, &[wire])?;
        match outcome.rejected.first() {
            None => Ok(()),
            Some(_) => {
                let streams = self.streams.lock();
                let last = streams.get(&sample.device_id).and_then(|s| s.buffer.last_t_ms());
                let rejection = match last {
                    Some(last_t_ms) if sample.t_ms <= last_t_ms => {
                        SampleRejection::OutOfOrder { t_ms: sample.t_ms, last_t_ms }
                    }
                    _ => SampleRejection::NonFinite,
                };
                Err(EngineError::Rejected { device_id: sample.device_id.clone(), rejection })
            }
        }
    }

    /// Accepts a batch from one device, in order. Rejected samples are
    /// reported with their index and never buffered or logged.
    pub fn accept_batch(&self, device_id: &str, samples: &[WireSample]) -> Result<BatchOutcome, EngineError> {
        let Some(route) = self.registry.route(device_id) else {
            self.stats.lock().unknown_device_requests += 1;
            return Err(EngineError::UnknownDevice(device_id.to_owned()));
        };
        let accepted_at = Instant::now();
        let mut outcome = BatchOutcome::default();
        let mut logged = Vec::with_capacity(samples.len());
        let (mut out_of_order, mut non_finite) = (0, 0);
        {
            let mut streams = self.streams.lock();
            let stream = streams.entry(device_id.to_owned()).or_insert_with(|| DeviceStream {
                buffer: SampleBuffer::new(self.config.buffer_capacity),
                pending: VecDeque::new(),
            });
            for (index, s) in samples.iter().enumerate() {
                let d = shm_core::Point3::new(s.dx_m, s.dy_m, s.dz_m);
                match stream.buffer.push(s.t_ms, d) {
                    Ok(()) => {
                        outcome.accepted += 1;
                        logged.push(*s);
                    }
                    Err(rejection) => {
                        let reason = match rejection {
                            SampleRejection::OutOfOrder { .. } => {
                                out_of_order += 1;
                                "out_of_order"
                            }
                            SampleRejection::NonFinite => {
                                non_finite += 1;
                                "non_finite"
                            }
                        };
                        outcome.rejected.push(RejectedSample { index, reason: reason.into() });
                    }
                }
            }
            if let Some(last) = logged.last() {
                stream.pending.push_back((last.t_ms, accepted_at));
            }
        }
        if let (Some(dir), false) = (&self.log_dir, logged.is_empty()) {
            let path = store::structure_dir(dir, &route.structure_id)
                .join("samples")
                .join(format!("{device_id}.jsonl"));
            self.logs.lock().append(&path, &logged)?;
        }
        let mut stats = self.stats.lock();
        stats.samples_accepted += outcome.accepted as u64;
        stats.samples_out_of_order += out_of_order;
        stats.samples_non_finite += non_finite;
        Ok(outcome)
    }

    /// Assembles the displacement frame of a structure at `frame_t_ms`
    /// without solving or publishing it.
    pub fn assemble_frame(&self, structure_id: &str, frame_t_ms: i64) -> Result<NodeDisplacementFrame, EngineError> {
        let config = self.registry.resolve_runtime_config(structure_id)?;
        let streams = self.streams.lock();
        Ok(assemble_frame(&config, frame_t_ms, self.config.staleness_window_ms, |device, t| {
            streams.get(device).and_then(|s| s.buffer.latest_at_or_before(t))
        }))
    }

    /// Assembles, solves, evaluates and publishes one frame.
    ///
    /// Frames of one structure are strictly ordered: a `frame_t_ms` not after
    /// the previous one is refused.
    pub fn tick(&self, structure_id: &str, frame_t_ms: i64) -> Result<TickOutcome, EngineError> {
        let mut frames = self.frames.lock();
        if let Some(&last_t_ms) = frames.get(structure_id) {
            if frame_t_ms <= last_t_ms {
                self.stats.lock().frames_skipped += 1;
                return Err(EngineError::NonMonotonicFrame { frame_t_ms, last_t_ms });
            }
        }
        let config = self.registry.resolve_runtime_config(structure_id)?;
        let frame = {
            let streams = self.streams.lock();
            assemble_frame(&config, frame_t_ms, self.config.staleness_window_ms, |device, t| {
                streams.get(device).and_then(|s| s.buffer.latest_at_or_before(t))
            })
        };
        let (snapshot, errors) = compute_snapshot(&config, &frame);
        let warnings = config
            .thresholds
            .as_ref()
            .map(|t| evaluate_thresholds(&frame, t))
            .unwrap_or_default();
        frames.insert(structure_id.to_owned(), frame_t_ms);

        if let Some(dir) = &self.log_dir {
            let sdir = store::structure_dir(dir, structure_id);
            let mut logs = self.logs.lock();
            logs.append(&sdir.join("frames.jsonl"), [&snapshot])?;
            if !warnings.is_empty() {
                logs.append(&sdir.join("warnings.jsonl"), &warnings)?;
            }
        }

        let snapshot = Arc::new(snapshot);
        let delivered = self.hub.broadcast_snapshot(snapshot.clone());
        for w in &warnings {
            self.hub.broadcast_warning(Arc::new(w.clone()));
        }
        drop(frames);

        self.record_latencies(&frame);
        let mut stats = self.stats.lock();
        stats.frames_emitted += 1;
        stats.chain_failures += errors.len() as u64;
        stats.warnings_emitted += warnings.len() as u64;
        drop(stats);

        Ok(TickOutcome { frame, snapshot, warnings, errors, delivered })
    }

    fn record_latencies(&self, frame: &NodeDisplacementFrame) {
        let now = Instant::now();
        let mut done = Vec::new();
        {
            let mut streams = self.streams.lock();
            for node in &frame.nodes {
                let (Some(device), Some(source_t)) = (&node.device_id, node.source_t_ms) else {
                    continue;
                };
                let Some(stream) = streams.get_mut(device) else { continue };
                while let Some(&(newest, at)) = stream.pending.front() {
                    if newest > source_t {
                        break;
                    }
                    done.push(now - at);
                    stream.pending.pop_front();
                }
            }
        }
        if done.is_empty() {
            return;
        }
        let mut lat = self.latencies.lock();
        for d in done {
            if lat.samples.len() == self.config.latency_window {
                lat.samples.pop_front();
            }
            lat.samples.push_back(d);
        }
    }

    /// Frame timestamp for the current clock reading.
    pub fn frame_time_now(&self) -> i64 {
        self.clock.now_ms() - self.config.alignment_lag_ms
    }

    /// Ticks `structure_id` (or every registered structure when `None`)
    /// once per publish period until `shutdown` resolves. Per-frame failures
    /// are logged and never stop the loop.
    pub async fn run_loop(self: Arc<Self>, structure_id: Option<String>, shutdown: impl Future<Output = ()>) {
        let period = self.config.publish_period;
        let mut interval = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
        interval.set_missed_tick_behavior(MissedTickBehavior::Skip);
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                _ = interval.tick() => {}
            }
            let frame_t_ms = self.frame_time_now();
            let ids = match &structure_id {
                Some(id) => vec![id.clone()],
                None => self.registry.structure_ids(),
            };
            for id in ids {
                match self.tick(&id, frame_t_ms) {
                    Ok(outcome) => {
                        for e in &outcome.errors {
                            tracing::warn!(structure = %id, frame_t_ms, "{e}");
                        }
                    }
                    Err(e) => tracing::warn!(structure = %id, frame_t_ms, "frame skipped: {e}"),
                }
            }
        }
    }

    /// Recorded snapshots of a structure with `from_ms <= t <= to_ms`, as
    /// JSON lines in ascending time order.
    pub fn export(&self, structure_id: &str, from_ms: i64, to_ms: i64) -> Result<Vec<String>, EngineError> {
        if !self.registry.contains(structure_id) {
            return Err(RegistryError::NotFound(format!("structure {structure_id:?}")).into());
        }
        let Some(dir) = &self.log_dir else { return Ok(Vec::new()) };
        #[derive(serde::Deserialize)]
        struct Stamp {
            frame_t_ms: i64,
        }
        let path = store::structure_dir(dir, structure_id).join("frames.jsonl");
        // Hold the log lock so no frame is half-written while reading.
        let _logs = self.logs.lock();
        let mut out = Vec::new();
        for (i, line) in store::read_lines(&path)?.into_iter().enumerate() {
            let stamp: Stamp = serde_json::from_str(&line).map_err(|e| StoreError::Format {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if (from_ms..=to_ms).contains(&stamp.frame_t_ms) {
                out.push(line);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::BindingRequest;
    use shm_core::model::{two_level_frame, ThresholdConfig};

    fn setup(dir: Option<&std::path::Path>) -> Arc<Engine> {
        let registry = Arc::new(match dir {
            Some(d) => Registry::open(d).unwrap(),
            None => Registry::in_memory(),
        });
        registry.upsert_structure(two_level_frame("s1", 4.0, 3.0, 2.0)).unwrap();
        for (i, node) in ["L1-N1", "L1-N2", "L1-N3", "L1-N4", "L2-N1", "L2-N2", "L2-N3", "L2-N4"].iter().enumerate() {
            registry
                .upsert_binding(
                    BindingRequest {
                        device_id: format!("dev-{:03}", i + 1),
                        structure_id: "s1".into(),
                        node_id: (*node).into(),
                        active: true,
                        replace: false,
                    },
                    0,
                )
                .unwrap();
        }
        Arc::new(Engine::with_registry(registry, EngineConfig::default(), Clock::starting_at(0)))
    }

    fn s(t_ms: i64, dx: f64) -> WireSample {
        WireSample { t_ms, dx_m: dx, dy_m: 0.0, dz_m: 0.0 }
    }

    #[test]
    fn batch_with_out_of_order_sample() {
        let e = setup(None);
        let batch: Vec<_> = [0, 50, 100, 150, 140, 200, 250, 300, 350, 400].iter().map(|&t| s(t, 0.0)).collect();
        let out = e.accept_batch("dev-001", &batch).unwrap();
        assert_eq!(out.accepted, 9);
        assert_eq!(out.rejected, vec![RejectedSample { index: 4, reason: "out_of_order".into() }]);
        // replaying the batch is rejected in full
        let replay = e.accept_batch("dev-001", &batch).unwrap();
        assert_eq!(replay.accepted, 0);
        assert_eq!(replay.rejected.len(), 10);
        assert!(matches!(e.accept_batch("dev-999", &batch), Err(EngineError::UnknownDevice(_))));
        assert_eq!(e.stats().samples_accepted, 9);
        assert_eq!(e.stats().samples_out_of_order, 11);
    }

    #[test]
    fn single_sample_errors() {
        let e = setup(None);
        let sample = |t| shm_core::frame::DisplacementSample { device_id: "dev-001".into(), t_ms: t, dx: 0.0, dy: 0.0, dz: 0.0 };
        e.accept_sample(&sample(10)).unwrap();
        assert!(matches!(
            e.accept_sample(&sample(10)),
            Err(EngineError::Rejected { rejection: SampleRejection::OutOfOrder { .. }, .. })
        ));
        let unknown = shm_core::frame::DisplacementSample { device_id: "x".into(), ..sample(11) };
        assert!(matches!(e.accept_sample(&unknown), Err(EngineError::UnknownDevice(_))));
    }

    #[test]
    fn stale_device_holds_last_value() {
        let e = setup(None);
        for dev in 1..=8 {
            e.accept_batch(&format!("dev-{dev:03}"), &[s(1_000, 0.01 * dev as f64)]).unwrap();
        }
        let fresh = e.assemble_frame("s1", 1_040).unwrap();
        assert_eq!(fresh.stale_count(), 0);
        for dev in 2..=8 {
            e.accept_batch(&format!("dev-{dev:03}"), &[s(2_000, 0.0)]).unwrap();
        }
        let frame = e.assemble_frame("s1", 2_000).unwrap();
        assert_eq!(frame.stale_count(), 1);
        let held = frame.node("L1-N1").unwrap();
        assert!(held.stale);
        assert_eq!(held.displacement.x, 0.01);
    }

    #[test]
    fn ticks_are_strictly_ordered_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let e = setup(Some(dir.path()));
        e.registry()
            .set_thresholds(ThresholdConfig { structure_id: "s1".into(), max_dx: 0.25, max_dy: 0.25, max_dz: 0.1 })
            .unwrap();
        e.accept_batch("dev-001", &[s(0, 0.3)]).unwrap();
        let out = e.tick("s1", 50).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(matches!(e.tick("s1", 50), Err(EngineError::NonMonotonicFrame { .. })));
        e.tick("s1", 100).unwrap();
        assert_eq!(e.export("s1", 0, 1_000).unwrap().len(), 2);
        assert_eq!(e.export("s1", 60, 1_000).unwrap().len(), 1);
        assert!(e.export("s1", 200, 300).unwrap().is_empty());
        assert!(matches!(e.export("nope", 0, 1), Err(EngineError::Registry(RegistryError::NotFound(_)))));
        let samples = store::read_lines(&dir.path().join("structures/s1/samples/dev-001.jsonl")).unwrap();
        assert_eq!(samples.len(), 1);
        let warnings = store::read_lines(&dir.path().join("structures/s1/warnings.jsonl")).unwrap();
        assert_eq!(warnings.len(), 2);
        assert_eq!(e.latency_count(), 1);
    }
}
