//! Simulated device fleet posting scenario displacements to the ingest route.

use std::fmt;
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request};
use axum::Router;
use shm_core::model::RuntimeConfig;
use shm_core::scenario::{scenario_sample, Scenario, ScenarioError};
use tower::ServiceExt;

use crate::clock::Clock;
use crate::engine::percentile;
use crate::wire::{ErrorBody, IngestRequest, IngestResponse, WireSample};

pub const INGEST_PATH: &str = "/api/v1/ingest";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Delivers one serialized ingest request; returns the HTTP status and body.
pub trait IngestTransport: Clone + Send + Sync + 'static {
    fn post_ingest(&self, body: Vec<u8>) -> impl Future<Output = Result<(u16, Vec<u8>), TransportError>> + Send;
}

/// Posts over HTTP to a running server.
#[derive(Clone, Debug)]
pub struct HttpTransport {
    client: reqwest::Client,
    url: String,
}

impl HttpTransport {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .expect("http client");
        HttpTransport { client, url: format!("{}{INGEST_PATH}", base.trim_end_matches('/')) }
    }
}

impl IngestTransport for HttpTransport {
    async fn post_ingest(&self, body: Vec<u8>) -> Result<(u16, Vec<u8>), TransportError> {
        let response = self
            .client
            .post(&self.url)
            .header(header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| TransportError(e.to_string()))?;
        let status = response.status().as_u16();
        let bytes = response.bytes().await.map_err(|e| TransportError(e.to_string()))?;
        Ok((status, bytes.to_vec()))
    }
}

/// Calls the gateway router in-process, without a socket.
#[derive(Clone, Debug)]
pub struct RouterTransport {
    router: Router,
}

impl RouterTransport {
    pub fn new(router: Router) -> Self {
        RouterTransport { router }
    }
}

impl IngestTransport for RouterTransport {
    async fn post_ingest(&self, body: Vec<u8>) -> Result<(u16, Vec<u8>), TransportError> {
        let request = Request::post(INGEST_PATH)
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(body))
            .map_err(|e| TransportError(e.to_string()))?;
        let response = self.router.clone().oneshot(request).await.map_err(|e| TransportError(e.to_string()))?;
        let status = response.status().as_u16();
        let bytes = axum::body::to_bytes(response.into_body(), usize::MAX)
            .await
            .map_err(|e| TransportError(e.to_string()))?;
        Ok((status, bytes.to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimDevice {
    pub device_id: String,
    pub node_id: String,
}

/// The first `count` actively bound devices of a structure, by device id.
pub fn bound_devices(config: &RuntimeConfig, count: usize) -> Result<Vec<SimDevice>, SimError> {
    let mut devices: Vec<_> = config
        .node_devices
        .iter()
        .map(|(node, device)| SimDevice { device_id: device.clone(), node_id: node.clone() })
        .collect();
    devices.sort_by(|a, b| a.device_id.cmp(&b.device_id));
    if devices.len() < count {
        return Err(SimError::Usage(format!(
            "structure {:?} has {} bound devices, {count} requested",
            config.structure_id,
            devices.len()
        )));
    }
    devices.truncate(count);
    Ok(devices)
}

#[derive(Clone, Debug)]
pub struct SimulationPlan {
    pub devices: Vec<SimDevice>,
    pub rate_hz: f64,
    pub duration_s: f64,
    pub batch_size: usize,
    pub scenario: Scenario,
    /// Epoch ms of the first sample; the clock's current reading if `None`.
    pub start_ms: Option<i64>,
    /// Retries per request after a connection failure or 5xx response.
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl SimulationPlan {
    pub fn new(devices: Vec<SimDevice>, rate_hz: f64, duration_s: f64, batch_size: usize, scenario: Scenario) -> Self {
        SimulationPlan {
            devices,
            rate_hz,
            duration_s,
            batch_size,
            scenario,
            start_ms: None,
            max_retries: 4,
            initial_backoff: Duration::from_millis(50),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(SimError::Usage(format!("rate must be positive, got {}", self.rate_hz)));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(SimError::Usage(format!("duration must be positive, got {}", self.duration_s)));
        }
        if self.batch_size == 0 {
            return Err(SimError::Usage("batch size must be at least 1".into()));
        }
        if self.devices.is_empty() {
            return Err(SimError::Usage("no devices to simulate".into()));
        }
        self.scenario.validate()?;
        Ok(())
    }

    /// Samples each device produces.
    pub fn samples_per_device(&self) -> usize {
        (self.duration_s * self.rate_hz).round() as usize
    }

    /// Offset of sample `k` from the start, ms.
    pub fn sample_offset_ms(&self, k: usize) -> i64 {
        (k as f64 * 1000.0 / self.rate_hz).round() as i64
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub devices: usize,
    pub requests_sent: u64,
    pub requests_failed: u64,
    pub retries: u64,
    pub samples_sent: u64,
    pub samples_accepted: u64,
    pub samples_rejected: u64,
    pub latency_p50: Option<Duration>,
    pub latency_p95: Option<Duration>,
    pub latency_p99: Option<Duration>,
    /// Distinct error messages, first occurrence order.
    pub errors: Vec<String>,
}

impl RunReport {
    /// Every planned sample was delivered and accepted.
    pub fn is_complete(&self, plan: &SimulationPlan) -> bool {
        self.requests_failed == 0 && self.samples_accepted == (plan.samples_per_device() * plan.devices.len()) as u64
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = |d: Option<Duration>| d.map_or("-".to_string(), |d| format!("{:.2}ms", d.as_secs_f64() * 1e3));
        writeln!(f, "devices:   {}", self.devices)?;
        writeln!(
            f,
            "requests:  {} sent, {} failed, {} retries",
            self.requests_sent, self.requests_failed, self.retries
        )?;
        writeln!(
            f,
            "samples:   {} sent, {} accepted, {} rejected",
            self.samples_sent, self.samples_accepted, self.samples_rejected
        )?;
        write!(
            f,
            "latency:   p50 {} p95 {} p99 {}",
            ms(self.latency_p50),
            ms(self.latency_p95),
            ms(self.latency_p99)
        )?;
        for e in &self.errors {
            write!(f, "\nerror:     {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct DeviceReport {
    requests_sent: u64,
    requests_failed: u64,
    retries: u64,
    samples_sent: u64,
    samples_accepted: u64,
    samples_rejected: u64,
    latencies: Vec<Duration>,
    errors: Vec<String>,
}

impl DeviceReport {
    fn error(&mut self, message: String) {
        if !self.errors.contains(&message) {
            self.errors.push(message);
        }
    }
}

/// Runs every device concurrently until its samples are sent.
///
/// Each device samples at `rate_hz` on `clock`, and posts a batch once its
/// newest sample time has been reached.
pub async fn run_simulation<T: IngestTransport>(
    transport: T,
    config: Arc<RuntimeConfig>,
    plan: SimulationPlan,
    clock: Clock,
) -> Result<RunReport, SimError> {
    plan.validate()?;
    let start_ms = plan.start_ms.unwrap_or_else(|| clock.now_ms());
    let plan = Arc::new(plan);
    let mut tasks = Vec::with_capacity(plan.devices.len());
    for device in plan.devices.clone() {
        let (transport, config, plan) = (transport.clone(), config.clone(), plan.clone());
        tasks.push(tokio::spawn(async move { run_device(transport, &config, &plan, &device, start_ms, clock).await }));
    }

    let mut report = RunReport { devices: plan.devices.len(), ..RunReport::default() };
    let mut latencies = Vec::new();
    for task in tasks {
        let d = task.await.map_err(|e| SimError::Usage(format!("device task failed: {e}")))?;
        report.requests_sent += d.requests_sent;
        report.requests_failed += d.requests_failed;
        report.retries += d.retries;
        report.samples_sent += d.samples_sent;
        report.samples_accepted += d.samples_accepted;
        report.samples_rejected += d.samples_rejected;
        latencies.extend(d.latencies);
        for e in d.errors {
            if !report.errors.contains(&e) {
                report.errors.push(e);
            }
        }
    }
    latencies.sort_unstable();
    report.latency_p50 = percentile(&latencies, 50.0);
    report.latency_p95 = percentile(&latencies, 95.0);
    report.latency_p99 = percentile(&latencies, 99.0);
    Ok(report)
}

async fn run_device<T: IngestTransport>(
    transport: T,
    config: &RuntimeConfig,
    plan: &SimulationPlan,
    device: &SimDevice,
    start_ms: i64,
    clock: Clock,
) -> DeviceReport {
    let mut report = DeviceReport::default();
    let total = plan.samples_per_device();
    let mut k = 0;
    while k < total {
        let end = (k + plan.batch_size).min(total);
        let mut samples = Vec::with_capacity(end - k);
        for i in k..end {
            let offset_ms = plan.sample_offset_ms(i);
            match scenario_sample(&plan.scenario, config, &device.node_id, offset_ms as f64 / 1000.0) {
                Ok(d) => samples.push(WireSample { t_ms: start_ms + offset_ms, dx_m: d.x, dy_m: d.y, dz_m: d.z }),
                Err(e) => {
                    report.error(format!("{}: {e}", device.device_id));
                    break;
                }
            }
        }
        let exhausted = samples.len() < end - k;
        k = end;
        let Some(last) = samples.last() else { break };
        tokio::time::sleep_until(clock.instant_at(last.t_ms)).await;
        let count = samples.len() as u64;
        let body = serde_json::to_vec(&IngestRequest { device_id: device.device_id.clone(), samples })
            .expect("ingest request serializes");
        report.samples_sent += count;
        post_with_retries(&transport, body, count, plan, &device.device_id, &mut report).await;
        if exhausted {
            break;
        }
    }
    report
}

async fn post_with_retries<T: IngestTransport>(
    transport: &T,
    body: Vec<u8>,
    count: u64,
    plan: &SimulationPlan,
    device_id: &str,
    report: &mut DeviceReport,
) {
    let mut backoff = plan.initial_backoff;
    let mut attempt = 0;
    loop {
        report.requests_sent += 1;
        let started = Instant::now();
        let result = transport.post_ingest(body.clone()).await;
        let elapsed = started.elapsed();
        let retryable = match &result {
            Ok((status, _)) => *status >= 500,
            Err(_) => true,
        };
        if retryable && attempt < plan.max_retries {
            attempt += 1;
            report.retries += 1;
            tokio::time::sleep(backoff).await;
            backoff *= 2;
            continue;
        }
        match result {
            Err(e) => {
                report.requests_failed += 1;
                report.error(format!("{device_id}: {e}"));
            }
            Ok((status, bytes)) => {
                report.latencies.push(elapsed);
                match serde_json::from_slice::<IngestResponse>(&bytes) {
                    Ok(r) if status == 202 || status == 422 => {
                        report.samples_accepted += r.accepted as u64;
                        report.samples_rejected += r.rejected.len() as u64;
                        for rejected in r.rejected {
                            report.error(format!("{device_id}: sample rejected: {}", rejected.reason));
                        }
                    }
                    _ => {
                        report.requests_failed += 1;
                        report.samples_rejected += count;
                        let message = serde_json::from_slice::<ErrorBody>(&bytes)
                            .map(|b| b.error)
                            .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
                        report.error(format!("{device_id}: HTTP {status}: {message}"));
                    }
                }
            }
        }
        return;
    }
}
