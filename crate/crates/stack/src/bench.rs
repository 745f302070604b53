//! Benchmark harness: achieved FPS under a byte budget, the four task
//! latencies, and per-process resource sampling.

use std::ffi::OsStr;
use std::time::{Duration, Instant};

use remcap_core::frame::FRAME_HEADER_LEN;
use remcap_core::{Encoding, IngestStats, Resolution, SessionStatus, SessionSummary};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sysinfo::{ProcessRefreshKind, ProcessesToUpdate, System};
use uuid::Uuid;

use crate::agent::{AgentConfig, DeviceAgent};
use crate::clock::wall_micros;
use crate::gateway::GatewayConfig;
use crate::stack::{Stack, StackConfig};

/// Row names, in table order.
pub const TASK_NAMES: [&str; 4] = [
    "Loading the system",
    "Setting up the device",
    "Client-server latency",
    "Executing control command",
];

/// Published (mean, std) in ms for the same four tasks, over residential
/// and university Wi-Fi. Context only; not targets.
pub const RESIDENTIAL_WIFI_MS: [(f64, f64); 4] =
    [(222.49, 8.55), (68.40, 8.42), (63.30, 1.46), (6.11, 1.81)];
pub const UNIVERSITY_WIFI_MS: [(f64, f64); 4] =
    [(134.33, 3.93), (41.76, 2.53), (38.06, 2.24), (1.81, 0.77)];

pub const MIN_LATENCY_RUNS: u32 = 10;
pub const MIN_FPS_DURATION_S: f64 = 5.0;
pub const CSV_HEADER: &str = "ts,process,cpu,rss";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("stack unreachable: {0}")]
    StackUnreachable(String),
    #[error("process not found: {0}")]
    ProcessNotFound(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn unreachable(e: impl std::fmt::Display) -> BenchError {
    BenchError::StackUnreachable(e.to_string())
}

/// Where the stack under test listens.
#[derive(Debug, Clone)]
pub struct StackTarget {
    pub http: String,
    pub relay: String,
}

/// Starts a private stack in a temporary directory.
pub async fn local_stack() -> Result<(Stack, tempfile::TempDir), BenchError> {
    let dir = tempfile::tempdir().map_err(unreachable)?;
    let stack = Stack::start(StackConfig::local(GatewayConfig::new(dir.path())))
        .await
        .map_err(unreachable)?;
    Ok((stack, dir))
}

impl StackTarget {
    pub fn of(stack: &Stack) -> Self {
        StackTarget {
            http: stack.http_addr.to_string(),
            relay: stack.relay_addr.to_string(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.http, path)
    }
}

/// Thin JSON client for the gateway API.
#[derive(Clone)]
pub struct ApiClient {
    target: StackTarget,
    http: reqwest::Client,
}

impl ApiClient {
    pub fn new(target: StackTarget) -> Self {
        ApiClient {
            target,
            http: reqwest::Client::new(),
        }
    }

    async fn call(&self, req: reqwest::RequestBuilder) -> Result<Value, BenchError> {
        let resp = req.send().await.map_err(unreachable)?;
        let status = resp.status();
        let body: Value = if status == reqwest::StatusCode::NO_CONTENT {
            Value::Null
        } else {
            resp.json().await.map_err(unreachable)?
        };
        if !status.is_success() {
            return Err(BenchError::StackUnreachable(format!("{status}: {body}")));
        }
        Ok(body)
    }

    pub async fn get(&self, path: &str) -> Result<Value, BenchError> {
        self.call(self.http.get(self.target.url(path))).await
    }

    pub async fn post(&self, path: &str, body: Value) -> Result<Value, BenchError> {
        self.call(self.http.post(self.target.url(path)).json(&body))
            .await
    }

    pub async fn delete(&self, path: &str) -> Result<Value, BenchError> {
        self.call(self.http.delete(self.target.url(path))).await
    }

    /// Acquires the lease and starts one session; returns its id.
    pub async fn start_one(
        &self,
        researcher: &str,
        scene: &str,
        device: u16,
    ) -> Result<Uuid, BenchError> {
        self.post(
            "/leases",
            json!({"researcher": researcher, "scene_id": scene}),
        )
        .await?;
        let started = self
            .post(
                "/sessions",
                json!({"researcher": researcher, "scene_id": scene, "device_ids": [device]}),
            )
            .await?;
        started["sessions"][0]["session_id"]
            .as_str()
            .and_then(|s| Uuid::parse_str(s).ok())
            .ok_or_else(|| unreachable(format!("unexpected start reply {started}")))
    }

    pub async fn status(&self, id: Uuid) -> Result<SessionStatus, BenchError> {
        let v = self.get(&format!("/sessions/{id}")).await?;
        serde_json::from_value(v["session"]["status"].clone()).map_err(unreachable)
    }

    pub async fn wait_status(
        &self,
        id: Uuid,
        want: SessionStatus,
        timeout: Duration,
    ) -> Result<(), BenchError> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.status(id).await? >= want {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(unreachable(format!("session {id} did not reach {want:?}")));
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub resolution: Resolution,
    pub budget_bytes_per_sec: Option<u64>,
    pub source_fps: u8,
    pub encoded_frame_bytes: u64,
    pub achieved_fps: f64,
    pub expected_fps: f64,
    pub duration_s: f64,
    pub captured: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// Delivered frames per second of capture time.
pub fn achieved_fps(delivered: u64, captured: u64, source_fps: u8) -> f64 {
    if captured == 0 {
        return 0.0;
    }
    delivered as f64 * source_fps as f64 / captured as f64
}

/// Size of a raw frame record at `resolution`.
pub fn raw_frame_bytes(resolution: Resolution) -> u64 {
    (FRAME_HEADER_LEN + resolution.pixel_bytes()) as u64
}

/// min(source fps, budget / frame size).
pub fn expected_fps(source_fps: u8, budget: Option<u64>, frame_bytes: u64) -> f64 {
    match budget {
        None => source_fps as f64,
        Some(b) => (source_fps as f64).min(b as f64 / frame_bytes as f64),
    }
}

/// Streams `duration_s` seconds of raw frames from a deterministic agent
/// through the stack and reports what the relay received. Achieved fps is
/// frames delivered to the relay over the capture duration.
pub async fn measure_fps(
    target: &StackTarget,
    resolution: Resolution,
    budget: Option<u64>,
    duration_s: f64,
) -> Result<FpsReport, BenchError> {
    if !(duration_s >= MIN_FPS_DURATION_S) {
        return Err(BenchError::InvalidArgument(format!(
            "duration must be at least {MIN_FPS_DURATION_S} s"
        )));
    }
    let fps = 30u8;
    let scene = format!("bench-fps-{}", Uuid::new_v4().simple());
    let mut cfg = AgentConfig::new(&scene, 1, &target.relay, &target.http);
    cfg.fps = fps;
    cfg.resolution = resolution;
    cfg.deterministic_clock = true;
    cfg.encoding = Encoding::RawRgb24;
    cfg.send_budget_bytes_per_sec = budget;
    cfg.max_frames = Some((duration_s * fps as f64).round() as u64);

    let mut agent = DeviceAgent::connect(cfg).await.map_err(unreachable)?;
    let api = ApiClient::new(target.clone());
    let capture = tokio::spawn(async move { agent.run_session().await });
    let id = api.start_one("bench", &scene, 1).await?;
    let summary: SessionSummary = capture.await.map_err(unreachable)?.map_err(unreachable)?;
    api.wait_status(id, SessionStatus::Packed, Duration::from_secs(60))
        .await?;
    let stats: IngestStats =
        serde_json::from_value(api.get(&format!("/sessions/{id}/stats")).await?)
            .map_err(unreachable)?;
    api.delete(&format!("/leases/{scene}?researcher=bench"))
        .await?;

    let frame_bytes = raw_frame_bytes(resolution);
    Ok(FpsReport {
        resolution,
        budget_bytes_per_sec: budget,
        source_fps: fps,
        encoded_frame_bytes: frame_bytes,
        achieved_fps: achieved_fps(stats.delivered, summary.captured_frames, fps),
        expected_fps: expected_fps(fps, budget, frame_bytes),
        duration_s,
        captured: summary.captured_frames,
        delivered: stats.delivered,
        dropped: summary.dropped_frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLatency {
    pub name: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub runs: u32,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub unit: String,
    pub runs: u32,
    pub tasks: Vec<TaskLatency>,
}

/// Mean and population standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl LatencyReport {
    pub fn from_samples(samples: [Vec<f64>; 4]) -> Self {
        let runs = samples[0].len() as u32;
        let tasks = TASK_NAMES
            .iter()
            .zip(samples)
            .map(|(name, s)| {
                let (mean_ms, std_ms) = mean_std(&s);
                TaskLatency {
                    name: name.to_string(),
                    mean_ms,
                    std_ms,
                    runs: s.len() as u32,
                    samples_ms: s,
                }
            })
            .collect();
        LatencyReport {
            unit: "ms".into(),
            runs,
            tasks,
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Times the four tasks `runs` times each against a live session:
/// an event-log read over a fresh connection, a device registration, a
/// ping, and a command round trip minus that run's ping.
pub async fn measure_task_latencies(
    target: &StackTarget,
    runs: u32,
) -> Result<LatencyReport, BenchError> {
    if runs < MIN_LATENCY_RUNS {
        return Err(BenchError::InvalidArgument(format!(
            "need at least {MIN_LATENCY_RUNS} runs"
        )));
    }
    let scene = format!("bench-latency-{}", Uuid::new_v4().simple());
    let mut cfg = AgentConfig::new(&scene, 1, &target.relay, &target.http);
    cfg.encoding = Encoding::RleRgb24;
    let mut agent = DeviceAgent::connect(cfg).await.map_err(unreachable)?;
    let capture = tokio::spawn(async move { agent.run_session().await });
    let api = ApiClient::new(target.clone());
    let id = api.start_one("bench", &scene, 1).await?;

    let mut samples: [Vec<f64>; 4] = Default::default();
    for run in 0..runs {
        let fresh = ApiClient::new(target.clone());
        let t = Instant::now();
        fresh.get(&format!("/sessions/{id}/events?from=1")).await?;
        samples[0].push(ms(t.elapsed()));

        let t = Instant::now();
        api.post(
            &format!("/scenes/{scene}/devices"),
            json!({"device_id": 100 + run, "capabilities": "bench"}),
        )
        .await?;
        samples[1].push(ms(t.elapsed()));

        let t = Instant::now();
        api.get("/ping").await?;
        let ping = ms(t.elapsed());
        samples[2].push(ping);

        let value = if run % 2 == 0 { 10 } else { -10 };
        let t = Instant::now();
        api.post(
            &format!("/sessions/{id}/commands"),
            json!({"researcher": "bench", "kind": "SET_SPEED", "value": value}),
        )
        .await?;
        samples[3].push((ms(t.elapsed()) - ping).max(0.0));
    }

    api.post(&format!("/sessions/{id}/stop"), json!({})).await?;
    let _ = capture.await;
    api.delete(&format!("/leases/{scene}?researcher=bench"))
        .await?;
    Ok(LatencyReport::from_samples(samples))
}

/// Samples CPU percent and resident memory of every named process,
/// summed per name, each `interval_ms` for `duration_s`.
pub async fn sample_resources(
    names: &[String],
    interval_ms: u64,
    duration_s: f64,
) -> Result<String, BenchError> {
    if interval_ms == 0 {
        return Err(BenchError::InvalidArgument(
            "interval must be positive".into(),
        ));
    }
    let refresh = ProcessRefreshKind::nothing().with_cpu().with_memory();
    let mut sys = System::new();
    sys.refresh_processes_specifics(ProcessesToUpdate::All, true, refresh);
    for name in names {
        if sys
            .processes_by_exact_name(OsStr::new(name))
            .next()
            .is_none()
        {
            return Err(BenchError::ProcessNotFound(name.clone()));
        }
    }
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(CSV_HEADER.split(','))
        .expect("in-memory csv");
    let ticks = ((duration_s * 1000.0) / interval_ms as f64).round() as u64;
    let start = tokio::time::Instant::now();
    for tick in 1..=ticks {
        tokio::time::sleep_until(start + Duration::from_millis(interval_ms * tick)).await;
        sys.refresh_processes_specifics(ProcessesToUpdate::All, true, refresh);
        let ts = wall_micros();
        for name in names {
            let (cpu, rss) = sys
                .processes_by_exact_name(OsStr::new(name))
                .fold((0.0f64, 0u64), |(c, r), p| {
                    (c + p.cpu_usage() as f64, r + p.memory())
                });
            out.write_record([
                ts.to_string(),
                name.clone(),
                format!("{cpu:.2}"),
                rss.to_string(),
            ])
            .expect("in-memory csv");
        }
    }
    Ok(String::from_utf8(out.into_inner().expect("in-memory csv")).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn expected_fps_formula() {
        let f1080 = raw_frame_bytes(Resolution::P1080);
        assert_eq!(f1080, 6_220_848);
        assert_eq!(raw_frame_bytes(Resolution::P360), 691_248);
        assert_eq!(expected_fps(30, Some(93_312_720), f1080), 15.0);
        assert_eq!(expected_fps(30, None, f1080), 30.0);
        assert_eq!(expected_fps(30, Some(0), f1080), 0.0);
        assert_eq!(achieved_fps(75, 150, 30), 15.0);
        assert_eq!(achieved_fps(0, 0, 30), 0.0);
    }

    #[test]
    fn report_rows_follow_table_order() {
        let r = LatencyReport::from_samples([
            vec![1.0; 10],
            vec![2.0; 10],
            vec![3.0; 10],
            vec![4.0; 10],
        ]);
        let names: Vec<_> = r.tasks.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, TASK_NAMES);
        assert!(r.tasks.iter().all(|t| t.runs == 10 && t.std_ms == 0.0));
        assert_eq!(r.tasks[3].mean_ms, 4.0);
    }

    #[tokio::test]
    async fn unknown_process() {
        let err = sample_resources(&["no-such-process-xyz".into()], 100, 0.2)
            .await
            .unwrap_err();
        assert!(matches!(err, BenchError::ProcessNotFound(n) if n == "no-such-process-xyz"));
    }
}
