//! The simulated capture device: connects to the gateway's control channel,
//! and for each session streams rendered frames to the relay while applying
//! commands at frame boundaries.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::{FutureExt, SinkExt, StreamExt};
use remcap_core::header::SessionHeader;
use remcap_core::kinematics::{DEFAULT_MAX_SPEED_MPS, DEFAULT_WHEELBASE_M};
use remcap_core::render::deterministic_ts;
use remcap_core::script::ScriptEntry;
use remcap_core::session::fps_valid;
use remcap_core::throttle::TokenBucket;
use remcap_core::{
    render_frame, AppliedCommand, ControlCommand, Encoding, EventKind, FrameStamp, Params,
    Resolution, SessionSummary, Sim,
};
use serde_json::json;
use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::time::Instant;
use tokio_tungstenite::tungstenite::Message;
use uuid::Uuid;

use crate::clock::wall_micros;
use crate::protocol::{FromAgent, Hello, ToAgent};

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub scene_id: String,
    pub device_id: u16,
    pub fps: u8,
    pub resolution: Resolution,
    pub wheelbase: f64,
    pub max_speed: f64,
    pub deterministic_clock: bool,
    pub relay_addr: String,
    pub gateway_addr: String,
    pub send_budget_bytes_per_sec: Option<u64>,
    pub encoding: Encoding,
    /// End the session by itself after this many captured frames.
    pub max_frames: Option<u64>,
    pub script: Vec<ScriptEntry>,
    pub capabilities: String,
}

impl AgentConfig {
    pub fn new(
        scene_id: impl Into<String>,
        device_id: u16,
        relay_addr: impl Into<String>,
        gateway_addr: impl Into<String>,
    ) -> Self {
        AgentConfig {
            scene_id: scene_id.into(),
            device_id,
            fps: 30,
            resolution: Resolution::P360,
            wheelbase: DEFAULT_WHEELBASE_M,
            max_speed: DEFAULT_MAX_SPEED_MPS,
            deterministic_clock: false,
            relay_addr: relay_addr.into(),
            gateway_addr: gateway_addr.into(),
            send_budget_bytes_per_sec: None,
            encoding: Encoding::RawRgb24,
            max_frames: None,
            script: Vec::new(),
            capabilities: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !fps_valid(self.fps) {
            return Err(AgentError::InvalidConfig(format!(
                "fps {} outside 1..=120",
                self.fps
            )));
        }
        if !(self.wheelbase > 0.0) {
            return Err(AgentError::InvalidConfig(
                "wheelbase must be positive".into(),
            ));
        }
        if !(self.max_speed > 0.0) {
            return Err(AgentError::InvalidConfig(
                "max speed must be positive".into(),
            ));
        }
        Ok(())
    }

    fn hello(&self) -> Hello {
        Hello {
            scene_id: self.scene_id.clone(),
            device_id: self.device_id,
            fps: self.fps,
            resolution: self.resolution,
            deterministic_clock: self.deterministic_clock,
            wheelbase: self.wheelbase,
            max_speed: self.max_speed,
            capabilities: self.capabilities.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("gateway unreachable: {0}")]
    GatewayUnreachable(String),
    #[error("relay disconnected: {0}")]
    RelayDisconnected(String),
    #[error("no session is running")]
    SessionNotRunning,
    #[error("gateway rejected agent: {0}")]
    Rejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

type WsStream = futures::stream::SplitStream<
    tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>,
>;

/// A connected agent, ready to run sessions.
pub struct DeviceAgent {
    config: AgentConfig,
    out: mpsc::UnboundedSender<FromAgent>,
    incoming: WsStream,
    frame_counter: Arc<AtomicU64>,
}

enum Control {
    Msg(ToAgent),
    Closed,
}

impl DeviceAgent {
    /// Opens the control channel and announces the device.
    pub async fn connect(config: AgentConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let url = format!("ws://{}/agents/ws", config.gateway_addr);
        let (ws, _) = tokio_tungstenite::connect_async(url.as_str())
            .await
            .map_err(|e| AgentError::GatewayUnreachable(e.to_string()))?;
        let (mut sink, incoming) = ws.split();
        let (out, mut rx) = mpsc::unbounded_channel::<FromAgent>();
        tokio::spawn(async move {
            while let Some(msg) = rx.recv().await {
                let text = serde_json::to_string(&msg).expect("agent message serializes");
                if sink.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            let _ = sink.close().await;
        });
        let mut agent = DeviceAgent {
            out,
            incoming,
            frame_counter: Arc::new(AtomicU64::new(0)),
            config,
        };
        agent.send(FromAgent::Hello(agent.config.hello()));
        match agent.next_control().await {
            Control::Msg(ToAgent::Welcome) => Ok(agent),
            Control::Msg(ToAgent::Rejected { reason }) => Err(AgentError::Rejected(reason)),
            Control::Msg(other) => Err(AgentError::Protocol(format!(
                "expected welcome, got {other:?}"
            ))),
            Control::Closed => Err(AgentError::GatewayUnreachable(
                "control channel closed".into(),
            )),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// Index of the most recently captured frame, readable from other tasks.
    pub fn frame_counter(&self) -> Arc<AtomicU64> {
        self.frame_counter.clone()
    }

    fn send(&self, msg: FromAgent) {
        let _ = self.out.send(msg);
    }

    async fn next_control(&mut self) -> Control {
        loop {
            match self.incoming.next().await {
                Some(Ok(Message::Text(text))) => {
                    match serde_json::from_str::<ToAgent>(text.as_str()) {
                        Ok(msg) => return Control::Msg(msg),
                        Err(e) => tracing::warn!("ignoring malformed control message: {e}"),
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return Control::Closed,
                Some(Ok(_)) => {}
            }
        }
    }

    /// Runs sessions until the gateway goes away.
    pub async fn serve(mut self) -> Result<(), AgentError> {
        loop {
            match self.run_session().await {
                Ok(summary) => tracing::info!(?summary, "session finished"),
                Err(AgentError::GatewayUnreachable(e)) => {
                    return Err(AgentError::GatewayUnreachable(e))
                }
                Err(e) => tracing::warn!("session failed: {e}"),
            }
        }
    }

    /// Waits for the gateway to start a session, then captures until the
    /// session is stopped or `max_frames` is reached.
    pub async fn run_session(&mut self) -> Result<SessionSummary, AgentError> {
        loop {
            match self.next_control().await {
                Control::Msg(ToAgent::Start {
                    req_id,
                    session_id,
                    start_ts_micros,
                }) => return self.capture(req_id, session_id, start_ts_micros).await,
                Control::Msg(ToAgent::Command { req_id, .. }) => self.send(FromAgent::Error {
                    req_id: Some(req_id),
                    message: AgentError::SessionNotRunning.to_string(),
                }),
                Control::Msg(_) => {}
                Control::Closed => {
                    return Err(AgentError::GatewayUnreachable(
                        "control channel closed".into(),
                    ))
                }
            }
        }
    }

    async fn capture(
        &mut self,
        req_id: u64,
        session_id: Uuid,
        start_ts_micros: u64,
    ) -> Result<SessionSummary, AgentError> {
        let cfg = self.config.clone();
        let mut relay = match TcpStream::connect(&cfg.relay_addr).await {
            Ok(s) => s,
            Err(e) => {
                self.send(FromAgent::Error {
                    req_id: Some(req_id),
                    message: format!("relay unreachable: {e}"),
                });
                return Err(AgentError::RelayDisconnected(e.to_string()));
            }
        };
        let _ = relay.set_nodelay(true);
        let header = SessionHeader {
            session_id,
            device_id: cfg.device_id,
            fps: cfg.fps,
            resolution: cfg.resolution,
            deterministic_clock: cfg.deterministic_clock,
            start_ts_micros,
        };
        if let Err(e) = relay.write_all(&header.encode()).await {
            self.send(FromAgent::Error {
                req_id: Some(req_id),
                message: format!("relay write failed: {e}"),
            });
            return Err(AgentError::RelayDisconnected(e.to_string()));
        }
        self.send(FromAgent::Event {
            kind: EventKind::Lifecycle,
            frame_index: 0,
            payload: json!({
                "event": "started",
                "fps": cfg.fps,
                "resolution": cfg.resolution,
                "wheelbase": cfg.wheelbase,
                "max_speed": cfg.max_speed,
                "deterministic": cfg.deterministic_clock,
            })
            .to_string(),
        });
        self.send(FromAgent::Started { req_id });

        let mut sim = Sim::new(
            Params {
                wheelbase: cfg.wheelbase,
                max_speed: cfg.max_speed,
            },
            cfg.fps,
        );
        let fps = cfg.fps as f64;
        let period = Duration::from_secs_f64(1.0 / fps);
        let mut bucket = cfg
            .send_budget_bytes_per_sec
            .map(|b| TokenBucket::new(b as f64));
        let mut script = cfg.script.iter().peekable();
        let mut pending: VecDeque<(u64, ControlCommand)> = VecDeque::new();
        let (mut captured, mut delivered, mut dropped) = (0u64, 0u64, 0u64);
        let mut buf = Vec::new();
        let t0 = Instant::now();
        let mut reason = "stopped";
        let mut failure = None;

        'ticks: for idx in 0u64.. {
            if cfg.max_frames.is_some_and(|m| idx >= m) {
                reason = "completed";
                break;
            }
            let tick_at = t0 + period.mul_f64(idx as f64);
            let sleep = tokio::time::sleep_until(tick_at);
            tokio::pin!(sleep);
            loop {
                // Drain what is already queued first, so a loop running
                // behind schedule still sees Stop.
                let ctl = match self.next_control().now_or_never() {
                    Some(ctl) => ctl,
                    None => tokio::select! {
                        biased;
                        _ = &mut sleep => break,
                        ctl = self.next_control() => ctl,
                    },
                };
                match ctl {
                    Control::Msg(ToAgent::Command { req_id, command }) => {
                        pending.push_back((req_id, command))
                    }
                    Control::Msg(ToAgent::Stop { .. }) => break 'ticks,
                    Control::Msg(ToAgent::Start { req_id, .. }) => self.send(FromAgent::Error {
                        req_id: Some(req_id),
                        message: "already capturing".into(),
                    }),
                    Control::Msg(_) => {}
                    Control::Closed => {
                        reason = "gateway_lost";
                        failure = Some(AgentError::GatewayUnreachable(
                            "control channel closed".into(),
                        ));
                        break 'ticks;
                    }
                }
            }

            // Commands received before this tick take effect on this frame.
            let mut kinds = Vec::new();
            let mut acks = Vec::new();
            for (req_id, command) in pending.drain(..) {
                let kind = command.kind.clamped();
                kinds.push(kind);
                acks.push(FromAgent::Ack {
                    req_id,
                    applied: AppliedCommand {
                        command: ControlCommand { kind, ..command },
                        applied_frame_index: idx,
                    },
                });
            }
            while let Some(entry) = script.next_if(|e| e.at_frame <= idx) {
                let kind = entry.command.clamped();
                kinds.push(kind);
                acks.push(FromAgent::Event {
                    kind: EventKind::Command,
                    frame_index: idx,
                    payload: kind.canonical_json(),
                });
            }
            let pose = *sim.tick(kinds);
            let capture_ts_micros = if cfg.deterministic_clock {
                deterministic_ts(start_ts_micros, idx, cfg.fps)
            } else {
                wall_micros()
            };
            let stamp = FrameStamp {
                session_id,
                device_id: cfg.device_id,
                capture_ts_micros,
            };
            let frame = render_frame(&pose, idx, cfg.resolution, stamp, cfg.encoding);
            buf.clear();
            frame.encode_into(&mut buf);
            captured += 1;
            self.frame_counter.store(idx, Ordering::Release);

            let send_at = match bucket.as_mut() {
                None => Some(0.0),
                Some(b) => {
                    let size = buf.len() as f64;
                    let now = t0.elapsed().as_secs_f64();
                    b.admit(now, size, 2.0 * size, (idx + 1) as f64 / fps)
                }
            };
            match send_at {
                Some(at) => {
                    tokio::time::sleep_until(t0 + Duration::from_secs_f64(at)).await;
                    if let Err(e) = relay.write_all(&buf).await {
                        self.send(FromAgent::Event {
                            kind: EventKind::Lifecycle,
                            frame_index: idx,
                            payload: json!({"event": "relay_disconnected", "error": e.to_string()})
                                .to_string(),
                        });
                        for ack in acks {
                            self.send(ack);
                        }
                        reason = "relay_disconnected";
                        failure = Some(AgentError::RelayDisconnected(e.to_string()));
                        break;
                    }
                    delivered += 1;
                }
                None => dropped += 1,
            }
            for ack in acks {
                self.send(ack);
            }
        }

        let _ = relay.shutdown().await;
        drop(relay);
        let achieved_fps = if captured == 0 {
            0.0
        } else {
            delivered as f64 / (captured as f64 / fps)
        };
        let summary = SessionSummary {
            captured_frames: captured,
            delivered_frames: delivered,
            dropped_frames: dropped,
            achieved_fps,
        };
        self.send(FromAgent::Event {
            kind: EventKind::Lifecycle,
            frame_index: captured.saturating_sub(1),
            payload: json!({
                "event": "stopped",
                "reason": reason,
                "captured": captured,
                "delivered": delivered,
                "dropped": dropped,
            })
            .to_string(),
        });
        self.send(FromAgent::Finished {
            summary,
            reason: reason.to_string(),
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(summary),
        }
    }
}

/// Connects, runs exactly one session and returns its summary.
pub async fn run_capture(config: AgentConfig) -> Result<SessionSummary, AgentError> {
    let mut agent = DeviceAgent::connect(config).await?;
    agent.run_session().await
}
