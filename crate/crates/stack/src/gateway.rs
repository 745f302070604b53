//! Control plane: scenes, leases, sessions and the agent control channel.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use remcap_core::container::ContainerLayout;
use remcap_core::session::{fps_valid, DeviceSpec};
use remcap_core::{
    AppliedCommand, CommandKind, ControlCommand, EventKind, EventRecord, IngestStats, SceneConfig,
    SceneLease, SessionState, SessionStatus, SessionSummary,
};
use serde_json::json;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::clock::{Clock, SystemClock};
use crate::eventlog::{EventError, EventStore};
use crate::inference::{self, builtin_processor, InferenceError, ProcessorReport};
use crate::lease::{LeaseError, LeaseRegistry, DEFAULT_LEASE_TTL_SECONDS};
use crate::protocol::{FromAgent, Hello, ToAgent};
use crate::pubsub::{PubSub, PACKING_CHANNEL};
use crate::relay::{IngestPhase, Relay, RelayError, StreamSpec};

pub const DEFAULT_AGENT_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub data_dir: PathBuf,
    pub agent_timeout: Duration,
    /// How long a stopping session waits for its agent and stream to end.
    pub finalize_timeout: Duration,
    pub default_lease_ttl: u32,
    pub scenes: Vec<SceneConfig>,
}

impl GatewayConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            data_dir: data_dir.into(),
            agent_timeout: DEFAULT_AGENT_TIMEOUT,
            finalize_timeout: Duration::from_secs(10),
            default_lease_ttl: DEFAULT_LEASE_TTL_SECONDS,
            scenes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown scene {0}")]
    UnknownScene(String),
    #[error("device {device_id} is not part of scene {scene_id}")]
    UnknownDevice { scene_id: String, device_id: u16 },
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("scene {scene_id} is leased by {holder} until {expires_at_micros}")]
    SceneBusy {
        scene_id: String,
        holder: String,
        expires_at_micros: u64,
    },
    #[error("{researcher} holds no valid lease on scene {scene_id}")]
    LeaseInvalid {
        researcher: String,
        scene_id: String,
    },
    #[error("device {device_id} of scene {scene_id} is already capturing")]
    DeviceBusy { scene_id: String, device_id: u16 },
    #[error("no agent connected for device {device_id} of scene {scene_id}")]
    AgentUnavailable { scene_id: String, device_id: u16 },
    #[error("session {session_id} is {status:?}, not LIVE")]
    SessionNotLive {
        session_id: Uuid,
        status: SessionStatus,
    },
    #[error("session {session_id} is not packed yet")]
    NotPacked { session_id: Uuid },
    #[error("agent did not answer within {0:?}")]
    AgentTimeout(Duration),
    #[error("agent error: {0}")]
    AgentError(String),
    #[error("payload is not valid JSON: {0}")]
    MalformedPayload(String),
    #[error("unknown processor `{0}`")]
    UnknownProcessor(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl GatewayError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::UnknownScene(_) => "UnknownScene",
            GatewayError::UnknownDevice { .. } => "UnknownDevice",
            GatewayError::UnknownSession(_) => "UnknownSession",
            GatewayError::SceneBusy { .. } => "SceneBusy",
            GatewayError::LeaseInvalid { .. } => "LeaseInvalid",
            GatewayError::DeviceBusy { .. } => "DeviceBusy",
            GatewayError::AgentUnavailable { .. } => "AgentUnavailable",
            GatewayError::SessionNotLive { .. } => "SessionNotLive",
            GatewayError::NotPacked { .. } => "NotPacked",
            GatewayError::AgentTimeout(_) => "AgentTimeout",
            GatewayError::AgentError(_) => "AgentError",
            GatewayError::MalformedPayload(_) => "MalformedPayload",
            GatewayError::UnknownProcessor(_) => "UnknownProcessor",
            GatewayError::BadRequest(_) => "BadRequest",
            GatewayError::Internal(_) => "Internal",
        }
    }
}

impl From<LeaseError> for GatewayError {
    fn from(e: LeaseError) -> Self {
        match e {
            LeaseError::SceneBusy {
                scene_id,
                holder,
                expires_at_micros,
            } => GatewayError::SceneBusy {
                scene_id,
                holder,
                expires_at_micros,
            },
            LeaseError::LeaseInvalid {
                researcher,
                scene_id,
            } => GatewayError::LeaseInvalid {
                researcher,
                scene_id,
            },
        }
    }
}

impl From<EventError> for GatewayError {
    fn from(e: EventError) -> Self {
        match e {
            EventError::UnknownSession(id) => GatewayError::UnknownSession(id),
            EventError::MalformedPayload(m) => GatewayError::MalformedPayload(m),
            EventError::Io(e) => GatewayError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug)]
enum AgentReply {
    Started,
    Applied(AppliedCommand),
}

/// The gateway's end of one agent's control connection.
pub struct AgentLink {
    pub hello: Hello,
    conn_id: u64,
    tx: mpsc::UnboundedSender<ToAgent>,
    next_req: AtomicU64,
    pending: Mutex<HashMap<u64, oneshot::Sender<Result<AgentReply, String>>>>,
    session: Mutex<Option<Uuid>>,
}

impl AgentLink {
    fn send(&self, msg: ToAgent) -> bool {
        self.tx.send(msg).is_ok()
    }

    fn request(
        &self,
        make: impl FnOnce(u64) -> ToAgent,
    ) -> Option<(u64, oneshot::Receiver<Result<AgentReply, String>>)> {
        let req = self.next_req.fetch_add(1, Ordering::SeqCst) + 1;
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().insert(req, tx);
        if self.send(make(req)) {
            Some((req, rx))
        } else {
            self.pending.lock().unwrap().remove(&req);
            None
        }
    }

    fn resolve(&self, req: u64, reply: Result<AgentReply, String>) {
        if let Some(tx) = self.pending.lock().unwrap().remove(&req) {
            let _ = tx.send(reply);
        }
    }

    fn session(&self) -> Option<Uuid> {
        *self.session.lock().unwrap()
    }
}

pub(crate) struct SessionEntry {
    pub(crate) state: Mutex<SessionState>,
    status_tx: watch::Sender<SessionStatus>,
    pub(crate) hello: Hello,
    pub(crate) start_ts_micros: u64,
    agent: Arc<AgentLink>,
    last_client_seq: Mutex<u64>,
    pub(crate) summary: Mutex<Option<SessionSummary>>,
    agent_done: watch::Sender<bool>,
    pub(crate) incomplete: Mutex<Option<String>>,
    finalizing: AtomicBool,
    processors: Mutex<Vec<(String, JoinHandle<ProcessorReport>)>>,
    pub(crate) pack_lock: tokio::sync::Mutex<()>,
}

impl SessionEntry {
    pub(crate) fn id(&self) -> Uuid {
        self.state.lock().unwrap().session_id
    }

    pub(crate) fn status(&self) -> SessionStatus {
        self.state.lock().unwrap().status
    }

    pub(crate) fn snapshot(&self) -> SessionState {
        self.state.lock().unwrap().clone()
    }

    fn advance(&self, to: SessionStatus) -> bool {
        let mut st = self.state.lock().unwrap();
        if st.status < to && st.advance(to).is_ok() {
            self.status_tx.send_replace(to);
            true
        } else {
            false
        }
    }

    pub(crate) fn mark_packed(&self, manifest: remcap_core::SessionManifest) -> bool {
        let ok = self.state.lock().unwrap().mark_packed(manifest).is_ok();
        if ok {
            self.status_tx.send_replace(SessionStatus::Packed);
        }
        ok
    }

    fn flag_incomplete(&self, reason: impl Into<String>) {
        self.incomplete
            .lock()
            .unwrap()
            .get_or_insert_with(|| reason.into());
    }

    fn agent_finished(&self) -> bool {
        *self.agent_done.borrow()
    }
}

pub struct Gateway {
    pub config: GatewayConfig,
    pub clock: Arc<dyn Clock>,
    pub pubsub: Arc<PubSub>,
    pub events: Arc<EventStore>,
    pub relay: Arc<Relay>,
    pub leases: LeaseRegistry,
    scenes: RwLock<BTreeMap<String, SceneConfig>>,
    sessions: RwLock<HashMap<Uuid, Arc<SessionEntry>>>,
    agents: Mutex<HashMap<(String, u16), Arc<AgentLink>>>,
    conn_seq: AtomicU64,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> std::io::Result<Arc<Self>> {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: GatewayConfig, clock: Arc<dyn Clock>) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&config.data_dir)?;
        let pubsub = Arc::new(PubSub::default());
        let events = Arc::new(EventStore::open(
            config.data_dir.join("events"),
            pubsub.clone(),
            clock.clone(),
        )?);
        let relay = Arc::new(Relay::new(
            config.data_dir.join("sessions"),
            Some(events.clone()),
        ));
        let scenes = config
            .scenes
            .iter()
            .map(|s| (s.scene_id.clone(), s.clone()))
            .collect();
        Ok(Arc::new(Gateway {
            leases: LeaseRegistry::new(clock.clone()),
            config,
            clock,
            pubsub,
            events,
            relay,
            scenes: RwLock::new(scenes),
            sessions: RwLock::new(HashMap::new()),
            agents: Mutex::new(HashMap::new()),
            conn_seq: AtomicU64::new(0),
        }))
    }

    pub fn container_layout(&self, session_id: Uuid) -> ContainerLayout {
        ContainerLayout::for_session(self.relay.data_dir(), session_id)
    }

    // ---- scenes and leases

    pub fn scenes(&self) -> Vec<SceneConfig> {
        self.scenes.read().unwrap().values().cloned().collect()
    }

    pub fn scene(&self, scene_id: &str) -> Result<SceneConfig, GatewayError> {
        self.scenes
            .read()
            .unwrap()
            .get(scene_id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownScene(scene_id.to_string()))
    }

    /// Adds a device to a scene, creating the scene if needed. Registering
    /// an existing device updates its capabilities.
    pub fn register_device(&self, scene_id: &str, device: DeviceSpec) -> SceneConfig {
        let mut scenes = self.scenes.write().unwrap();
        let scene = scenes
            .entry(scene_id.to_string())
            .or_insert_with(|| SceneConfig {
                scene_id: scene_id.to_string(),
                devices: Vec::new(),
                description: String::new(),
            });
        match scene
            .devices
            .iter_mut()
            .find(|d| d.device_id == device.device_id)
        {
            Some(d) => d.capabilities = device.capabilities,
            None => scene.devices.push(device),
        }
        scene.clone()
    }

    pub fn acquire_lease(
        &self,
        researcher: &str,
        scene_id: &str,
        ttl: Option<u32>,
    ) -> Result<SceneLease, GatewayError> {
        if researcher.is_empty() {
            return Err(GatewayError::BadRequest(
                "researcher id must not be empty".into(),
            ));
        }
        self.scene(scene_id)?;
        Ok(self.leases.acquire(
            researcher,
            scene_id,
            ttl.unwrap_or(self.config.default_lease_ttl),
        )?)
    }

    pub fn release_lease(&self, researcher: &str, scene_id: &str) -> Result<(), GatewayError> {
        self.scene(scene_id)?;
        Ok(self.leases.release(researcher, scene_id)?)
    }

    // ---- agents

    /// Registers a freshly connected agent. Messages for it arrive on the
    /// returned receiver.
    pub fn connect_agent(
        &self,
        hello: Hello,
    ) -> Result<(Arc<AgentLink>, mpsc::UnboundedReceiver<ToAgent>), GatewayError> {
        if !fps_valid(hello.fps) {
            return Err(GatewayError::BadRequest(format!(
                "fps {} outside 1..=120",
                hello.fps
            )));
        }
        if !(hello.wheelbase > 0.0) {
            return Err(GatewayError::BadRequest(
                "wheelbase must be positive".into(),
            ));
        }
        let key = (hello.scene_id.clone(), hello.device_id);
        let mut agents = self.agents.lock().unwrap();
        if let Some(old) = agents.get(&key) {
            if self.link_busy(old) {
                return Err(GatewayError::DeviceBusy {
                    scene_id: key.0,
                    device_id: key.1,
                });
            }
        }
        self.register_device(
            &hello.scene_id,
            DeviceSpec {
                device_id: hello.device_id,
                capabilities: hello.capabilities.clone(),
            },
        );
        let (tx, rx) = mpsc::unbounded_channel();
        let link = Arc::new(AgentLink {
            hello,
            conn_id: self.conn_seq.fetch_add(1, Ordering::SeqCst),
            tx,
            next_req: AtomicU64::new(0),
            pending: Mutex::new(HashMap::new()),
            session: Mutex::new(None),
        });
        link.send(ToAgent::Welcome);
        agents.insert(key, link.clone());
        Ok((link, rx))
    }

    /// True while the agent's current session still expects frames from it.
    fn link_busy(&self, link: &AgentLink) -> bool {
        link.session()
            .and_then(|id| self.entry(id).ok())
            .is_some_and(|e| !e.agent_finished())
    }

    pub fn agent_connected(&self, scene_id: &str, device_id: u16) -> bool {
        self.agents
            .lock()
            .unwrap()
            .contains_key(&(scene_id.to_string(), device_id))
    }

    /// Polls until the agent for a device has connected.
    pub async fn wait_for_agent(&self, scene_id: &str, device_id: u16, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.agent_connected(scene_id, device_id) {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        self.agent_connected(scene_id, device_id)
    }

    /// Handles one message from an agent.
    pub fn agent_message(self: &Arc<Self>, link: &Arc<AgentLink>, msg: FromAgent) {
        match msg {
            FromAgent::Hello(_) => {}
            FromAgent::Started { req_id } => link.resolve(req_id, Ok(AgentReply::Started)),
            FromAgent::Ack { req_id, applied } => {
                // Logged here, on the connection's own ordered stream, so
                // COMMAND events keep the agent's frame order.
                if let Some(id) = link.session() {
                    let payload = applied.command.kind.canonical_json();
                    if let Err(e) = self.events.append(
                        id,
                        EventKind::Command,
                        applied.applied_frame_index,
                        &payload,
                    ) {
                        tracing::warn!("dropping ack for {id}: {e}");
                        link.resolve(req_id, Err(e.to_string()));
                        return;
                    }
                }
                link.resolve(req_id, Ok(AgentReply::Applied(applied)));
            }
            FromAgent::Event {
                kind,
                frame_index,
                payload,
            } => {
                if let Some(id) = link.session() {
                    if let Err(e) = self.events.append(id, kind, frame_index, &payload) {
                        tracing::warn!("agent event for {id} rejected: {e}");
                    }
                }
            }
            FromAgent::Finished { summary, reason } => {
                if let Some(entry) = link.session().and_then(|id| self.entry(id).ok()) {
                    *entry.summary.lock().unwrap() = Some(summary);
                    if reason != "stopped" && reason != "completed" {
                        entry.flag_incomplete(reason);
                    }
                    entry.agent_done.send_replace(true);
                    self.begin_stop(&entry);
                }
            }
            FromAgent::Error { req_id, message } => match req_id {
                Some(req) => link.resolve(req, Err(message)),
                None => tracing::warn!(device = link.hello.device_id, "agent error: {message}"),
            },
        }
    }

    /// Cleans up after an agent's control connection closes.
    pub fn agent_disconnected(self: &Arc<Self>, link: &Arc<AgentLink>) {
        {
            let mut agents = self.agents.lock().unwrap();
            let key = (link.hello.scene_id.clone(), link.hello.device_id);
            if agents.get(&key).is_some_and(|l| l.conn_id == link.conn_id) {
                agents.remove(&key);
            }
        }
        let pending: Vec<_> = link.pending.lock().unwrap().drain().collect();
        for (_, tx) in pending {
            let _ = tx.send(Err("agent disconnected".into()));
        }
        if let Some(entry) = link.session().and_then(|id| self.entry(id).ok()) {
            if !entry.agent_finished() {
                entry.flag_incomplete("agent disconnected");
                entry.agent_done.send_replace(true);
                self.begin_stop(&entry);
            }
        }
    }

    // ---- sessions

    pub(crate) fn entry(&self, session_id: Uuid) -> Result<Arc<SessionEntry>, GatewayError> {
        self.sessions
            .read()
            .unwrap()
            .get(&session_id)
            .cloned()
            .ok_or(GatewayError::UnknownSession(session_id))
    }

    pub fn session_state(&self, session_id: Uuid) -> Result<SessionState, GatewayError> {
        Ok(self.entry(session_id)?.snapshot())
    }

    pub fn sessions(&self) -> Vec<SessionState> {
        let mut all: Vec<_> = self
            .sessions
            .read()
            .unwrap()
            .values()
            .map(|e| e.snapshot())
            .collect();
        all.sort_by(|a, b| (&a.scene_id, a.device_id).cmp(&(&b.scene_id, b.device_id)));
        all
    }

    /// Settings the session's agent announced (fps, resolution, car model).
    pub fn session_config(&self, session_id: Uuid) -> Result<Hello, GatewayError> {
        Ok(self.entry(session_id)?.hello.clone())
    }

    pub fn summary(&self, session_id: Uuid) -> Result<Option<SessionSummary>, GatewayError> {
        Ok(*self.entry(session_id)?.summary.lock().unwrap())
    }

    /// Waits until the session reaches `status` (or beyond).
    pub async fn wait_for_status(
        &self,
        session_id: Uuid,
        status: SessionStatus,
        timeout: Duration,
    ) -> Result<SessionState, GatewayError> {
        let entry = self.entry(session_id)?;
        let mut rx = entry.status_tx.subscribe();
        let reached = tokio::time::timeout(timeout, rx.wait_for(|s| *s >= status))
            .await
            .map(|r| r.is_ok());
        match reached {
            Ok(true) => Ok(entry.snapshot()),
            _ => Err(GatewayError::Internal(format!(
                "session {session_id} did not reach {status:?} within {timeout:?}"
            ))),
        }
    }

    /// Starts one session per listed device, each with the named processors
    /// attached. The caller must hold the scene's lease.
    pub async fn start_parallel_capture(
        self: &Arc<Self>,
        researcher: &str,
        scene_id: &str,
        device_ids: &[u16],
        processors: &[String],
    ) -> Result<Vec<SessionState>, GatewayError> {
        self.leases.check(researcher, scene_id)?;
        let scene = self.scene(scene_id)?;
        if device_ids.is_empty() {
            return Err(GatewayError::BadRequest("no devices requested".into()));
        }
        let mut seen = device_ids.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != device_ids.len() {
            return Err(GatewayError::BadRequest("duplicate device id".into()));
        }
        for name in processors {
            if builtin_processor(name).is_none() {
                return Err(GatewayError::UnknownProcessor(name.clone()));
            }
        }
        for &d in device_ids {
            if !scene.has_device(d) {
                return Err(GatewayError::UnknownDevice {
                    scene_id: scene_id.to_string(),
                    device_id: d,
                });
            }
        }

        // Claim every agent and create the sessions under the agents lock, so
        // two concurrent starts cannot both take a device.
        let entries = {
            let agents = self.agents.lock().unwrap();
            let mut links = Vec::new();
            for &d in device_ids {
                let link = agents
                    .get(&(scene_id.to_string(), d))
                    .cloned()
                    .ok_or_else(|| GatewayError::AgentUnavailable {
                        scene_id: scene_id.to_string(),
                        device_id: d,
                    })?;
                if self.link_busy(&link) {
                    return Err(GatewayError::DeviceBusy {
                        scene_id: scene_id.to_string(),
                        device_id: d,
                    });
                }
                links.push(link);
            }
            let mut entries = Vec::new();
            for link in links {
                let id = Uuid::new_v4();
                self.events.create_session(id)?;
                let entry = Arc::new(SessionEntry {
                    state: Mutex::new(SessionState::new(id, scene_id, link.hello.device_id)),
                    status_tx: watch::channel(SessionStatus::Starting).0,
                    hello: link.hello.clone(),
                    start_ts_micros: self.clock.now_micros(),
                    agent: link.clone(),
                    last_client_seq: Mutex::new(0),
                    summary: Mutex::new(None),
                    agent_done: watch::channel(false).0,
                    incomplete: Mutex::new(None),
                    finalizing: AtomicBool::new(false),
                    processors: Mutex::new(Vec::new()),
                    pack_lock: tokio::sync::Mutex::new(()),
                });
                self.relay.register(
                    id,
                    StreamSpec {
                        device_id: link.hello.device_id,
                        fps: link.hello.fps,
                        resolution: link.hello.resolution,
                    },
                );
                self.sessions.write().unwrap().insert(id, entry.clone());
                *link.session.lock().unwrap() = Some(id);
                entries.push(entry);
            }
            entries
        };
        for entry in &entries {
            for name in processors {
                self.attach_named(entry, name)?;
            }
        }

        let starts: Vec<_> = entries
            .iter()
            .map(|entry| {
                let id = entry.id();
                let start_ts_micros = entry.start_ts_micros;
                entry.agent.request(|req_id| ToAgent::Start {
                    req_id,
                    session_id: id,
                    start_ts_micros,
                })
            })
            .collect();
        let timeout = self.config.agent_timeout;
        let waits = starts.into_iter().map(|s| async move {
            match s {
                None => Err(GatewayError::AgentError("agent disconnected".into())),
                Some((_, rx)) => match tokio::time::timeout(timeout, rx).await {
                    Ok(Ok(Ok(_))) => Ok(()),
                    Ok(Ok(Err(msg))) => Err(GatewayError::AgentError(msg)),
                    Ok(Err(_)) => Err(GatewayError::AgentError("agent disconnected".into())),
                    Err(_) => Err(GatewayError::AgentTimeout(timeout)),
                },
            }
        });
        let results = futures::future::join_all(waits).await;

        let mut first_error = None;
        for (entry, result) in entries.iter().zip(&results) {
            match result {
                Ok(()) => {
                    entry.advance(SessionStatus::Live);
                }
                Err(e) => {
                    entry.flag_incomplete(format!("start failed: {e}"));
                    first_error.get_or_insert_with(|| e.clone());
                }
            }
        }
        if let Some(e) = first_error {
            for entry in &entries {
                entry.agent.send(ToAgent::Stop { req_id: 0 });
                self.begin_stop(entry);
            }
            return Err(e);
        }
        Ok(entries.iter().map(|e| e.snapshot()).collect())
    }

    fn attach_named(&self, entry: &Arc<SessionEntry>, name: &str) -> Result<(), GatewayError> {
        let processor = builtin_processor(name)
            .ok_or_else(|| GatewayError::UnknownProcessor(name.to_string()))?;
        let mut procs = entry.processors.lock().unwrap();
        let feeds_view = procs.is_empty();
        let handle = inference::attach_processor(
            &self.relay,
            self.events.clone(),
            entry.id(),
            processor,
            feeds_view,
        )
        .map_err(|e| match e {
            InferenceError::SessionNotLive(id) => GatewayError::SessionNotLive {
                session_id: id,
                status: entry.status(),
            },
            InferenceError::UnknownProcessor(n) => GatewayError::UnknownProcessor(n),
        })?;
        procs.push((name.to_string(), handle));
        Ok(())
    }

    /// Attaches a built-in processor to a live session.
    pub fn attach_processor(&self, session_id: Uuid, name: &str) -> Result<(), GatewayError> {
        let entry = self.entry(session_id)?;
        let status = entry.status();
        if status != SessionStatus::Live {
            return Err(GatewayError::SessionNotLive { session_id, status });
        }
        self.attach_named(&entry, name)
    }

    pub fn processors(&self, session_id: Uuid) -> Result<Vec<String>, GatewayError> {
        Ok(self
            .entry(session_id)?
            .processors
            .lock()
            .unwrap()
            .iter()
            .map(|(n, _)| n.clone())
            .collect())
    }

    /// Forwards a command to the session's agent and waits for the frame it
    /// took effect at. Returns the ack and the measured round trip.
    pub async fn submit_command(
        &self,
        researcher: &str,
        session_id: Uuid,
        kind: CommandKind,
        client_seq: Option<u64>,
    ) -> Result<(AppliedCommand, Duration), GatewayError> {
        let entry = self.entry(session_id)?;
        let status = entry.status();
        if status != SessionStatus::Live {
            return Err(GatewayError::SessionNotLive { session_id, status });
        }
        let scene_id = entry.snapshot().scene_id;
        self.leases.check(researcher, &scene_id)?;
        let client_seq = {
            let mut last = entry.last_client_seq.lock().unwrap();
            let seq = client_seq.unwrap_or(*last + 1);
            if seq <= *last {
                return Err(GatewayError::BadRequest(format!(
                    "client_seq {seq} does not increase past {last}",
                    last = *last
                )));
            }
            *last = seq;
            seq
        };
        let command = ControlCommand {
            client_seq,
            kind,
            issued_ts_micros: self.clock.now_micros(),
        };
        let t0 = Instant::now();
        let (req, rx) = entry
            .agent
            .request(|req_id| ToAgent::Command { req_id, command })
            .ok_or_else(|| GatewayError::AgentError("agent disconnected".into()))?;
        match tokio::time::timeout(self.config.agent_timeout, rx).await {
            Ok(Ok(Ok(AgentReply::Applied(applied)))) => Ok((applied, t0.elapsed())),
            Ok(Ok(Ok(AgentReply::Started))) => {
                Err(GatewayError::Internal("unexpected reply".into()))
            }
            Ok(Ok(Err(msg))) => {
                let status = entry.status();
                if status != SessionStatus::Live {
                    Err(GatewayError::SessionNotLive { session_id, status })
                } else {
                    Err(GatewayError::AgentError(msg))
                }
            }
            Ok(Err(_)) => Err(GatewayError::AgentError("agent disconnected".into())),
            Err(_) => {
                entry.agent.pending.lock().unwrap().remove(&req);
                Err(GatewayError::AgentTimeout(self.config.agent_timeout))
            }
        }
    }

    pub fn append_event(
        &self,
        session_id: Uuid,
        kind: EventKind,
        frame_index: u64,
        payload_json: &str,
    ) -> Result<EventRecord, GatewayError> {
        self.entry(session_id)?;
        Ok(self
            .events
            .append(session_id, kind, frame_index, payload_json)?)
    }

    pub fn add_marker(
        &self,
        session_id: Uuid,
        frame_index: u64,
        text: &str,
    ) -> Result<EventRecord, GatewayError> {
        self.append_event(
            session_id,
            EventKind::Marker,
            frame_index,
            &json!({ "text": text }).to_string(),
        )
    }

    pub fn read_events(
        &self,
        session_id: Uuid,
        from_seq: u64,
    ) -> Result<Vec<EventRecord>, GatewayError> {
        self.entry(session_id)?;
        Ok(self.events.read(session_id, from_seq)?)
    }

    pub fn stats(&self, session_id: Uuid) -> Result<IngestStats, GatewayError> {
        self.relay.stats(session_id).map_err(|e| match e {
            RelayError::UnknownSession(id) => GatewayError::UnknownSession(id),
            other => GatewayError::Internal(other.to_string()),
        })
    }

    /// Asks the agent to stop; packing follows once its stream has ended.
    pub fn stop_session(self: &Arc<Self>, session_id: Uuid) -> Result<SessionState, GatewayError> {
        let entry = self.entry(session_id)?;
        let status = entry.status();
        if status >= SessionStatus::Stopping {
            return Err(GatewayError::SessionNotLive { session_id, status });
        }
        if !entry.agent_finished() {
            entry.agent.send(ToAgent::Stop { req_id: 0 });
        }
        self.begin_stop(&entry);
        Ok(entry.snapshot())
    }

    fn begin_stop(self: &Arc<Self>, entry: &Arc<SessionEntry>) {
        entry.advance(SessionStatus::Stopping);
        if entry.finalizing.swap(true, Ordering::SeqCst) {
            return;
        }
        let gw = self.clone();
        let entry = entry.clone();
        tokio::spawn(async move { gw.finalize(entry).await });
    }

    /// Waits for the agent, the ingest stream and processors to wind down,
    /// then hands the session to the packer.
    async fn finalize(self: Arc<Self>, entry: Arc<SessionEntry>) {
        let id = entry.id();
        let timeout = self.config.finalize_timeout;
        let mut done = entry.agent_done.subscribe();
        if tokio::time::timeout(timeout, done.wait_for(|d| *d))
            .await
            .is_err()
        {
            entry.flag_incomplete("agent did not finish");
        }
        let streamed = self
            .relay
            .session(id)
            .map(|s| s.phase() != IngestPhase::Waiting)
            .unwrap_or(false);
        let wait = if streamed || entry.incomplete.lock().unwrap().is_none() {
            timeout
        } else {
            Duration::from_millis(500)
        };
        if !self.relay.wait_finished(id, wait).await {
            self.relay.abandon(id);
            if !self.relay.wait_finished(id, Duration::ZERO).await {
                entry.flag_incomplete("ingest stream did not close");
            }
        }
        let procs: Vec<_> = entry.processors.lock().unwrap().drain(..).collect();
        for (name, handle) in procs {
            match tokio::time::timeout(timeout, handle).await {
                Ok(Ok(report)) => {
                    tracing::debug!(session = %id, processor = name, ?report, "processor finished")
                }
                _ => tracing::warn!(session = %id, processor = name, "processor did not finish"),
            }
        }
        self.pubsub
            .publish(PACKING_CHANNEL, json!({ "session_id": id.to_string() }));
    }
}
