#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use remcap_core::{Encoding, SessionStatus, SessionSummary};
use remcap_stack::{
    AgentConfig, AgentError, DeviceAgent, Gateway, GatewayConfig, Stack, StackConfig,
};
use tempfile::TempDir;
use tokio::task::JoinHandle;
use uuid::Uuid;

pub const RESEARCHER: &str = "alice";

pub struct Harness {
    pub stack: Stack,
    pub dir: TempDir,
}

impl Harness {
    pub async fn start() -> Self {
        Self::with_config(|_| {}).await
    }

    pub async fn with_config(tweak: impl FnOnce(&mut GatewayConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GatewayConfig::new(dir.path());
        tweak(&mut cfg);
        let stack = Stack::start(StackConfig::local(cfg)).await.unwrap();
        Harness { stack, dir }
    }

    pub fn gw(&self) -> &Arc<Gateway> {
        &self.stack.gateway
    }

    /// Deterministic RLE agent config pointed at this stack.
    pub fn agent_config(&self, scene: &str, device: u16) -> AgentConfig {
        let mut cfg = AgentConfig::new(
            scene,
            device,
            self.stack.relay_addr.to_string(),
            self.stack.http_addr.to_string(),
        );
        cfg.deterministic_clock = true;
        cfg.encoding = Encoding::RleRgb24;
        cfg
    }

    /// Connects an agent and runs one session in the background.
    pub async fn spawn_agent(
        &self,
        cfg: AgentConfig,
    ) -> JoinHandle<Result<SessionSummary, AgentError>> {
        let mut agent = DeviceAgent::connect(cfg).await.expect("agent connects");
        tokio::spawn(async move { agent.run_session().await })
    }

    /// Lease plus one session per device; returns ids in device order.
    pub async fn start_sessions(
        &self,
        scene: &str,
        devices: &[u16],
        processors: &[&str],
    ) -> Vec<Uuid> {
        self.gw().acquire_lease(RESEARCHER, scene, None).unwrap();
        let procs: Vec<String> = processors.iter().map(|s| s.to_string()).collect();
        self.gw()
            .start_parallel_capture(RESEARCHER, scene, devices, &procs)
            .await
            .unwrap()
            .into_iter()
            .map(|s| s.session_id)
            .collect()
    }

    pub async fn wait_packed(&self, id: Uuid) {
        self.gw()
            .wait_for_status(id, SessionStatus::Packed, Duration::from_secs(60))
            .await
            .expect("session packs");
    }
}
