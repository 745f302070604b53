//! Runs gateway, relay and packer together in one process.

use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::gateway::{Gateway, GatewayConfig};
use crate::http::router;
use crate::packer::spawn_packer;

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub gateway: GatewayConfig,
    pub http_addr: SocketAddr,
    pub relay_addr: SocketAddr,
}

impl StackConfig {
    /// Both listeners on ephemeral localhost ports.
    pub fn local(gateway: GatewayConfig) -> Self {
        StackConfig {
            gateway,
            http_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            relay_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
        }
    }
}

pub struct Stack {
    pub gateway: Arc<Gateway>,
    pub http_addr: SocketAddr,
    pub relay_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl Stack {
    pub async fn start(config: StackConfig) -> std::io::Result<Stack> {
        let gateway = Gateway::new(config.gateway)?;
        let http = TcpListener::bind(config.http_addr).await?;
        let relay = TcpListener::bind(config.relay_addr).await?;
        let http_addr = http.local_addr()?;
        let relay_addr = relay.local_addr()?;
        let packer = spawn_packer(gateway.clone());
        let relay_task = tokio::spawn(gateway.relay.clone().serve(relay));
        let app = router(gateway.clone());
        let http_task = tokio::spawn(async move {
            if let Err(e) = axum::serve(http, app).await {
                tracing::error!("http server stopped: {e}");
            }
        });
        tracing::info!(%http_addr, %relay_addr, "stack listening");
        Ok(Stack {
            gateway,
            http_addr,
            relay_addr,
            tasks: vec![packer, relay_task, http_task],
        })
    }

    /// Runs until the process is interrupted.
    pub async fn run_until_ctrl_c(self) -> std::io::Result<()> {
        tokio::signal::ctrl_c().await?;
        self.shutdown();
        Ok(())
    }

    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }
}
