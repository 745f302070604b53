use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use remcap_stack::{GatewayConfig, Stack, StackConfig};

/// Gateway, relay and packer in one process.
#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    http: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:9090")]
    relay: SocketAddr,
    #[arg(long, default_value = "./data")]
    data: PathBuf,
    /// Agent command timeout in milliseconds.
    #[arg(long, default_value_t = 2000)]
    agent_timeout: u64,
    /// Default lease TTL in seconds.
    #[arg(long, default_value_t = 300)]
    lease_ttl: u32,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let args = Args::parse();
    let mut gateway = GatewayConfig::new(args.data);
    gateway.agent_timeout = Duration::from_millis(args.agent_timeout);
    gateway.default_lease_ttl = args.lease_ttl;
    let stack = Stack::start(StackConfig {
        gateway,
        http_addr: args.http,
        relay_addr: args.relay,
    })
    .await?;
    tracing::info!(http = %stack.http_addr, relay = %stack.relay_addr, "listening");
    stack.run_until_ctrl_c().await?;
    Ok(())
}
