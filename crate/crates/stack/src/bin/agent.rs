use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use remcap_core::script::parse_script;
use remcap_core::{Encoding, Resolution};
use remcap_stack::{AgentConfig, DeviceAgent};

/// Simulated capture device.
#[derive(Parser)]
struct Args {
    #[arg(long)]
    scene: String,
    #[arg(long)]
    device: u16,
    #[arg(long, default_value_t = 30)]
    fps: u8,
    #[arg(long, default_value = "360p")]
    resolution: Resolution,
    #[arg(long, default_value = "127.0.0.1:9090")]
    relay: String,
    #[arg(long, default_value = "127.0.0.1:8080")]
    gateway: String,
    /// Send budget in bytes per second.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    /// Command script, one `<frame> <COMMAND> [value]` per line.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Run-length encode frames.
    #[arg(long)]
    rle: bool,
    /// Stop each session after this many frames.
    #[arg(long)]
    frames: Option<u64>,
    /// Exit after one session.
    #[arg(long)]
    once: bool,
    #[arg(long)]
    wheelbase: Option<f64>,
    #[arg(long)]
    max_speed: Option<f64>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let args = Args::parse();
    let mut cfg = AgentConfig::new(args.scene, args.device, args.relay, args.gateway);
    cfg.fps = args.fps;
    cfg.resolution = args.resolution;
    cfg.send_budget_bytes_per_sec = args.budget;
    cfg.deterministic_clock = args.deterministic;
    cfg.max_frames = args.frames;
    if args.rle {
        cfg.encoding = Encoding::RleRgb24;
    }
    if let Some(w) = args.wheelbase {
        cfg.wheelbase = w;
    }
    if let Some(v) = args.max_speed {
        cfg.max_speed = v;
    }
    if let Some(path) = args.script {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        cfg.script = parse_script(&text)?;
    }
    let mut agent = DeviceAgent::connect(cfg).await?;
    if args.once {
        let summary = agent.run_session().await?;
        println!("{}", serde_json::to_string(&summary)?);
    } else {
        agent.serve().await?;
    }
    Ok(())
}
