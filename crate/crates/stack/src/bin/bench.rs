use std::path::PathBuf;

use clap::{Parser, Subcommand};
use remcap_core::Resolution;
use remcap_stack::bench::{self, StackTarget};

#[derive(Parser)]
struct Args {
    /// Gateway HTTP address. A private stack is started when omitted.
    #[arg(long, global = true, requires = "relay")]
    gateway: Option<String>,
    #[arg(long, global = true)]
    relay: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Achieved frame rate per resolution under a send budget.
    Fps {
        /// One preset or a comma-separated sweep.
        #[arg(long, value_delimiter = ',', default_value = "360p,720p,1080p")]
        resolution: Vec<Resolution>,
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
    },
    /// The four task latencies.
    Latency {
        #[arg(long, default_value_t = 10)]
        runs: u32,
    },
    /// CPU and memory of named processes, as CSV.
    Resources {
        #[arg(long, value_delimiter = ',', required = true)]
        procs: Vec<String>,
        /// Sampling interval in milliseconds.
        #[arg(long, default_value_t = 500)]
        interval: u64,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let mut local = None;
    let target = || async {
        match (&args.gateway, &args.relay) {
            (Some(http), Some(relay)) => Ok::<_, anyhow::Error>((
                StackTarget {
                    http: http.clone(),
                    relay: relay.clone(),
                },
                None,
            )),
            _ => {
                let (stack, dir) = bench::local_stack().await?;
                Ok((StackTarget::of(&stack), Some((stack, dir))))
            }
        }
    };
    let report = match &args.cmd {
        Cmd::Fps {
            resolution,
            budget,
            duration,
        } => {
            let (t, l) = target().await?;
            local = l;
            let mut reports = Vec::new();
            for &r in resolution {
                reports.push(bench::measure_fps(&t, r, *budget, *duration).await?);
            }
            serde_json::to_string_pretty(&reports)?
        }
        Cmd::Latency { runs } => {
            let (t, l) = target().await?;
            local = l;
            serde_json::to_string_pretty(&bench::measure_task_latencies(&t, *runs).await?)?
        }
        Cmd::Resources {
            procs,
            interval,
            duration,
        } => bench::sample_resources(procs, *interval, *duration).await?,
    };
    match &args.out {
        Some(path) => std::fs::write(path, report + "\n")?,
        None => println!("{report}"),
    }
    if let Some((stack, _dir)) = local {
        stack.shutdown();
    }
    Ok(())
}
