mod common;

use std::process::{Child, Command, Stdio};
use std::time::Duration;

use common::Harness;
use remcap_stack::bench::{sample_resources, BenchError, CSV_HEADER};

struct Kill(Child);

impl Drop for Kill {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Runs the agent binary under `name` so samplers can tell runs apart.
fn agent_as(h: &Harness, dir: &std::path::Path, name: &str, device: u16, resolution: &str) -> Kill {
    let exe = dir.join(name);
    std::fs::copy(env!("CARGO_BIN_EXE_agent"), &exe).unwrap();
    let child = Command::new(exe)
        .args([
            "--scene",
            "lab",
            "--device",
            &device.to_string(),
            "--resolution",
            resolution,
        ])
        .args([
            "--relay",
            &h.stack.relay_addr.to_string(),
            "--gateway",
            &h.stack.http_addr.to_string(),
        ])
        .args(["--deterministic", "--rle"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    Kill(child)
}

fn mean_cpu(csv_text: &str, name: &str) -> f64 {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let cpus: Vec<f64> = rdr
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[1] == name)
        .map(|r| r[2].parse().unwrap())
        .collect();
    cpus.iter().sum::<f64>() / cpus.len() as f64
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn higher_resolution_costs_more_cpu() {
    let h = Harness::start().await;
    let bins = tempfile::tempdir().unwrap();
    let _hi = agent_as(&h, bins.path(), "cap1080", 1, "1080p");
    let _lo = agent_as(&h, bins.path(), "cap360", 2, "360p");
    for d in [1, 2] {
        assert!(
            h.gw()
                .wait_for_agent("lab", d, Duration::from_secs(10))
                .await
        );
    }
    let ids = h.start_sessions("lab", &[1, 2], &[]).await;
    tokio::time::sleep(Duration::from_millis(500)).await;

    let names = vec!["cap1080".to_string(), "cap360".to_string()];
    let csv_text = sample_resources(&names, 250, 2.0).await.unwrap();
    assert_eq!(csv_text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(csv_text.lines().count(), 1 + 2 * 8);
    let (hi, lo) = (
        mean_cpu(&csv_text, "cap1080"),
        mean_cpu(&csv_text, "cap360"),
    );
    assert!(hi > lo, "1080p {hi:.1}% vs 360p {lo:.1}%");
    assert!(csv_text
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(3).unwrap().parse::<u64>().unwrap() > 0));

    for id in ids {
        h.gw().stop_session(id).unwrap();
        h.wait_packed(id).await;
    }
}

#[tokio::test]
async fn idle_process_row_count() {
    let sleeper = Kill(Command::new("sleep").arg("30").spawn().unwrap());
    let csv_text = sample_resources(&["sleep".to_string()], 500, 2.0)
        .await
        .unwrap();
    let rows = csv_text.lines().count() - 1;
    assert!((3..=5).contains(&rows), "{rows} rows");
    drop(sleeper);

    let err = sample_resources(&["definitely-not-running".to_string()], 500, 1.0)
        .await
        .unwrap_err();
    assert!(matches!(err, BenchError::ProcessNotFound(_)));
}

#[tokio::test]
async fn cli_reports_are_machine_readable() {
    let out = tempfile::NamedTempFile::new().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["latency", "--runs", "10", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path()).unwrap()).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 4);
    assert_eq!(report["runs"], 10);
}
