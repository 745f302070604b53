mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{Harness, RESEARCHER};
use futures::{SinkExt, StreamExt};
use remcap_core::event::EventKind;
use remcap_core::session::DeviceSpec;
use remcap_core::{verify_container, SessionStatus};
use remcap_stack::GatewayError;
use serde_json::json;
use tokio_tungstenite::tungstenite::Message;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn agent_crash_still_packs_as_incomplete() {
    let h = Harness::start().await;
    let agent = h.spawn_agent(h.agent_config("lab", 1)).await;
    let id = h.start_sessions("lab", &[1], &[]).await[0];
    tokio::time::sleep(Duration::from_millis(400)).await;
    agent.abort();

    h.wait_packed(id).await;
    let events = h.gw().read_events(id, 1).unwrap();
    let lifecycle: Vec<&str> = events
        .iter()
        .filter(|e| e.kind == EventKind::Lifecycle)
        .map(|e| e.payload.as_str())
        .collect();
    assert!(
        lifecycle
            .iter()
            .any(|p| p.contains(r#""event":"incomplete""#)),
        "{lifecycle:?}"
    );
    assert!(
        lifecycle.last().unwrap().contains(r#""event":"packed""#),
        "{lifecycle:?}"
    );
    assert!(verify_container(h.gw().container_layout(id).root())
        .unwrap()
        .passed());
    assert!(!h.gw().agent_connected("lab", 1));
}

#[tokio::test]
async fn start_needs_a_connected_agent() {
    let h = Harness::start().await;
    h.gw().register_device(
        "lab",
        DeviceSpec {
            device_id: 4,
            capabilities: String::new(),
        },
    );
    h.gw().acquire_lease(RESEARCHER, "lab", None).unwrap();
    let err = h
        .gw()
        .start_parallel_capture(RESEARCHER, "lab", &[4], &[])
        .await
        .unwrap_err();
    assert!(
        matches!(err, GatewayError::AgentUnavailable { .. }),
        "{err:?}"
    );
    let err = h
        .gw()
        .start_parallel_capture(RESEARCHER, "lab", &[9], &[])
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::UnknownDevice { .. }), "{err:?}");
    let err = h
        .gw()
        .start_parallel_capture("bob", "lab", &[4], &[])
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::LeaseInvalid { .. }), "{err:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn silent_agent_times_out() {
    let h = Harness::with_config(|c| c.agent_timeout = Duration::from_millis(300)).await;
    let (mut ws, _) =
        tokio_tungstenite::connect_async(format!("ws://{}/agents/ws", h.stack.http_addr))
            .await
            .unwrap();
    let hello = json!({"type": "hello", "payload": {
        "scene_id": "lab", "device_id": 2, "fps": 30, "resolution": "360p",
        "deterministic_clock": true, "wheelbase": 0.25, "max_speed": 0.5,
    }});
    ws.send(Message::Text(hello.to_string().into()))
        .await
        .unwrap();
    let welcome = ws.next().await.unwrap().unwrap();
    assert!(
        welcome.to_text().unwrap().contains("welcome"),
        "{welcome:?}"
    );

    h.gw().acquire_lease(RESEARCHER, "lab", None).unwrap();
    let err = h
        .gw()
        .start_parallel_capture(RESEARCHER, "lab", &[2], &[])
        .await
        .unwrap_err();
    assert_eq!(err, GatewayError::AgentTimeout(Duration::from_millis(300)));
    for s in h.gw().sessions() {
        assert!(s.status >= SessionStatus::Stopping, "{s:?}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn concurrent_lease_requests_have_one_winner() {
    let h = Harness::start().await;
    h.gw().register_device(
        "lab",
        DeviceSpec {
            device_id: 1,
            capabilities: String::new(),
        },
    );
    let url = format!("http://{}/leases", h.stack.http_addr);
    let barrier = Arc::new(tokio::sync::Barrier::new(16));
    let tasks: Vec<_> = (0..16)
        .map(|i| {
            let url = url.clone();
            let barrier = barrier.clone();
            tokio::spawn(async move {
                let client = reqwest::Client::new();
                barrier.wait().await;
                client
                    .post(url)
                    .json(&json!({"researcher": format!("r{i}"), "scene_id": "lab"}))
                    .send()
                    .await
                    .unwrap()
                    .status()
                    .as_u16()
            })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    codes.sort_unstable();
    assert_eq!(codes.iter().filter(|&&c| c == 201).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|&&c| c == 409).count(), 15, "{codes:?}");
}
