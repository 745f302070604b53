mod common;

use std::sync::Arc;
use std::time::Duration;

use common::Harness;
use remcap_core::event::EventKind;
use remcap_core::{verify_container, Detection, FrameRecord};
use remcap_stack::inference::{attach_processor, FrameProcessor, ProcessorError};
use remcap_stack::GatewayError;

struct Failing;

impl FrameProcessor for Failing {
    fn name(&self) -> &str {
        "failing"
    }

    fn process(
        &self,
        frame: &FrameRecord,
    ) -> Result<(FrameRecord, Vec<Detection>), ProcessorError> {
        if frame.frame_index % 10 == 3 {
            return Err(ProcessorError("model exploded".into()));
        }
        Ok((frame.clone(), Vec::new()))
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn slow_viewer_does_not_stall_ingest() {
    let h = Harness::start().await;
    let mut cfg = h.agent_config("lab", 1);
    cfg.fps = 120;
    cfg.max_frames = Some(240);
    let agent = h.spawn_agent(cfg).await;
    let id = h.start_sessions("lab", &[1], &[]).await[0];
    let mut viewer = h.gw().relay.subscribe_live(id).unwrap();

    tokio::time::sleep(Duration::from_millis(800)).await;
    let mut seen = Vec::new();
    while let Some(f) = viewer.recv().await {
        seen.push(f.frame_index);
    }
    agent.await.unwrap().unwrap();
    h.wait_packed(id).await;

    assert!(
        viewer.skipped() > 0,
        "viewer kept up with {} frames",
        seen.len()
    );
    assert!(seen.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(h.gw().stats(id).unwrap().delivered, 240);
    assert!(verify_container(h.gw().container_layout(id).root())
        .unwrap()
        .passed());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn failing_processor_is_logged_and_isolated() {
    let h = Harness::start().await;
    let mut cfg = h.agent_config("lab", 1);
    cfg.fps = 60;
    cfg.max_frames = Some(60);
    let agent = h.spawn_agent(cfg).await;
    let id = h.start_sessions("lab", &[1], &["marker"]).await[0];
    let failing = attach_processor(
        &h.gw().relay,
        h.gw().events.clone(),
        id,
        Arc::new(Failing),
        false,
    )
    .unwrap();

    agent.await.unwrap().unwrap();
    h.wait_packed(id).await;
    let report = failing.await.unwrap();
    let events = h.gw().read_events(id, 1).unwrap();

    let errors: Vec<_> = events
        .iter()
        .filter(|e| e.kind == EventKind::Lifecycle && e.payload.contains("processor_error"))
        .collect();
    assert_eq!(errors.len() as u64, report.failed);
    assert!(report.failed >= 5);
    assert!(errors.iter().all(|e| e.frame_index % 10 == 3));
    let inference = events
        .iter()
        .filter(|e| e.kind == EventKind::Inference)
        .count() as u64;
    assert_eq!(inference, 60 + report.processed);
    assert!(verify_container(h.gw().container_layout(id).root())
        .unwrap()
        .passed());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn marker_detector_annotates_processed_feed() {
    let h = Harness::start().await;
    let mut cfg = h.agent_config("lab", 1);
    cfg.fps = 30;
    cfg.max_frames = Some(30);
    let agent = h.spawn_agent(cfg).await;
    let id = h.start_sessions("lab", &[1], &["marker"]).await[0];
    let mut raw = h.gw().relay.subscribe_live(id).unwrap();
    let mut processed = h.gw().relay.subscribe_processed(id).unwrap();

    let r = raw.recv().await.unwrap();
    let mut p = processed.recv().await.unwrap();
    while p.frame_index < r.frame_index {
        p = processed.recv().await.unwrap();
    }
    assert_eq!(p.frame_index, r.frame_index);
    assert_ne!(p.pixels().unwrap(), r.pixels().unwrap());

    agent.await.unwrap().unwrap();
    h.wait_packed(id).await;
    let payloads: Vec<String> = h
        .gw()
        .read_events(id, 1)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == EventKind::Inference)
        .map(|e| e.payload)
        .collect();
    assert_eq!(payloads.len(), 30);
    assert!(
        payloads[0].starts_with(r#"{"detections":[{"h":32,"label":"marker""#),
        "{}",
        payloads[0]
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unknown_processor_is_rejected_before_start() {
    let h = Harness::start().await;
    let agent = h.spawn_agent(h.agent_config("lab", 1)).await;
    h.gw()
        .acquire_lease(common::RESEARCHER, "lab", None)
        .unwrap();
    let err = h
        .gw()
        .start_parallel_capture(common::RESEARCHER, "lab", &[1], &["yolo".to_string()])
        .await
        .unwrap_err();
    assert!(matches!(err, GatewayError::UnknownProcessor(_)), "{err:?}");
    assert!(h.gw().sessions().is_empty());
    agent.abort();
}
