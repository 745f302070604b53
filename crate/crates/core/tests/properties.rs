use proptest::prelude::*;
use remcap_core::detect::{detect_marker, Detection};
use remcap_core::event::{EventKind, EventRecord};
use remcap_core::frame::{rle_decode, rle_encode, Encoding, FrameRecord};
use remcap_core::render::{extract_frame_index, marker_origin, render_frame, FrameStamp};
use remcap_core::segment::{decode_segment, encode_segment};
use remcap_core::session::{SessionManifest, SessionState, SessionStatus};
use remcap_core::srt::{build_srt, frame_millis, parse_srt, srt_timestamp, MAX_HOURS};
use remcap_core::{CommandKind, Pose, Resolution};
use uuid::Uuid;

fn resolution() -> impl Strategy<Value = Resolution> {
    prop_oneof![
        8 => Just(Resolution::P360),
        1 => Just(Resolution::P720),
        1 => Just(Resolution::P1080),
    ]
}

fn encoding() -> impl Strategy<Value = Encoding> {
    prop_oneof![Just(Encoding::RawRgb24), Just(Encoding::RleRgb24)]
}

/// Pixels with random-length runs of random bytes, so RLE sees both short
/// and long runs.
fn pixels_from_seed(len: usize, mut seed: u64) -> Vec<u8> {
    let mut next = move || {
        seed ^= seed << 13;
        seed ^= seed >> 7;
        seed ^= seed << 17;
        seed
    };
    let mut px = Vec::with_capacity(len);
    while px.len() < len {
        let r = next();
        let run = 1 + (r % 700) as usize;
        let value = (r >> 32) as u8;
        let end = (px.len() + run).min(len);
        px.resize(end, value);
    }
    px
}

prop_compose! {
    fn frame()(
        session in any::<u128>(),
        device_id in any::<u16>(),
        frame_index in any::<u64>(),
        ts in any::<u64>(),
        res in resolution(),
        enc in encoding(),
        seed in 1u64..,
    ) -> FrameRecord {
        let base = FrameRecord::raw(Uuid::from_u128(session), device_id, frame_index, ts, res, pixels_from_seed(res.pixel_bytes(), seed));
        base.reencode(enc).unwrap()
    }
}

fn pose() -> impl Strategy<Value = Pose> {
    (-1.0e4f64..1.0e4, -1.0e4f64..1.0e4, -10.0f64..10.0).prop_map(|(x, y, heading)| Pose {
        x,
        y,
        heading,
        ..Default::default()
    })
}

fn stamp() -> FrameStamp {
    FrameStamp {
        session_id: Uuid::nil(),
        device_id: 0,
        capture_ts_micros: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn frame_round_trip(f in frame()) {
        let bytes = f.encode();
        prop_assert_eq!(bytes.len(), 48 + f.payload.len());
        prop_assert_eq!(FrameRecord::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn rle_expands_exactly_or_fails(bytes in proptest::collection::vec(any::<u8>(), 0..2048), expected in 0usize..4096) {
        match rle_decode(&bytes, expected) {
            Ok(out) => prop_assert_eq!(out.len(), expected),
            Err(_) => {}
        }
        let data: Vec<u8> = bytes.iter().map(|b| b % 3).collect();
        prop_assert_eq!(rle_decode(&rle_encode(&data), data.len()).unwrap(), data);
    }

    #[test]
    fn srt_timestamp_monotone((a, b, fps) in (1u8..=120).prop_flat_map(|fps| {
        let limit = MAX_HOURS * 3600 * fps as u64;
        (0..limit, 0..limit, Just(fps))
    })) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(frame_millis(lo, fps).unwrap() <= frame_millis(hi, fps).unwrap());
        // fixed-width text sorts like the value below 100 h
        prop_assert!(srt_timestamp(lo, fps).unwrap() <= srt_timestamp(hi, fps).unwrap());
    }

    #[test]
    fn srt_reparses(frames in proptest::collection::vec(0u64..5000, 0..60), fps in 1u8..=120) {
        let mut frames = frames;
        frames.sort_unstable();
        let events: Vec<EventRecord> = frames.iter().enumerate().map(|(i, &f)| EventRecord {
            session_id: Uuid::nil(),
            seq: i as u64 + 1,
            kind: EventKind::Marker,
            frame_index: f,
            ts_micros: 0,
            payload: format!(r#"{{"text":"m{i}"}}"#),
        }).collect();
        let srt = build_srt(&events, fps, 5000).unwrap();
        let cues = parse_srt(&srt).unwrap();
        prop_assert_eq!(cues.len(), events.len());
        let blocks: Vec<&str> = srt.split("\n\n").filter(|b| !b.is_empty()).collect();
        prop_assert_eq!(blocks.len(), events.len());
        for (i, (cue, ev)) in cues.iter().zip(&events).enumerate() {
            prop_assert_eq!(cue.index, i as u64 + 1);
            prop_assert_eq!(&cue.payload, &ev.payload);
            prop_assert!(cue.start_millis <= cue.end_millis);
            prop_assert!(cue.end_millis - cue.start_millis <= 1000);
            if let Some(next) = cues.get(i + 1) {
                prop_assert!(cue.end_millis <= next.start_millis);
            }
        }
    }

    #[test]
    fn detect_finds_rendered_marker(p in pose(), res in resolution(), idx in any::<u64>(), enc in encoding()) {
        let f = render_frame(&p, idx, res, stamp(), enc);
        let (u, v) = marker_origin(p.x, p.y, res);
        prop_assert_eq!(detect_marker(&f), vec![Detection {
            x: u as u32, y: v as u32, w: 32, h: 32, label: "marker".into(), score: 1.0,
        }]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn index_strip_round_trip(idx in any::<u64>(), p in pose(), res in prop_oneof![Just(Resolution::P360), Just(Resolution::P720)]) {
        let f = render_frame(&p, idx, res, stamp(), Encoding::RleRgb24);
        prop_assert_eq!(extract_frame_index(&f), idx);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segment_round_trip(frames in proptest::collection::vec(frame(), 0..6)) {
        let bytes = encode_segment(&frames);
        let decoded = decode_segment(&bytes).unwrap();
        prop_assert_eq!(&decoded, &frames);
        prop_assert_eq!(encode_segment(&decoded), bytes);
    }
}

fn status() -> impl Strategy<Value = SessionStatus> {
    prop_oneof![
        Just(SessionStatus::Starting),
        Just(SessionStatus::Live),
        Just(SessionStatus::Stopping),
        Just(SessionStatus::Packed),
    ]
}

fn empty_manifest() -> SessionManifest {
    SessionManifest {
        session_id: Uuid::nil(),
        scene_id: "s".into(),
        device_id: 1,
        fps: 30,
        resolution: Resolution::P360,
        start_ts_micros: 0,
        frame_count: 0,
        segments: Vec::new(),
        deterministic_clock: true,
    }
}

proptest! {
    #[test]
    fn status_machine_never_moves_backward(ops in proptest::collection::vec(proptest::option::of(status()), 0..40)) {
        let mut s = SessionState::new(Uuid::nil(), "s", 1);
        for op in ops {
            let before = s.status;
            let ok = match op {
                Some(to) => s.advance(to).is_ok(),
                None => s.mark_packed(empty_manifest()).is_ok(),
            };
            prop_assert!(s.status >= before);
            if !ok {
                prop_assert_eq!(s.status, before);
            }
            prop_assert_eq!(s.manifest.is_some(), s.status == SessionStatus::Packed);
        }
    }

    #[test]
    fn clamped_commands_are_in_range(v in any::<i32>(), which in 0usize..5) {
        let kind = [
            CommandKind::SetSpeed(v),
            CommandKind::SetSteering(v),
            CommandKind::SetCamPan(v),
            CommandKind::SetCamTilt(v),
            CommandKind::Stop,
        ][which];
        let c = kind.clamped();
        prop_assert!(c.in_range());
        prop_assert_eq!(c.name(), kind.name());
        if kind.in_range() {
            prop_assert_eq!(c, kind);
        }
    }
}
