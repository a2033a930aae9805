use crate::protocol::{ControlAction, SessionControl};
use crate::sim::{generate_stream, operator_script};
use crate::testutil::single_operator;

use super::*;

fn session_run(seconds: f64) -> (RecordingHeader, Vec<Envelope>, u64) {
    let config = single_operator();
    let mut script = operator_script(seconds, 0.4, &[0.0, 0.6], true);
    script.noise.keypoint_sigma = 0.001;
    script.noise.depth_sigma = 0.002;
    let mut inbound = vec![Envelope::new(
        Some("s0"),
        999_000,
        &Message::SessionControl(SessionControl {
            action: ControlAction::Start,
            session: None,
        }),
    )];
    inbound.extend(generate_stream(&script, 25.0, 11).unwrap().envelopes("s0"));
    let end = 1_000_000 + (seconds * 1e6) as u64 + 200_000;
    (RecordingHeader::new(config.robots, config.sessions), inbound, end)
}

fn bytes(rec: &Recording) -> Vec<u8> {
    let mut out = Vec::new();
    rec.write_to(&mut out).unwrap();
    out
}

#[test]
fn recording_round_trips_through_text() {
    let (header, inbound, end) = session_run(3.0);
    let rec = record(header, &inbound, end).unwrap();
    let text = bytes(&rec);
    let back = Recording::read_from(text.as_slice()).unwrap();
    assert_eq!(back, rec);
    assert_eq!(back.inbound().len(), inbound.len());
    assert_eq!(back.commands().len(), rec.commands().len());
}

#[test]
fn replay_is_bit_identical() {
    let (header, inbound, end) = session_run(3.0);
    let rec = record(header, &inbound, end).unwrap();
    let reread = Recording::read_from(bytes(&rec).as_slice()).unwrap();
    let check = verify(&reread).unwrap();
    assert!(check.identical(), "{check:?}");
    assert!(check.recorded > 350);
    let again = replay(&reread, ReplayOptions::default()).unwrap();
    assert_eq!(bytes(&again.into_recording(reread.header.clone())), bytes(&rec));
}

#[test]
fn truncated_recording_is_corrupt() {
    let (header, inbound, end) = session_run(1.0);
    let text = String::from_utf8(bytes(&record(header, &inbound, end).unwrap())).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let no_footer = lines[..lines.len() - 1].join("\n");
    let err = Recording::read_from(no_footer.as_bytes()).unwrap_err();
    assert!(matches!(err, RecordingError::CorruptRecording { .. }), "{err}");

    let cut = &text[..text.len() / 2];
    let err = Recording::read_from(cut.as_bytes()).unwrap_err();
    assert!(matches!(err, RecordingError::CorruptRecording { .. }), "{err}");

    let headless = lines[1..].join("\n");
    assert!(matches!(
        Recording::read_from(headless.as_bytes()),
        Err(RecordingError::CorruptRecording { line: 1, .. })
    ));
    assert!(matches!(
        Recording::read_from("".as_bytes()),
        Err(RecordingError::CorruptRecording { .. })
    ));
}

#[test]
fn reordered_or_miscounted_recording_is_corrupt() {
    let (header, inbound, end) = session_run(1.0);
    let rec = record(header, &inbound, end).unwrap();

    let mut swapped = rec.clone();
    let n = swapped.events.len();
    swapped.events.swap(1, n - 1);
    assert!(matches!(
        Recording::read_from(bytes(&swapped).as_slice()),
        Err(RecordingError::CorruptRecording { .. })
    ));

    let text = String::from_utf8(bytes(&rec)).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(3);
    assert!(matches!(
        Recording::read_from(lines.join("\n").as_bytes()),
        Err(RecordingError::CorruptRecording { .. })
    ));
}

#[test]
fn faster_replay_scales_time_only() {
    let (header, inbound, end) = session_run(2.0);
    let rec = record(header, &inbound, end).unwrap();
    let fast = replay(&rec, ReplayOptions { speed: 4.0, paced: false }).unwrap();
    let slow = rec.commands();
    let quick = fast.commands();
    assert_eq!(slow.len(), quick.len());
    let t0 = inbound[0].timestamp_us;
    for (a, b) in slow.iter().zip(&quick) {
        assert_eq!(a.arm_q, b.arm_q);
        assert_eq!(a.hand_q, b.hand_q);
        let expected = t0 + ((a.timestamp_us - t0) as f64 / 4.0).round() as u64;
        assert_eq!(b.timestamp_us, expected);
    }
}

#[test]
fn paced_replay_follows_the_clock() {
    let (header, inbound, end) = session_run(0.4);
    let short: Vec<Envelope> = inbound.into_iter().filter(|e| e.timestamp_us <= 1_200_000).collect();
    let rec = record(header, &short, end).unwrap();
    let began = Instant::now();
    replay(&rec, ReplayOptions { speed: 2.0, paced: true }).unwrap();
    // Inbound events span 201 ms of recorded time.
    assert!(began.elapsed() >= Duration::from_millis(100));
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ndjson");
    let (header, inbound, end) = session_run(1.0);
    let rec = record(header, &inbound, end).unwrap();
    rec.save(&path).unwrap();
    assert_eq!(Recording::load(&path).unwrap(), rec);
    assert!(matches!(
        Recording::load(&dir.path().join("missing")),
        Err(RecordingError::Io(_))
    ));
}
