use teleop_core::geometry::geodesic_distance;

use super::*;
use crate::sim::{generate_stream, operator_script};
use crate::testutil::{arm_robot, operator_frames, single_operator};

fn setup() -> (SessionSpec, RobotAssets) {
    (single_operator().sessions[0].clone(), arm_robot())
}

fn frames(duration: f64, seed: u64) -> Vec<HandFrame> {
    operator_frames(duration, 0.0, seed)
}

/// Feeds frames, running every tick due before each one; returns the commands.
fn drive(s: &mut SessionPipeline, frames: &[HandFrame], until_us: u64) -> Vec<TickOutput> {
    let mut out = Vec::new();
    for f in frames {
        while s.next_tick_us() < f.timestamp_us {
            out.push(s.tick().unwrap());
        }
        s.ingest(f).unwrap();
    }
    while s.next_tick_us() <= until_us {
        out.push(s.tick().unwrap());
    }
    out
}

const START: u64 = 999_999;

#[test]
fn starts_awaiting_calibration_and_holds() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    assert_eq!(s.status(), SessionStatus::AwaitingCalibration);
    let first = s.tick().unwrap();
    assert_eq!(first.command.arm_q, robot.initial_arm_q);
    assert_eq!(first.command.hand_q, robot.initial_hand_q);
    assert_eq!(first.command.robot_id, "arm");
}

#[test]
fn fiftieth_frame_on_every_camera_activates() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    let all = frames(3.0, 1);
    let (first49, rest): (Vec<_>, Vec<_>) = all.iter().partition(|f| f.timestamp_us < 1_000_000 + 49 * 40_000);
    for f in &first49 {
        s.ingest(f).unwrap();
    }
    assert_eq!(s.status(), SessionStatus::AwaitingCalibration);
    let ack = s.ingest(rest[0]).unwrap();
    assert_eq!(ack.status, SessionStatus::AwaitingCalibration, "one camera still at 49");
    let ack = s.ingest(rest[1]).unwrap();
    assert_eq!(ack.status, SessionStatus::Active);
    let r = s.calibration().relative_rotation("cam1").unwrap();
    let expected = Rotation3::from_axis_angle(&Vector3::y_axis(), -0.6);
    assert!(geodesic_distance(&r, &expected) < 1e-9);
}

#[test]
fn stale_frame_is_dropped_with_reason() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    let all = frames(0.2, 2);
    s.ingest(&all[2]).unwrap();
    let ack = s.ingest(&all[0]).unwrap();
    assert_eq!(
        ack.outcome,
        FrameOutcome::Dropped {
            reason: DropReason::StaleFrame {
                last_timestamp_us: all[2].timestamp_us
            }
        }
    );
    let dup = s.ingest(&all[2]).unwrap();
    assert!(matches!(dup.outcome, FrameOutcome::Dropped { .. }));
    assert_eq!(s.calibration().buffered("cam0"), 1);
}

#[test]
fn unknown_camera_and_malformed_frames_are_errors() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    let mut f = frames(0.1, 3).remove(0);
    f.camera_id = "cam9".into();
    assert_eq!(s.ingest(&f), Err(SessionError::UnknownCamera("cam9".into())));
    f.camera_id = "cam0".into();
    f.keypoints_local.pop();
    assert!(matches!(s.ingest(&f), Err(SessionError::MalformedFrame(_))));
}

#[test]
fn tick_clock_runs_at_control_rate() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    let stamps: Vec<u64> = (0..1200).map(|_| s.tick().unwrap().command.timestamp_us).collect();
    assert_eq!(stamps[0], START + 8333);
    assert_eq!(stamps[1199], START + 10_000_000);
    assert!(stamps.windows(2).all(|w| w[1] - w[0] == 8333 || w[1] - w[0] == 8334));
}

#[test]
fn end_effector_target_follows_wrist_displacement() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    let stream = generate_stream(&operator_script(4.0, 0.0, &[0.0, 0.6], true), 25.0, 4).unwrap();
    let mut all: Vec<HandFrame> = stream.frames.values().flatten().cloned().collect();
    all.sort_by(|a, b| (a.timestamp_us, &a.camera_id).cmp(&(b.timestamp_us, &b.camera_id)));
    let activation = 1_000_000 + 49 * 40_000;
    let mut anchor = None;
    for f in &all {
        s.ingest(f).unwrap();
        if f.timestamp_us == activation && f.camera_id == "cam1" {
            anchor = Some(*s.ee_target());
        }
    }
    let anchor = anchor.unwrap();
    // World and reference camera differ only by a translation here.
    let wrist_at = |t: u64| stream.truth.iter().find(|(ts, _)| *ts == t).unwrap().1;
    let w0 = wrist_at(activation);
    let w1 = wrist_at(stream.truth.last().unwrap().0);
    let expected_shift = w1.translation - w0.translation;
    let shift = s.ee_target().translation - anchor.translation;
    assert!((shift - expected_shift).norm() < 1e-9, "{shift} vs {expected_shift}");
    let expected_rot = w1.rotation * w0.rotation.inverse() * anchor.rotation;
    assert!(geodesic_distance(&s.ee_target().rotation, &expected_rot) < 1e-9);
}

#[test]
fn tracking_gap_freezes_and_resumes_without_jump() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    let all = frames(6.0, 5);
    let gap = (3_000_000, 3_400_000);
    let before: Vec<HandFrame> = all.iter().filter(|f| f.timestamp_us <= gap.0).cloned().collect();
    let after: Vec<HandFrame> = all.iter().filter(|f| f.timestamp_us > gap.1).cloned().collect();

    drive(&mut s, &before, gap.0);
    assert_eq!(s.status(), SessionStatus::Active);
    let mut frozen = Vec::new();
    while s.next_tick_us() < after[0].timestamp_us {
        let t = s.tick().unwrap();
        if t.status == SessionStatus::LostTracking {
            frozen.push(t.command);
        }
    }
    assert_eq!(s.status(), SessionStatus::LostTracking);
    assert!(frozen.len() > 5);
    let held = frozen.last().unwrap().clone();
    let first_lost = s.controller().ee_pose();
    assert!(frozen.windows(2).all(|w| w[0].arm_q == w[1].arm_q), "arm must not move while lost");

    s.ingest(&after[0]).unwrap();
    s.ingest(&after[1]).unwrap();
    assert_eq!(s.status(), SessionStatus::Active);
    let resumed = s.tick().unwrap();
    let jump = resumed
        .command
        .arm_q
        .iter()
        .zip(&held.arm_q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(jump < 1e-9, "jump {jump}");
    let (dr, dt) = s.controller().ee_pose().distance_to(&first_lost);
    assert!(dr < 1e-9 && dt < 1e-9);
}

#[test]
fn short_gaps_never_leave_active() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    // Drop every frame in a 100 ms window each half second after calibration.
    let all: Vec<HandFrame> = frames(6.0, 6)
        .into_iter()
        .filter(|f| f.timestamp_us < 3_100_000 || (f.timestamp_us - 1_000_000) % 500_000 >= 100_000)
        .collect();
    let out = drive(&mut s, &all, 7_000_000 - 400_000);
    let after_activation = out.iter().skip_while(|t| t.status != SessionStatus::Active);
    assert!(after_activation.clone().count() > 300);
    assert!(after_activation.into_iter().all(|t| t.status == SessionStatus::Active));
}

#[test]
fn pause_and_resume_transitions() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    assert!(matches!(s.pause(), Err(SessionError::InvalidTransition { .. })));
    let all = frames(3.0, 7);
    let (calib, rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|f| f.timestamp_us <= 2_960_000);
    drive(&mut s, &calib, 2_960_000);
    assert_eq!(s.status(), SessionStatus::Active);
    assert_eq!(s.pause(), Ok(SessionStatus::Paused));
    let ack = s.ingest(&rest[0]).unwrap();
    assert_eq!(
        ack.outcome,
        FrameOutcome::Dropped {
            reason: DropReason::Paused
        }
    );
    assert!(matches!(s.pause(), Err(SessionError::InvalidTransition { .. })));
    assert_eq!(s.resume(), Ok(SessionStatus::Active));
    assert!(matches!(s.resume(), Err(SessionError::InvalidTransition { .. })));
    let ack = s.ingest(&rest[0]).unwrap();
    assert_eq!(ack.outcome, FrameOutcome::Accepted);
}

#[test]
fn spec_for_another_robot_is_rejected() {
    let (mut spec, robot) = setup();
    spec.robot_id = "other".into();
    assert!(matches!(SessionPipeline::new(&spec, &robot, 0), Err(SessionError::BadSpec(_))));
}

#[test]
fn hand_configuration_stays_within_limits() {
    let (spec, robot) = setup();
    let mut s = SessionPipeline::new(&spec, &robot, START).unwrap();
    let out = drive(&mut s, &frames(5.0, 8), 6_000_000);
    let hand = robot.hand();
    let arm = &robot.arm;
    assert!(out.iter().all(|t| hand.within_limits(&t.command.hand_q) && arm.within_limits(&t.command.arm_q)));
    let moved = out.iter().any(|t| t.command.hand_q != robot.initial_hand_q);
    assert!(moved, "retargeting should move the fingers once active");
}
