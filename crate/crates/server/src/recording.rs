//! Session recordings and logical-clock replay.
//!
//! A recording is newline-delimited JSON: one `header` line with everything
//! needed to rebuild the sessions, one `event` line per message in either
//! direction, and a `footer` line whose absence marks a truncated file.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RobotSpec, SessionSpec};
use crate::engine::{load_robots, Engine, EngineError};
use crate::protocol::{Envelope, JointCommandMessage, Message, MessageType};
use crate::robot::RobotError;
use crate::scene::SceneState;
use crate::session::TickOutput;

pub const FORMAT: &str = "teleop-recording";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt recording at line {line}: {message}")]
    CorruptRecording { line: usize, message: String },
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingHeader {
    pub format: String,
    pub version: u32,
    /// Robot descriptions with every file inlined.
    pub robots: Vec<RobotSpec>,
    /// Session templates that `start` messages may refer to.
    #[serde(default)]
    pub sessions: Vec<SessionSpec>,
}

impl RecordingHeader {
    pub fn new(robots: Vec<RobotSpec>, sessions: Vec<SessionSpec>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            robots,
            sessions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedEvent {
    pub t_us: u64,
    pub direction: Direction,
    pub message: Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordingFooter {
    pub events: usize,
    pub end_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    Header(RecordingHeader),
    Event(RecordedEvent),
    Footer(RecordingFooter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub header: RecordingHeader,
    pub events: Vec<RecordedEvent>,
    /// Logical time the session was run until.
    pub end_us: u64,
}

impl Recording {
    pub fn write_to(&self, w: impl Write) -> std::io::Result<()> {
        let mut w = BufWriter::new(w);
        let line = |w: &mut BufWriter<_>, l: &Line| -> std::io::Result<()> {
            serde_json::to_writer(&mut *w, l)?;
            w.write_all(b"\n")
        };
        line(&mut w, &Line::Header(self.header.clone()))?;
        for e in &self.events {
            line(&mut w, &Line::Event(e.clone()))?;
        }
        line(
            &mut w,
            &Line::Footer(RecordingFooter {
                events: self.events.len(),
                end_us: self.end_us,
            }),
        )?;
        w.flush()
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, RecordingError> {
        let corrupt = |line: usize, message: String| RecordingError::CorruptRecording { line, message };
        let mut header = None;
        let mut events = Vec::new();
        let mut footer = None;
        for (i, text) in r.lines().enumerate() {
            let text = text?;
            let n = i + 1;
            if footer.is_some() {
                if text.trim().is_empty() {
                    continue;
                }
                return Err(corrupt(n, "data after footer".into()));
            }
            let parsed: Line = serde_json::from_str(&text).map_err(|e| corrupt(n, e.to_string()))?;
            match (parsed, header.is_some()) {
                (Line::Header(h), false) => {
                    if h.format != FORMAT || h.version != VERSION {
                        return Err(corrupt(n, format!("unsupported format {} v{}", h.format, h.version)));
                    }
                    header = Some(h);
                }
                (Line::Event(e), true) => {
                    if events.last().is_some_and(|p: &RecordedEvent| p.t_us > e.t_us) {
                        return Err(corrupt(n, "events out of time order".into()));
                    }
                    events.push(e);
                }
                (Line::Footer(f), true) => {
                    if f.events != events.len() {
                        return Err(corrupt(n, format!("footer counts {} events, found {}", f.events, events.len())));
                    }
                    footer = Some(f);
                }
                (_, false) => return Err(corrupt(n, "missing header".into())),
                (Line::Header(_), true) => return Err(corrupt(n, "second header".into())),
            }
        }
        let header = header.ok_or_else(|| corrupt(0, "empty recording".into()))?;
        let footer = footer.ok_or_else(|| corrupt(events.len() + 1, "truncated: no footer".into()))?;
        Ok(Self {
            header,
            events,
            end_us: footer.end_us,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RecordingError> {
        self.write_to(std::fs::File::create(path)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RecordingError> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }

    pub fn inbound(&self) -> Vec<Envelope> {
        self.events
            .iter()
            .filter(|e| e.direction == Direction::Inbound)
            .map(|e| e.message.clone())
            .collect()
    }

    /// Outbound JOINT_COMMAND messages in emission order.
    pub fn commands(&self) -> Vec<JointCommandMessage> {
        commands_of(self.events.iter().filter(|e| e.direction == Direction::Outbound).map(|e| &e.message))
    }
}

fn commands_of<'a>(envs: impl Iterator<Item = &'a Envelope>) -> Vec<JointCommandMessage> {
    envs.filter(|e| e.kind == MessageType::JointCommand)
        .filter_map(|e| match e.message() {
            Ok(Message::JointCommand(c)) => Some(c),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayOptions {
    /// Output timestamps are compressed by this factor.
    pub speed: f64,
    /// Sleep between inbound events to follow the (scaled) recorded timing.
    pub paced: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self { speed: 1.0, paced: false }
    }
}

pub struct RunOutcome {
    /// Inbound and outbound events in time order.
    pub events: Vec<RecordedEvent>,
    /// Every controller tick, tagged with its session.
    pub ticks: Vec<(String, TickOutput)>,
    pub scene: SceneState,
    pub end_us: u64,
}

impl RunOutcome {
    pub fn commands(&self) -> Vec<JointCommandMessage> {
        commands_of(self.events.iter().filter(|e| e.direction == Direction::Outbound).map(|e| &e.message))
    }

    pub fn commands_for(&self, robot_id: &str) -> Vec<JointCommandMessage> {
        self.commands().into_iter().filter(|c| c.robot_id == robot_id).collect()
    }

    pub fn into_recording(self, header: RecordingHeader) -> Recording {
        Recording {
            header,
            events: self.events,
            end_us: self.end_us,
        }
    }
}

fn push_ticks(events: &mut Vec<RecordedEvent>, all: &mut Vec<(String, TickOutput)>, ticks: Vec<(String, TickOutput)>) {
    for (sid, tick) in ticks {
        let env = Envelope::new(Some(&sid), tick.command.timestamp_us, &Message::JointCommand(tick.command.clone()));
        events.push(RecordedEvent {
            t_us: tick.command.timestamp_us,
            direction: Direction::Outbound,
            message: env,
        });
        all.push((sid, tick));
    }
}

/// Runs inbound messages through a fresh engine on a logical clock.
///
/// Before each inbound message, every controller tick due strictly earlier is
/// run; after the last message, ticks continue up to `end_us`.
pub fn run_logical(
    header: &RecordingHeader,
    inbound: &[Envelope],
    end_us: u64,
    options: ReplayOptions,
) -> Result<RunOutcome, RecordingError> {
    let mut engine = Engine::new(load_robots(&header.robots)?, &header.sessions);
    let mut order: Vec<&Envelope> = inbound.iter().collect();
    order.sort_by_key(|e| e.timestamp_us);

    let mut events = Vec::new();
    let mut ticks = Vec::new();
    let started = Instant::now();
    let t0 = order.first().map_or(0, |e| e.timestamp_us);
    for env in order {
        if options.paced {
            let due = Duration::from_secs_f64((env.timestamp_us - t0) as f64 * 1e-6 / options.speed);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let due = engine.advance_to(env.timestamp_us.saturating_sub(1))?;
        push_ticks(&mut events, &mut ticks, due);
        events.push(RecordedEvent {
            t_us: env.timestamp_us,
            direction: Direction::Inbound,
            message: env.clone(),
        });
        for reply in engine.handle(env) {
            events.push(RecordedEvent {
                t_us: env.timestamp_us,
                direction: Direction::Outbound,
                message: reply,
            });
        }
    }
    let due = engine.advance_to(end_us)?;
    push_ticks(&mut events, &mut ticks, due);

    if options.speed != 1.0 {
        let scale = |t: u64| t0 + ((t.saturating_sub(t0)) as f64 / options.speed).round() as u64;
        for e in &mut events {
            e.t_us = scale(e.t_us);
            if e.direction == Direction::Outbound {
                e.message.timestamp_us = scale(e.message.timestamp_us);
                if e.message.kind == MessageType::JointCommand {
                    if let Some(ts) = e.message.payload.get_mut("timestamp_us") {
                        *ts = scale(ts.as_u64().unwrap_or(0)).into();
                    }
                }
            }
        }
    }
    Ok(RunOutcome {
        events,
        ticks,
        scene: engine.scene().clone(),
        end_us,
    })
}

/// Runs a session and captures it as a recording.
pub fn record(header: RecordingHeader, inbound: &[Envelope], end_us: u64) -> Result<Recording, RecordingError> {
    Ok(run_logical(&header, inbound, end_us, ReplayOptions::default())?.into_recording(header))
}

/// Re-feeds a recording's inbound events.
pub fn replay(recording: &Recording, options: ReplayOptions) -> Result<RunOutcome, RecordingError> {
    run_logical(&recording.header, &recording.inbound(), recording.end_us, options)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayCheck {
    pub recorded: usize,
    pub replayed: usize,
    /// Index of the first command that differs, if any.
    pub first_mismatch: Option<usize>,
}

impl ReplayCheck {
    pub fn identical(&self) -> bool {
        self.first_mismatch.is_none() && self.recorded == self.replayed
    }
}

/// Replays at recorded speed and compares the command stream bit for bit.
pub fn verify(recording: &Recording) -> Result<ReplayCheck, RecordingError> {
    let recorded = recording.commands();
    let replayed = replay(recording, ReplayOptions::default())?.commands();
    let first_mismatch = recorded
        .iter()
        .zip(&replayed)
        .position(|(a, b)| !bit_identical(a, b))
        .or_else(|| (recorded.len() != replayed.len()).then_some(recorded.len().min(replayed.len())));
    Ok(ReplayCheck {
        recorded: recorded.len(),
        replayed: replayed.len(),
        first_mismatch,
    })
}

/// Field-wise equality with floats compared by bit pattern.
pub fn bit_identical(a: &JointCommandMessage, b: &JointCommandMessage) -> bool {
    let same = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    a.robot_id == b.robot_id && a.timestamp_us == b.timestamp_us && same(&a.arm_q, &b.arm_q) && same(&a.hand_q, &b.hand_q)
}

#[cfg(test)]
mod tests;
