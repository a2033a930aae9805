use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use teleop_core::load_robot_description;
use teleop_core::motion_gen::{self_collision_distance, MotionError};
use teleop_core::retargeting::{RetargetConfig, Retargeter};
use teleop_server::config::ServerConfig;
use teleop_server::protocol::{ControlAction, Envelope, Message, MessageType, SessionControl};
use teleop_server::recording::{self, Recording, RecordingHeader, ReplayOptions};
use teleop_server::sim::{generate_stream, operator_script, NoiseSpec};

#[derive(Parser)]
#[command(name = "teleop", version, about = "Vision-based arm-hand teleoperation server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the live server.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        viewer_port: Option<u16>,
        #[arg(long, default_value = "info")]
        log_level: String,
    },
    /// Run a frame stream through the pipeline, or re-check a recording.
    Replay {
        /// Server config with the robots and sessions; not needed for recordings.
        #[arg(long)]
        session_config: Option<PathBuf>,
        /// NDJSON inbound envelopes, or a recording.
        #[arg(long)]
        stream: PathBuf,
        /// Write a recording of this run.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Output timestamp compression factor.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Follow recorded timing instead of running as fast as possible.
        #[arg(long)]
        paced: bool,
        /// Keep ticking this long after the last inbound message.
        #[arg(long, default_value_t = 500)]
        tail_ms: u64,
    },
    /// Load a robot description and retargeting config and report on them.
    ValidateRobot {
        #[arg(long)]
        urdf: PathBuf,
        #[arg(long)]
        spheres: Option<PathBuf>,
        #[arg(long)]
        retarget_config: Option<PathBuf>,
        /// Hand subtree root; defaults to the URDF root.
        #[arg(long)]
        hand_base_link: Option<String>,
    },
    /// Write a synthetic operator stream as NDJSON envelopes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "s0")]
        session: String,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 25.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Camera yaw angles in radians, one camera each.
        #[arg(long, value_delimiter = ',', default_value = "0.0,0.6")]
        yaws: Vec<f64>,
        #[arg(long)]
        depth: bool,
        #[arg(long, default_value_t = 0.0)]
        keypoint_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        depth_sigma: f64,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve {
            config,
            port,
            viewer_port,
            log_level,
        } => serve(&config, port, viewer_port, &log_level),
        Command::Replay {
            session_config,
            stream,
            record,
            speed,
            paced,
            tail_ms,
        } => replay(session_config.as_deref(), &stream, record.as_deref(), ReplayOptions { speed, paced }, tail_ms),
        Command::ValidateRobot {
            urdf,
            spheres,
            retarget_config,
            hand_base_link,
        } => validate_robot(&urdf, spheres.as_deref(), retarget_config.as_deref(), hand_base_link.as_deref()),
        Command::Synth {
            out,
            session,
            duration,
            rate,
            seed,
            yaws,
            depth,
            keypoint_sigma,
            depth_sigma,
        } => synth(&out, &session, duration, rate, seed, &yaws, depth, keypoint_sigma, depth_sigma),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn serve(config: &Path, port: Option<u16>, viewer_port: Option<u16>, log_level: &str) -> Result<(), AnyError> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(log_level)?)
        .init();
    let mut config = ServerConfig::load(config)?;
    if let Some(p) = port {
        config.port = p;
    }
    if let Some(p) = viewer_port {
        config.viewer_port = p;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(teleop_server::net::serve(&config))?;
    Ok(())
}

fn read_envelopes(path: &Path) -> Result<Vec<Envelope>, AnyError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn looks_like_recording(path: &Path) -> Result<bool, AnyError> {
    let mut first = String::new();
    BufReader::new(std::fs::File::open(path)?).read_line(&mut first)?;
    Ok(first.trim_start().starts_with("{\"header\""))
}

fn replay(
    session_config: Option<&Path>,
    stream: &Path,
    record: Option<&Path>,
    options: ReplayOptions,
    tail_ms: u64,
) -> Result<(), AnyError> {
    if options.speed.is_nan() || options.speed <= 0.0 {
        return Err("speed must be positive".into());
    }
    let (header, inbound, end_us, recorded) = if looks_like_recording(stream)? {
        let rec = Recording::load(stream)?;
        (rec.header.clone(), rec.inbound(), rec.end_us, Some(rec))
    } else {
        let path = session_config.ok_or("--session-config is required for a frame stream")?;
        let config = ServerConfig::load(path)?;
        let mut inbound = read_envelopes(stream)?;
        let has_start = inbound.iter().any(|e| {
            matches!(e.message(), Ok(Message::SessionControl(SessionControl { action: ControlAction::Start, .. })))
        });
        if !has_start {
            let t = inbound.iter().map(|e| e.timestamp_us).min().unwrap_or(1).saturating_sub(1);
            for s in &config.sessions {
                let start = Message::SessionControl(SessionControl {
                    action: ControlAction::Start,
                    session: Some(s.clone()),
                });
                inbound.insert(0, Envelope::new(Some(&s.session_id), t, &start));
            }
        }
        let end = inbound.iter().map(|e| e.timestamp_us).max().unwrap_or(0) + tail_ms * 1000;
        (RecordingHeader::new(config.robots, config.sessions), inbound, end, None)
    };

    let outcome = recording::run_logical(&header, &inbound, end_us, options)?;
    let commands = outcome.commands();
    let mut robots: Vec<&str> = commands.iter().map(|c| c.robot_id.as_str()).collect();
    robots.sort();
    robots.dedup();
    for robot in robots {
        let stream: Vec<_> = commands.iter().filter(|c| c.robot_id == robot).collect();
        let span = (stream.last().unwrap().timestamp_us - stream[0].timestamp_us) as f64 * 1e-6;
        let rate = if span > 0.0 { (stream.len() - 1) as f64 / span } else { 0.0 };
        println!("{robot}: {} commands, {rate:.2} Hz", stream.len());
    }
    let errors = outcome
        .events
        .iter()
        .filter(|e| e.message.kind == MessageType::Error)
        .count();
    println!("errors and drop notices: {errors}");
    for (id, tick) in outcome.ticks.iter().rev().take(1) {
        println!("last status of {id}: {:?}", tick.status);
    }

    if let Some(rec) = &recorded {
        if options.speed == 1.0 {
            let check = recording::verify(rec)?;
            if check.identical() {
                println!("replay matches the recording bit for bit ({} commands)", check.recorded);
            } else {
                println!("replay DIFFERS from the recording at command {:?}", check.first_mismatch);
                return Err("replay mismatch".into());
            }
        }
    }
    if let Some(path) = record {
        outcome.into_recording(header).save(path)?;
        println!("recording written to {}", path.display());
    }
    Ok(())
}

fn validate_robot(urdf: &Path, spheres: Option<&Path>, retarget: Option<&Path>, hand_base: Option<&str>) -> Result<(), AnyError> {
    let urdf_text = std::fs::read_to_string(urdf)?;
    let spheres_text = spheres.map(std::fs::read_to_string).transpose()?;
    let model = load_robot_description(&urdf_text, spheres_text.as_deref())?;
    println!("robot {}: {} links, {} actuated joints", model.name(), model.links().len(), model.dof());
    println!("collision spheres: {}", model.sphere_count());
    match self_collision_distance(&model, &model.mid_configuration()) {
        Ok(r) => println!("self-collision distance at mid-range: {:.4} m ({} / {})", r.distance, r.links.0, r.links.1),
        Err(MotionError::NoCollisionModel) => println!("no sphere pairs to check"),
        Err(e) => return Err(e.into()),
    }
    if let Some(path) = retarget {
        let config = RetargetConfig::from_json(&std::fs::read_to_string(path)?)?;
        let hand = match hand_base {
            Some(link) => model.subtree(link)?,
            None => model.clone(),
        };
        let pairs = config.vector_pairs.len();
        let retargeter = Retargeter::new(hand, config)?;
        println!(
            "retargeting: {pairs} vector pairs over {} hand joints (base {})",
            retargeter.model().dof(),
            retargeter.model().root_link()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    out: &Path,
    session: &str,
    duration: f64,
    rate: f64,
    seed: u64,
    yaws: &[f64],
    depth: bool,
    keypoint_sigma: f64,
    depth_sigma: f64,
) -> Result<(), AnyError> {
    let mut script = operator_script(duration, 0.0, yaws, depth);
    script.noise = NoiseSpec {
        keypoint_sigma,
        depth_sigma,
        ..NoiseSpec::default()
    };
    let stream = generate_stream(&script, rate, seed)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    let envelopes = stream.envelopes(session);
    for env in &envelopes {
        serde_json::to_writer(&mut w, env)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("{} frames written to {}", envelopes.len(), out.display());
    Ok(())
}
