use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use teleop_server::config::ServerConfig;
use teleop_server::protocol::{codec, ControlAction, ErrorCode, Heartbeat, SessionControl};
use teleop_server::sim::{generate_stream, operator_script};
use teleop_server::{Envelope, Message, SceneState};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio_util::codec::Framed;

type Client = Framed<TcpStream, tokio_util::codec::LengthDelimitedCodec>;

fn handover() -> ServerConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/config/handover.toml");
    let mut config = ServerConfig::load(&path).unwrap();
    config.port = 0;
    config.viewer_port = 0;
    config
}

async fn connect(addr: SocketAddr) -> Client {
    let stream = TcpStream::connect(("127.0.0.1", addr.port())).await.unwrap();
    Framed::new(stream, codec())
}

async fn send(client: &mut Client, env: &Envelope) {
    client.send(Bytes::from(env.to_bytes())).await.unwrap();
}

async fn recv(client: &mut Client, within: Duration) -> Option<Envelope> {
    match tokio::time::timeout(within, client.next()).await {
        Ok(Some(Ok(b))) => Some(Envelope::from_bytes(&b).unwrap()),
        _ => None,
    }
}

fn control(session: &str, action: ControlAction, t: u64) -> Envelope {
    Envelope::new(Some(session), t, &Message::SessionControl(SessionControl { action, session: None }))
}

async fn http_get(addr: SocketAddr, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(("127.0.0.1", addr.port())).await.unwrap();
    let req = format!("GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n");
    s.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8_lossy(&raw).to_string();
    let status = text[9..12].parse().unwrap();
    let body = text.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

/// Opens the scene websocket by hand and returns the first text message.
async fn first_scene_message(addr: SocketAddr) -> String {
    let s = TcpStream::connect(("127.0.0.1", addr.port())).await.unwrap();
    let mut s = BufReader::new(s);
    let req = "GET /scene HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n\
               Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n";
    s.get_mut().write_all(req.as_bytes()).await.unwrap();
    let mut status = String::new();
    s.read_line(&mut status).await.unwrap();
    assert!(status.contains("101"), "{status}");
    loop {
        let mut line = String::new();
        s.read_line(&mut line).await.unwrap();
        if line == "\r\n" {
            break;
        }
    }
    let mut head = [0u8; 2];
    s.read_exact(&mut head).await.unwrap();
    assert_eq!(head[0], 0x81, "single unfragmented text frame");
    let len = match head[1] & 0x7f {
        126 => s.read_u16().await.unwrap() as usize,
        127 => s.read_u64().await.unwrap() as usize,
        n => n as usize,
    };
    let mut payload = vec![0u8; len];
    s.read_exact(&mut payload).await.unwrap();
    String::from_utf8(payload).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn operator_drives_robot_over_tcp() {
    let config = handover();
    let server = teleop_server::net::spawn(&config).await.unwrap();
    let mut client = connect(server.addr).await;

    let t0 = 1_000_000u64;
    send(&mut client, &control("op_a", ControlAction::Start, t0)).await;

    let mut script = operator_script(2.6, 0.0, &[0.0, 0.6], true);
    script.start_us = t0 + 1_000;
    let frames = generate_stream(&script, 25.0, 1).unwrap().envelopes("op_a");
    let (mut sink, mut source) = client.split();

    let reader = tokio::spawn(async move {
        let mut commands = Vec::new();
        let mut errors = Vec::new();
        while let Ok(Some(Ok(b))) = tokio::time::timeout(Duration::from_millis(500), source.next()).await {
            let env = Envelope::from_bytes(&b).unwrap();
            match env.message().unwrap() {
                Message::JointCommand(c) => commands.push(c),
                Message::Error(e) => errors.push(e),
                _ => {}
            }
        }
        (commands, errors)
    });

    let began = Instant::now();
    for env in &frames {
        let due = Duration::from_micros(env.timestamp_us - t0);
        if let Some(wait) = due.checked_sub(began.elapsed()) {
            tokio::time::sleep(wait).await;
        }
        sink.send(Bytes::from(env.to_bytes())).await.unwrap();
    }
    tokio::time::sleep(Duration::from_millis(200)).await;
    let elapsed = began.elapsed().as_secs_f64();
    sink.send(Bytes::from(control("op_a", ControlAction::Stop, t0 + 3_000_000).to_bytes()))
        .await
        .unwrap();

    let (commands, errors) = reader.await.unwrap();
    assert!(errors.is_empty(), "{errors:?}");
    assert!(commands.iter().all(|c| c.robot_id == "left_arm" && c.arm_q.len() == 6 && c.hand_q.len() == 16));
    let expected = 120.0 * elapsed;
    let n = commands.len() as f64;
    assert!(n > 0.8 * expected && n < 1.2 * expected, "{n} commands in {elapsed:.2} s");
    assert!(commands.windows(2).all(|w| w[0].timestamp_us < w[1].timestamp_us));
    let first = &commands[0].arm_q;
    assert!(commands.iter().any(|c| &c.arm_q != first), "the arm follows the operator once calibrated");

    tokio::time::sleep(Duration::from_millis(100)).await;
    let scene = server.scene.current();
    let state: serde_json::Value = serde_json::from_str(&scene.json).unwrap();
    assert_eq!(state["payload"]["robots"].as_array().unwrap().len(), 0, "stopped session leaves the scene");
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn client_errors_and_heartbeats() {
    let server = teleop_server::net::spawn(&handover()).await.unwrap();
    let mut client = connect(server.addr).await;

    let frames = generate_stream(&operator_script(0.1, 0.0, &[0.0], false), 25.0, 0).unwrap();
    send(&mut client, &frames.envelopes("nobody")[0]).await;
    let reply = recv(&mut client, Duration::from_secs(2)).await.unwrap();
    match reply.message().unwrap() {
        Message::Error(e) => assert_eq!(e.code, ErrorCode::UnknownSession),
        m => panic!("{m:?}"),
    }

    client.send(Bytes::from_static(b"not json")).await.unwrap();
    let reply = recv(&mut client, Duration::from_secs(2)).await.unwrap();
    assert!(matches!(reply.message().unwrap(), Message::Error(e) if e.code == ErrorCode::Protocol));

    send(&mut client, &control("op_b", ControlAction::Start, 5)).await;
    send(&mut client, &control("op_b", ControlAction::Start, 6)).await;
    let mut duplicate = false;
    while let Some(env) = recv(&mut client, Duration::from_millis(500)).await {
        if let Message::Error(e) = env.message().unwrap() {
            duplicate |= e.code == ErrorCode::DuplicateSession;
            break;
        }
    }
    assert!(duplicate);

    // A second connection that only sends a heartbeat also gets the command stream.
    let mut watcher = connect(server.addr).await;
    let hb = Envelope::new(Some("op_b"), 7, &Message::Heartbeat(Heartbeat { timestamp_us: 7 }));
    send(&mut watcher, &hb).await;
    let echo = recv(&mut watcher, Duration::from_secs(2)).await.unwrap();
    assert_eq!(echo, hb);
    let next = recv(&mut watcher, Duration::from_secs(2)).await.unwrap();
    assert!(matches!(next.message().unwrap(), Message::JointCommand(c) if c.robot_id == "right_arm"));
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn viewer_endpoints() {
    let server = teleop_server::net::spawn(&handover()).await.unwrap();
    let mut client = connect(server.addr).await;
    send(&mut client, &control("op_a", ControlAction::Start, 10)).await;
    tokio::time::sleep(Duration::from_millis(100)).await;

    let (status, body) = http_get(server.viewer_addr, "/robots/left_arm/description").await;
    assert_eq!(status, 200);
    let d: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(d["robot_id"], "left_arm");
    assert_eq!(d["arm_joints"].as_array().unwrap().len(), 6);
    assert!(d["urdf"].as_str().unwrap().contains("<robot"));

    let (status, _) = http_get(server.viewer_addr, "/robots/nobody/description").await;
    assert_eq!(status, 404);

    let (status, body) = http_get(server.viewer_addr, "/assets/robots/arm6_hand.urdf").await;
    assert_eq!(status, 200);
    assert!(body.contains("<robot"));

    let text = first_scene_message(server.viewer_addr).await;
    let env: Envelope = serde_json::from_str(&text).unwrap();
    let Message::SceneState(scene) = env.message().unwrap() else {
        panic!("expected a scene state, got {text}");
    };
    let scene: SceneState = scene;
    assert!(scene.robot("left_arm").is_some());
    assert!(scene.tick > 1);
    server.shutdown().await;
}
