use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use twofe_agent::console::ConsoleServer;
use twofe_protocol::approval::{ApprovalPolicy, Mode};
use twofe_protocol::device::Device;
use twofe_protocol::sim::Deployment;
use twofe_protocol::Error;

const TOKEN: &str = "0123456789abcdef";

fn request(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let body = body.unwrap_or("");
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw[9..12].parse().unwrap();
    let json = raw
        .split_once("\r\n\r\n")
        .map(|(_, b)| serde_json::from_str(b).unwrap_or(Value::Null))
        .unwrap_or(Value::Null);
    (status, json)
}

fn get(addr: SocketAddr, path: &str) -> (u16, Value) {
    request(addr, "GET", &format!("{path}?token={TOKEN}"), None)
}

fn decide(addr: SocketAddr, id: u64, decision: &str) -> (u16, Value) {
    request(
        addr,
        "POST",
        &format!("/requests/{id}/decision?token={TOKEN}"),
        Some(&format!("{{\"decision\":\"{decision}\"}}")),
    )
}

fn setup(mode: Mode) -> (Deployment, ConsoleServer) {
    let d = Deployment::enrolled(ApprovalPolicy::new(mode).with_window(Duration::ZERO)).unwrap();
    d.primary.encrypt("notes.txt", b"hello").unwrap();
    let server = ConsoleServer::spawn(
        "127.0.0.1:0".parse().unwrap(),
        d.secondary.gate().clone(),
        TOKEN.into(),
    )
    .unwrap();
    (d, server)
}

fn wait_pending(addr: SocketAddr) -> Value {
    let start = Instant::now();
    loop {
        let (status, list) = get(addr, "/requests");
        assert_eq!(status, 200);
        if let Some(r) = list.as_array().and_then(|a| a.first()) {
            return r.clone();
        }
        assert!(start.elapsed() < Duration::from_secs(1), "no pending request within 1 s");
        thread::sleep(Duration::from_millis(10));
    }
}

fn decrypt_in_background(dev: &Arc<Device>) -> thread::JoinHandle<Result<Vec<u8>, Error>> {
    let dev = dev.clone();
    thread::spawn(move || dev.decrypt("notes.txt").map(|p| p.to_vec()))
}

#[test]
fn token_is_required() {
    let (_d, server) = setup(Mode::Prompt);
    for path in ["/requests", "/notifications", "/events", "/requests?token=wrong"] {
        let (status, body) = request(server.addr(), "GET", path, None);
        assert_eq!(status, 401, "{path}");
        assert_eq!(body["error"], "unauthorized");
    }
    let (status, _) = request(server.addr(), "POST", "/requests/1/decision", Some("{\"decision\":\"approve\"}"));
    assert_eq!(status, 401);
}

#[test]
fn approve_lets_the_decryption_finish() {
    let (d, server) = setup(Mode::Prompt);
    let job = decrypt_in_background(&d.primary);
    let req = wait_pending(server.addr());
    assert_eq!(req["kind"], "decrypt");
    assert_eq!(req["filename"], "notes.txt");
    assert_eq!(req["decision"], "pending");
    let id = req["id"].as_u64().unwrap();
    let (status, body) = decide(server.addr(), id, "approve");
    assert_eq!(status, 200);
    assert_eq!(body["decision"], "approved");
    assert_eq!(job.join().unwrap().unwrap(), b"hello");
    assert_eq!(get(server.addr(), "/requests").1, Value::Array(vec![]));
}

#[test]
fn deny_fails_the_decryption() {
    let (d, server) = setup(Mode::Prompt);
    let job = decrypt_in_background(&d.primary);
    let id = wait_pending(server.addr())["id"].as_u64().unwrap();
    assert_eq!(decide(server.addr(), id, "deny").0, 200);
    assert!(matches!(job.join().unwrap(), Err(Error::PolicyDenied)));
}

#[test]
fn deciding_twice_is_idempotent_and_conflicts_are_refused() {
    let (d, server) = setup(Mode::Prompt);
    let job = decrypt_in_background(&d.primary);
    let id = wait_pending(server.addr())["id"].as_u64().unwrap();
    assert_eq!(decide(server.addr(), id, "approve").0, 200);
    let (status, body) = decide(server.addr(), id, "approve");
    assert_eq!(status, 200);
    assert_eq!(body["decision"], "approved");
    let (status, body) = decide(server.addr(), id, "deny");
    assert_eq!(status, 409);
    assert_eq!(body["error"], "already-decided");
    assert_eq!(body["request"]["decision"], "approved");
    job.join().unwrap().unwrap();
}

#[test]
fn unknown_and_malformed_decisions() {
    let (_d, server) = setup(Mode::Prompt);
    let (status, body) = decide(server.addr(), 999, "approve");
    assert_eq!(status, 404);
    assert_eq!(body["error"], "unknown-request");
    assert_eq!(decide(server.addr(), 1, "maybe").0, 400);
    let (status, _) = request(server.addr(), "POST", &format!("/requests/1/decision?token={TOKEN}"), Some("{}"));
    assert_eq!(status, 400);
}

#[test]
fn notify_mode_decryptions_are_listed() {
    let (d, server) = setup(Mode::Notify);
    d.primary.decrypt("notes.txt").unwrap();
    let (status, list) = get(server.addr(), "/notifications");
    assert_eq!(status, 200);
    let list = list.as_array().unwrap();
    assert!(list
        .iter()
        .any(|n| n["kind"] == "decrypt" && n["filename"] == "notes.txt" && n["outcome"] == "derived"));
    assert_eq!(get(server.addr(), "/requests").1, Value::Array(vec![]));
}

#[test]
fn event_stream_announces_requests() {
    let (d, server) = setup(Mode::Prompt);
    let mut s = TcpStream::connect(server.addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    write!(s, "GET /events?token={TOKEN} HTTP/1.1\r\nHost: localhost\r\nAccept: text/event-stream\r\n\r\n").unwrap();
    let mut reader = BufReader::new(s);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.starts_with("HTTP/1.1 200"), "{line}");
    loop {
        line.clear();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" {
            break;
        }
    }

    let job = decrypt_in_background(&d.primary);
    let mut event = None;
    let mut data = None;
    while data.is_none() {
        line.clear();
        reader.read_line(&mut line).unwrap();
        let l = line.trim_end();
        if let Some(e) = l.strip_prefix("event: ") {
            event = Some(e.to_owned());
        } else if let Some(j) = l.strip_prefix("data: ") {
            data = Some(serde_json::from_str::<Value>(j).unwrap());
        }
    }
    assert_eq!(event.as_deref(), Some("request"));
    let data = data.unwrap();
    assert_eq!(data["type"], "request");
    assert_eq!(data["filename"], "notes.txt");
    decide(server.addr(), data["id"].as_u64().unwrap(), "deny");
    assert!(job.join().unwrap().is_err());
}

#[test]
fn offers_no_way_to_start_a_flow() {
    let (_d, server) = setup(Mode::Prompt);
    for (method, path) in [
        ("POST", "/requests"),
        ("POST", "/decrypt"),
        ("POST", "/encrypt"),
        ("POST", "/refresh"),
        ("POST", "/recover"),
        ("DELETE", "/requests/1/decision"),
    ] {
        let (status, _) = request(server.addr(), method, &format!("{path}?token={TOKEN}"), Some("{}"));
        assert!(status == 404 || status == 405, "{method} {path} -> {status}");
    }
}

#[test]
fn refuses_non_loopback_bind() {
    let d = Deployment::enrolled(ApprovalPolicy::new(Mode::Prompt)).unwrap();
    let r = ConsoleServer::spawn("0.0.0.0:0".parse().unwrap(), d.secondary.gate().clone(), TOKEN.into());
    assert!(r.is_err());
}
