use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_twofe");

/// A background process killed when dropped.
struct Bg(Child);

impl Drop for Bg {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn twofe(args: &[&str]) -> Command {
    let mut c = Command::new(BIN);
    c.args(args)
        .env_remove("TWOFE_STATE")
        .env("TWOFE_PASSWORD", "hunter2hunter2")
        .env("TWOFE_RECOVERY_SECRET", "printed-recovery-sheet");
    c
}

fn ok(args: &[&str]) -> Output {
    let out = twofe(args).output().unwrap();
    assert!(
        out.status.success(),
        "twofe {args:?}: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Starts a long-running command and returns it with its first `n` stdout lines.
fn spawn(args: &[&str], n: usize) -> (Bg, Vec<String>) {
    let mut child = twofe(args).stdout(Stdio::piped()).spawn().unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let lines = (0..n)
        .map(|_| {
            let mut l = String::new();
            reader.read_line(&mut l).unwrap();
            l.trim_end().to_owned()
        })
        .collect();
    // Keep draining so the child never blocks on a full pipe.
    std::thread::spawn(move || std::io::copy(&mut reader, &mut std::io::sink()));
    (Bg(child), lines)
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

struct Setup {
    dir: TempDir,
    _cloud: Bg,
    _daemon: Bg,
    console: String,
}

impl Setup {
    fn conf(&self, name: &str) -> String {
        self.dir.path().join(format!("{name}.conf")).to_str().unwrap().to_owned()
    }
}

/// Cloud, a secondary daemon under `policy`, and an enrolled primary.
fn setup(policy: &str) -> Setup {
    let dir = TempDir::new().unwrap();
    let cloud_dir = dir.path().join("cloud");
    let (cloud, cloud_lines) = spawn(&["cloud", "--listen", "127.0.0.1:0", "--dir", cloud_dir.to_str().unwrap()], 2);
    let common = format!("account = alice\n{}\n", cloud_lines.join("\n"));
    let mut confs = Vec::new();
    for name in ["primary", "secondary"] {
        let conf = dir.path().join(format!("{name}.conf"));
        std::fs::write(
            &conf,
            format!("device_id = {name}\nlisten = {}\nstate = {name}.json\n{common}", free_addr()),
        )
        .unwrap();
        let out = ok(&["--config", conf.to_str().unwrap(), "init"]);
        confs.push((conf, String::from_utf8(out.stdout).unwrap()));
    }
    // Each device learns the other from its `init` output.
    let append = |conf: &Path, text: &str| {
        let mut f = std::fs::OpenOptions::new().append(true).open(conf).unwrap();
        f.write_all(text.as_bytes()).unwrap();
    };
    append(&confs[0].0, &confs[1].1);
    append(&confs[1].0, &confs[0].1);
    let p = confs[0].0.to_str().unwrap();
    let s = confs[1].0.to_str().unwrap();
    ok(&["--config", p, "create-account"]);
    ok(&["--config", p, "login"]);
    ok(&["--config", s, "login"]);
    let (daemon, lines) = spawn(&["--config", s, "--policy", policy, "daemon"], 2);
    let console = lines[1].strip_prefix("console ").expect("console line").to_owned();
    ok(&["--config", p, "enroll"]);
    Setup {
        dir,
        _cloud: cloud,
        _daemon: daemon,
        console,
    }
}

fn http(console: &str, method: &str, path: &str, body: &str) -> Value {
    let url = console.strip_prefix("http://").unwrap();
    let (host, query) = url.split_once('/').unwrap();
    let mut s = TcpStream::connect(host).unwrap();
    let sep = if path.contains('?') { '&' } else { '?' };
    let token = query.trim_start_matches('?').trim_start_matches("token=");
    write!(
        s,
        "{method} {path}{sep}token={token} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    assert!(raw.starts_with("HTTP/1.1 200"), "{raw}");
    serde_json::from_str(raw.split_once("\r\n\r\n").unwrap().1).unwrap()
}

fn wait_pending(console: &str) -> u64 {
    let start = Instant::now();
    loop {
        if let Some(r) = http(console, "GET", "/requests", "").as_array().and_then(|a| a.first()) {
            return r["id"].as_u64().unwrap();
        }
        assert!(start.elapsed() < Duration::from_secs(10), "no pending request");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn put_then_get_round_trips() {
    let s = setup("auto");
    let p = s.conf("primary");
    let file = s.dir.path().join("report.txt");
    let data: Vec<u8> = (0..300_000u32).map(|i| (i * 7 % 251) as u8).collect();
    std::fs::write(&file, &data).unwrap();
    let tag = String::from_utf8(ok(&["--config", &p, "put", file.to_str().unwrap()]).stdout).unwrap();
    let tag = tag.trim();
    assert_eq!(tag.len(), 32);

    let out: PathBuf = s.dir.path().join("out.bin");
    ok(&["--config", &p, "get", "report.txt", "-o", out.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out).unwrap(), data);
    assert_eq!(ok(&["--config", &p, "get", tag]).stdout, data);

    let ls = String::from_utf8(ok(&["--config", &p, "ls"]).stdout).unwrap();
    assert_eq!(ls.trim(), format!("report.txt\t{tag}"));

    let missing = twofe(&["--config", &p, "get", "nope.txt"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(21));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error [name-not-found]"));
}

#[test]
fn get_denied_at_the_console_exits_policy_denied() {
    let s = setup("prompt");
    let p = s.conf("primary");
    let file = s.dir.path().join("secret.txt");
    std::fs::write(&file, b"the eagle lands at noon").unwrap();
    ok(&["--config", &p, "put", file.to_str().unwrap()]);

    let get = Bg(twofe(&["--config", &p, "get", "secret.txt"]).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap());
    let id = wait_pending(&s.console);
    let decided = http(&s.console, "POST", &format!("/requests/{id}/decision"), "{\"decision\":\"deny\"}");
    assert_eq!(decided["decision"], "denied");
    let mut get = get;
    let status = get.0.wait().unwrap();
    let mut err = String::new();
    get.0.stderr.take().unwrap().read_to_string(&mut err).unwrap();
    assert_eq!(status.code(), Some(5), "{err}");
    assert!(err.starts_with("error [policy-denied]"), "{err}");

    let get = Bg(twofe(&["--config", &p, "get", "secret.txt"]).stdout(Stdio::piped()).spawn().unwrap());
    let id = wait_pending(&s.console);
    http(&s.console, "POST", &format!("/requests/{id}/decision"), "{\"decision\":\"approve\"}");
    let mut get = get;
    let mut out = Vec::new();
    get.0.stdout.take().unwrap().read_to_end(&mut out).unwrap();
    assert!(get.0.wait().unwrap().success());
    assert_eq!(out, b"the eagle lands at noon");
}

#[test]
fn bench_prints_records_then_a_table() {
    let out = ok(&["bench", "--sizes", "1000,20000", "--reps", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let (records, table): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with('{'));
    assert!(!records.is_empty());
    let mut kinds = std::collections::BTreeSet::new();
    for r in &records {
        let v: Value = serde_json::from_str(r).unwrap();
        kinds.insert(v["record"].as_str().unwrap().to_owned());
    }
    assert!(kinds.contains("sample") && kinds.contains("slope"), "{kinds:?}");
    assert!(table.iter().any(|l| l.starts_with("messages: encrypt 5")), "{text}");
}

#[test]
fn scenario_prints_verdict_lines() {
    let out = ok(&["scenario", "stolen-primary"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 2);
    for l in text.lines() {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 3, "{l}");
        assert_eq!(cols[0], "stolen-primary");
        assert_eq!(cols[2], "pass");
    }
    let unknown = twofe(&["scenario", "nope"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(twofe(&["frobnicate"]).output().unwrap().status.code(), Some(64));
    assert_eq!(twofe(&["--policy", "sometimes", "ls"]).output().unwrap().status.code(), Some(64));
}
