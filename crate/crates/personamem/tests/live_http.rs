//! Live provider path against a local stub server speaking the chat,
//! embeddings and NLI wire formats.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};

struct Stub {
    base: String,
    requests: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Option<String>, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0;
    let mut auth = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        match k.to_ascii_lowercase().as_str() {
            "content-length" => len = v.trim().parse().ok()?,
            "authorization" => auth = Some(v.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((path, auth, serde_json::from_slice(&body).ok()?))
}

fn contradiction(p: &str, h: &str) -> f64 {
    let pair = |a: &str, b: &str| p.contains(a) && h.contains(b) || p.contains(b) && h.contains(a);
    if pair("lazy", "clean") {
        0.95
    } else {
        0.05
    }
}

fn respond(path: &str, body: &Value) -> (u16, Value) {
    match path {
        "/v1/chat/completions" => {
            let prompt = body["messages"]
                .as_array()
                .and_then(|m| m.last())
                .and_then(|m| m["content"].as_str())
                .unwrap_or("");
            let text = if prompt.contains("Persona 1:") {
                "Rationale: The habits changed over time.\n[Resolution]: I used to be lazy, but now I clean my room every day."
            } else {
                "That sounds nice."
            };
            (
                200,
                json!({"choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"prompt_tokens": 100, "completion_tokens": 10}}),
            )
        }
        "/v1/embeddings" => {
            let data: Vec<Value> = body["input"]
                .as_array()
                .unwrap()
                .iter()
                .enumerate()
                .rev()
                .map(|(i, t)| {
                    let t = t.as_str().unwrap();
                    json!({"index": i, "embedding": [t.len() as f64, t.matches(' ').count() as f64 + 1.0, 1.0]})
                })
                .collect();
            (200, json!({"data": data}))
        }
        "/nli" => {
            let results: Vec<Value> = body["pairs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|p| {
                    let c = contradiction(p["premise"].as_str().unwrap(), p["hypothesis"].as_str().unwrap());
                    json!({"entailment": (1.0 - c) / 2.0, "neutral": (1.0 - c) / 2.0, "contradiction": c})
                })
                .collect();
            (200, json!({"results": results}))
        }
        _ => (404, json!({"error": "not found"})),
    }
}

fn start_stub() -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let counter = counter.clone();
            thread::spawn(move || {
                let Some((path, auth, body)) = read_request(&mut stream) else {
                    return;
                };
                counter.fetch_add(1, Ordering::SeqCst);
                let (status, reply) = if auth.as_deref() != Some("Bearer test-key") {
                    (401, json!({"error": "unauthorized"}))
                } else {
                    respond(&path, &body)
                };
                let payload = reply.to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            });
        }
    });
    Stub { base, requests }
}

fn write_corpus(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("corpus.jsonl");
    let sessions = [
        (1, "I am so lazy on weekends.", "I am lazy.", "Same, I mostly nap."),
        (
            2,
            "I started cleaning my room every day!",
            "I clean my room every day.",
            "Wow, good for you.",
        ),
        (3, "My room is spotless now.", "I keep my room tidy.", "Keep it up."),
    ];
    let lines: Vec<String> = sessions
        .iter()
        .map(|(s, a, persona, b)| {
            json!({"dialogue_id": "live", "session": s, "turns": [
                {"speaker": "A", "text": a, "personas": [persona]},
                {"speaker": "B", "text": b},
                {"speaker": "A", "text": "What about you?"},
                {"speaker": "B", "text": "I am fine, thanks."}
            ]})
            .to_string()
        })
        .collect();
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

fn write_config(dir: &Path, base: &str, tape_mode: &str) -> std::path::PathBuf {
    let corpus = write_corpus(dir);
    let text = format!(
        r#"[run]
corpus = {corpus:?}
out_dir = {out:?}
eval_sessions = [2, 3]
workers = 2

[providers.chat]
base_url = "{base}/v1"
model = "stub-chat"
api_key_env = "PERSONAMEM_STUB_KEY"

[providers.nli]
url = "{base}/nli"
api_key_env = "PERSONAMEM_STUB_KEY"

[providers.embedding]
base_url = "{base}/v1"
model = "stub-embed"
api_key_env = "PERSONAMEM_STUB_KEY"

[retry]
max_retries = 1
base_delay_ms = 1
max_delay_ms = 2

[tape]
mode = "{tape_mode}"
path = {tape:?}
"#,
        out = dir.join("runs"),
        tape = dir.join("tape.jsonl"),
    );
    let path = dir.join(format!("{tape_mode}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_personamem"))
        .args([
            "run",
            "--config",
            config.to_str().unwrap(),
            "--setting",
            "gold",
            "--policy",
            "refine",
        ])
        .args(["--out", out.to_str().unwrap()])
        .env("PERSONAMEM_STUB_KEY", "test-key")
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn live_run_records_then_replays_offline() {
    let stub = start_stub();
    let dir = tempfile::tempdir().unwrap();

    let recorded = dir.path().join("recorded");
    let out = run(&write_config(dir.path(), &stub.base, "record"), &recorded);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let live_requests = stub.requests.load(Ordering::SeqCst);
    assert!(live_requests > 0);

    let graphs = std::fs::read_to_string(recorded.join("graphs.jsonl")).unwrap();
    assert!(graphs.contains("\"refine_pairs\":1"), "{graphs}");
    let snapshot = std::fs::read_to_string(recorded.join("memory/gold/refine/live.store.json")).unwrap();
    assert!(snapshot.contains("I used to be lazy, but now I clean my room every day."));
    let cost = std::fs::read_to_string(recorded.join("cost.csv")).unwrap();
    assert!(cost.lines().count() > 1);

    let replayed = dir.path().join("replayed");
    let out = run(&write_config(dir.path(), "http://127.0.0.1:9", "replay"), &replayed);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        stub.requests.load(Ordering::SeqCst),
        live_requests,
        "replay must not hit the network"
    );
    for file in ["metrics.csv", "graphs.jsonl", "responses.jsonl"] {
        assert_eq!(
            std::fs::read(recorded.join(file)).unwrap(),
            std::fs::read(replayed.join(file)).unwrap(),
            "{file} differs between record and replay"
        );
    }
}

#[test]
fn wrong_key_fails_with_provider_exit_code() {
    let stub = start_stub();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &stub.base, "off");
    let out = Command::new(env!("CARGO_BIN_EXE_personamem"))
        .args([
            "run",
            "--config",
            config.to_str().unwrap(),
            "--setting",
            "gold",
            "--policy",
            "none",
        ])
        .env("PERSONAMEM_STUB_KEY", "wrong")
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // authentication failures are not retried
    assert_eq!(stub.requests.load(Ordering::SeqCst), 1);
}
