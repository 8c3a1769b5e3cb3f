//! Local HTTP server standing in for a remote judge.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

/// What the mock does with one request.
#[derive(Debug, Clone)]
pub enum Reply {
    /// 200 with this JSON body.
    Json(String),
    /// Sleep, then answer with the JSON body.
    Slow(Duration, String),
    /// Drop the connection without answering.
    Hangup,
}

pub fn verdict(v: &str) -> Reply {
    Reply::Json(format!(r#"{{"verdict":"{v}"}}"#))
}

pub struct MockJudge {
    pub url: String,
    requests: Arc<AtomicUsize>,
}

impl MockJudge {
    /// Starts a server whose reply to the `n`-th request (0-based) with
    /// prompt `p` is `policy(n, p)`. Each connection is served on its own
    /// thread.
    pub fn start<F>(policy: F) -> Self
    where
        F: Fn(usize, &str) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}/judge", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        let policy = Arc::new(policy);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let counter = counter.clone();
                let policy = policy.clone();
                thread::spawn(move || serve(stream, &counter, policy.as_ref()));
            }
        });
        Self { url, requests }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn serve(mut stream: TcpStream, counter: &AtomicUsize, policy: &(dyn Fn(usize, &str) -> Reply + Send + Sync)) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap_or(0);
        }
        if line == "\r\n" {
            break;
        }
    }
    let mut body = vec![0; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let prompt = serde_json::from_slice::<serde_json::Value>(&body)
        .ok()
        .and_then(|v| v["prompt"].as_str().map(str::to_string))
        .unwrap_or_default();
    let n = counter.fetch_add(1, Ordering::SeqCst);
    let body = match policy(n, &prompt) {
        Reply::Json(b) => b,
        Reply::Slow(d, b) => {
            thread::sleep(d);
            b
        }
        Reply::Hangup => return,
    };
    let _ = write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}
