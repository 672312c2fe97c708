//! Minimal HTTP/1.1 server speaking just enough of the chat completions and
//! embeddings APIs for tests. One request per connection.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use haf::backend::tokenize;
use serde_json::{json, Value};

#[derive(Default)]
pub struct Behavior {
    /// Prompt to response segments.
    pub chat: HashMap<String, Vec<(String, f64)>>,
    /// Leave logprobs out of chat replies.
    pub omit_logprobs: bool,
    /// Answer this many requests with HTTP 503 before serving normally.
    pub fail_first: usize,
    /// Expected bearer token; requests without it get 401.
    pub api_key: Option<String>,
}

pub struct MockServer {
    pub base_url: String,
    pub requests: Arc<AtomicUsize>,
    pub paths: Arc<Mutex<Vec<String>>>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    handle: Option<JoinHandle<()>>,
}

/// Hashed bag-of-words embedding; tests recompute it to get cosines.
pub fn embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 32];
    for w in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in w.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        v[(h % 32) as usize] += 1.0;
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        401 => "Unauthorized",
        404 => "Not Found",
        _ => "Service Unavailable",
    };
    let msg = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(msg.as_bytes());
    let _ = stream.flush();
}

fn chat_reply(b: &Behavior, req: &Value) -> (u16, String) {
    let prompt = req
        .pointer("/messages/0/content")
        .and_then(Value::as_str)
        .unwrap_or_default();
    let Some(segs) = b.chat.get(prompt) else {
        return (404, json!({"error": "no scripted reply"}).to_string());
    };
    let content: String = segs.iter().map(|(t, _)| t.as_str()).collect();
    let mut items = Vec::new();
    for (text, lp) in segs {
        for tok in tokenize(text) {
            items.push(json!({"token": tok, "logprob": lp, "bytes": tok.as_bytes()}));
        }
    }
    let mut choice = json!({"index": 0, "message": {"role": "assistant", "content": content}});
    if !b.omit_logprobs {
        choice["logprobs"] = json!({"content": items});
    }
    (200, json!({"choices": [choice]}).to_string())
}

fn embeddings_reply(req: &Value) -> (u16, String) {
    let inputs = req.get("input").and_then(Value::as_array).cloned().unwrap_or_default();
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "embedding": embed(t.as_str().unwrap_or(""))}))
        .collect();
    (200, json!({"data": data}).to_string())
}

fn handle(mut stream: TcpStream, b: &Behavior, counter: &AtomicUsize, paths: &Mutex<Vec<String>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).is_err() || line.is_empty() {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut len = 0usize;
    let mut auth = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).is_err() || h == "\r\n" || h.is_empty() {
            break;
        }
        let lower = h.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap_or(0);
        }
        if lower.starts_with("authorization:") {
            auth = Some(h["authorization:".len()..].trim().to_string());
        }
    }
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let n = counter.fetch_add(1, Ordering::SeqCst);
    paths.lock().unwrap().push(path.clone());
    if n < b.fail_first {
        return respond(&mut stream, 503, "{}");
    }
    if let Some(key) = &b.api_key {
        if auth.as_deref() != Some(format!("Bearer {key}").as_str()) {
            return respond(&mut stream, 401, "{}");
        }
    }
    let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, reply) = match path.as_str() {
        "/v1/chat/completions" => chat_reply(b, &req),
        "/v1/embeddings" => embeddings_reply(&req),
        _ => (404, "{}".to_string()),
    };
    respond(&mut stream, status, &reply);
}

impl MockServer {
    pub fn start(behavior: Behavior) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let paths = Arc::new(Mutex::new(Vec::new()));
        let behavior = Arc::new(behavior);
        let handle = {
            let (stop, requests, paths) = (stop.clone(), requests.clone(), paths.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let (b, r, p) = (behavior.clone(), requests.clone(), paths.clone());
                    std::thread::spawn(move || handle(stream, &b, &r, &p));
                }
            })
        };
        Self {
            base_url: format!("http://{addr}"),
            requests,
            paths,
            stop,
            addr,
            handle: Some(handle),
        }
    }

    /// Stops accepting; later connections are refused.
    pub fn shutdown(&mut self) {
        if let Some(h) = self.handle.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
