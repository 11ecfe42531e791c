//! Minimal HTTP/1.1 server for exercising the remote provider.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::Value;

#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

type Handler = dyn Fn(usize, &Recorded) -> (u16, String) + Send + Sync;

pub struct MockServer {
    pub base_url: String,
    requests: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    /// Serves every request with `handler(index, request)`, where `index`
    /// counts requests from zero.
    pub fn start(
        handler: impl Fn(usize, &Recorded) -> (u16, String) + Send + Sync + 'static,
    ) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let log = log.clone();
                let handler = handler.clone();
                thread::spawn(move || serve(stream, &log, handler.as_ref()));
            }
        });
        Self { base_url, requests }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<Recorded>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or_default()
        .to_string();
    let mut length = 0;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
            break;
        }
        if let Some((name, value)) = line.trim_end().split_once(':') {
            let value = value.trim().to_string();
            match name.to_ascii_lowercase().as_str() {
                "content-length" => length = value.parse().unwrap_or(0),
                "authorization" => authorization = Some(value),
                _ => {}
            }
        }
    }
    let mut body = vec![0; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let recorded = Recorded {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    };
    let index = {
        let mut log = log.lock().unwrap();
        log.push(recorded.clone());
        log.len() - 1
    };
    let (status, payload) = handler(index, &recorded);
    let response = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let mut stream = stream;
    let _ = stream.write_all(response.as_bytes());
}

/// Chat-completions body whose generated tokens carry the given top
/// alternatives, one list per position.
pub fn chat_logprobs(positions: &[(&str, &[(&str, f64)])]) -> String {
    let content: Vec<Value> = positions
        .iter()
        .map(|(token, alts)| {
            serde_json::json!({
                "token": token,
                "logprob": alts.iter().find(|a| a.0 == *token).map_or(0.0, |a| a.1),
                "top_logprobs": alts
                    .iter()
                    .map(|(t, l)| serde_json::json!({"token": t, "logprob": l}))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    let text: String = positions.iter().map(|p| p.0).collect();
    serde_json::json!({
        "choices": [{
            "message": {"role": "assistant", "content": text},
            "logprobs": {"content": content},
        }]
    })
    .to_string()
}

/// Chat-completions body with plain sampled answers and no logprobs.
pub fn chat_samples(answers: &[&str]) -> String {
    let choices: Vec<Value> = answers
        .iter()
        .map(|a| serde_json::json!({"message": {"role": "assistant", "content": a}}))
        .collect();
    serde_json::json!({ "choices": choices }).to_string()
}
