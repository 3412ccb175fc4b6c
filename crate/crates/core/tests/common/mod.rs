#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

/// Vector the stub returns for one input text.
pub fn fixture(text: &str) -> Vec<f64> {
    let bytes = text.as_bytes();
    let sum: u64 = bytes.iter().map(|&b| b as u64).sum();
    let weighted: u64 = bytes.iter().enumerate().map(|(i, &b)| (i as u64 + 1) * b as u64).sum();
    vec![bytes.len() as f64, (sum % 97) as f64 + 1.0, (weighted % 89) as f64 - 44.5, 0.25]
}

/// Local embedding service answering `POST /embed`.
pub struct Stub {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    pub batch_sizes: Arc<std::sync::Mutex<Vec<usize>>>,
}

impl Stub {
    pub fn count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Starts a stub whose first `failures` responses carry `fail_status`.
pub fn start_stub(failures: usize, fail_status: u16) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let batch_sizes = Arc::new(std::sync::Mutex::new(Vec::new()));
    let (count, sizes) = (Arc::clone(&requests), Arc::clone(&batch_sizes));
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            let mut line = String::new();
            loop {
                line.clear();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; length];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let seen = count.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = if seen < failures {
                (fail_status, json!({"error": "busy"}))
            } else {
                let request: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
                let inputs: Vec<String> = request["input"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                    .unwrap_or_default();
                sizes.lock().unwrap().push(inputs.len());
                let data: Vec<Value> = inputs.iter().map(|t| json!({"embedding": fixture(t)})).collect();
                (200, json!({"data": data}))
            };
            let text = payload.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.flush();
        }
    });
    Stub {
        url,
        requests,
        batch_sizes,
    }
}

/// Writes a small synthetic dataset into `dir` and returns the directory.
pub fn small_dataset(dir: &Path, grid: usize, seed: u64) -> std::path::PathBuf {
    let cfg = semst::synth::SynthConfig {
        grid: (grid, grid),
        genes: 60,
        seed,
        ..semst::synth::SynthConfig::default()
    };
    let data = semst::synth::generate(&cfg).expect("generate");
    semst::synth::write_synth(&data, &cfg, dir).expect("write");
    dir.to_path_buf()
}
