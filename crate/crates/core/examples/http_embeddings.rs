//! Embed prompts through an HTTP embedding service with batching and a disk
//! cache. Without an endpoint argument a tiny local service is started.
//!
//! cargo run --example http_embeddings -- [endpoint]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use semst::semantics::{build_prompt, EmbeddingProvider, HttpConfig, HttpEmbeddingProvider};

fn local_service() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}", listener.local_addr().expect("address"));
    std::thread::spawn(move || {
        for mut stream in listener.incoming().flatten() {
            let mut reader = BufReader::new(stream.try_clone().expect("clone"));
            let mut length = 0;
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 0 && line != "\r\n" {
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
                line.clear();
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).ok();
            let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            let data: Vec<serde_json::Value> = request["input"]
                .as_array()
                .into_iter()
                .flatten()
                .map(|t| {
                    let s = t.as_str().unwrap_or_default();
                    serde_json::json!({"embedding": [s.len() as f64, s.matches(',').count() as f64, 1.0]})
                })
                .collect();
            let text = serde_json::json!({ "data": data }).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    url
}

fn main() -> semst::Result<()> {
    let endpoint = std::env::args().nth(1).unwrap_or_else(local_service);
    let cache = std::env::temp_dir().join("semst-http-example-cache");
    let _ = std::fs::remove_dir_all(&cache);
    let config = HttpConfig {
        endpoint,
        batch_size: 4,
        ..HttpConfig::default()
    };
    let prompts: Vec<_> = (0..10)
        .map(|i| build_prompt(&format!("spot{i}"), (0..=i % 4).map(|g| format!("GENE{}", 10 * i + g)).collect()))
        .collect::<semst::Result<_>>()?;

    let provider = HttpEmbeddingProvider::new(config.clone(), cache.clone())?;
    let vectors = provider.embed(&prompts)?;
    println!("{} vectors of width {}, {} requests", vectors.len(), vectors[0].len(), provider.requests_issued());

    let again = HttpEmbeddingProvider::new(config, cache.clone())?;
    again.embed(&prompts)?;
    println!("second pass served from {}: {} requests", cache.display(), again.requests_issued());
    Ok(())
}
