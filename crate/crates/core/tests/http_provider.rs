mod common;

use std::path::PathBuf;

use common::{fixture, small_dataset, start_stub};
use semst::pipeline::{cmd_embed, ProviderKind, RunConfig};
use semst::semantics::{build_prompt, read_embeddings, EmbeddingProvider, HttpConfig, HttpEmbeddingProvider, SpotPrompt};

fn prompts(n: usize) -> Vec<SpotPrompt> {
    (0..n)
        .map(|i| build_prompt(&format!("s{i}"), vec![format!("G{i}"), format!("H{}", i % 7)]).unwrap())
        .collect()
}

fn config(url: &str, batch: usize) -> HttpConfig {
    HttpConfig {
        endpoint: url.to_string(),
        batch_size: batch,
        max_retries: 3,
        backoff_ms: 1,
        timeout_secs: 10,
        ..HttpConfig::default()
    }
}

#[test]
fn batches_requests_and_serves_warm_cache_without_requests() {
    let stub = start_stub(0, 500);
    let cache = tempfile::tempdir().unwrap();
    let prompts = prompts(70);
    let provider = HttpEmbeddingProvider::new(config(&stub.url, 32), cache.path().to_path_buf()).unwrap();
    let vectors = provider.embed(&prompts).unwrap();
    assert_eq!(stub.count(), 3);
    assert_eq!(*stub.batch_sizes.lock().unwrap(), vec![32, 32, 6]);
    for (p, v) in prompts.iter().zip(&vectors) {
        assert_eq!(v, &fixture(&p.user_text));
    }
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 70);

    let fresh = HttpEmbeddingProvider::new(config(&stub.url, 32), cache.path().to_path_buf()).unwrap();
    assert_eq!(fresh.embed(&prompts).unwrap(), vectors);
    assert_eq!(fresh.requests_issued(), 0);
    assert_eq!(stub.count(), 3);
}

#[test]
fn retries_rate_limits_then_succeeds() {
    let stub = start_stub(2, 429);
    let cache = tempfile::tempdir().unwrap();
    let provider = HttpEmbeddingProvider::new(config(&stub.url, 8), cache.path().to_path_buf()).unwrap();
    let vectors = provider.embed(&prompts(5)).unwrap();
    assert_eq!(vectors.len(), 5);
    assert_eq!(provider.requests_issued(), 3);
}

#[test]
fn persistent_server_errors_name_the_failed_spots() {
    let stub = start_stub(usize::MAX, 503);
    let cache = tempfile::tempdir().unwrap();
    let provider = HttpEmbeddingProvider::new(config(&stub.url, 4), cache.path().to_path_buf()).unwrap();
    let err = provider.embed(&prompts(3)).unwrap_err();
    assert_eq!(err.exit_code(), 5);
    match err {
        semst::Error::Provider { failed_spots, .. } => assert_eq!(failed_spots, vec!["s0", "s1", "s2"]),
        other => panic!("unexpected error {other:?}"),
    }
    assert_eq!(provider.requests_issued(), 4);
}

#[test]
fn embed_command_writes_the_stub_vectors() {
    let stub = start_stub(0, 500);
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(&tmp.path().join("data"), 6, 3);
    let cfg = RunConfig {
        expression: Some(data.join("counts.csv")),
        coords: Some(data.join("coords.csv")),
        provider: ProviderKind::Http,
        http_endpoint: stub.url.clone(),
        http_batch_size: 10,
        http_cache: Some(tmp.path().join("cache")),
        k_g: 5,
        ..RunConfig::default()
    };
    let out: PathBuf = tmp.path().join("emb.txt");
    let emb = cmd_embed(&cfg, &out).unwrap();
    assert_eq!(stub.count(), 4);
    let prepared = semst::pipeline::prepare(&cfg).unwrap();
    let back = read_embeddings(&out).unwrap();
    assert_eq!((&back.matrix, &back.spot_ids), (&emb.matrix, &emb.spot_ids));
    for (i, p) in prepared.prompts.iter().enumerate() {
        assert_eq!(back.matrix.row(i), fixture(&p.user_text).as_slice());
        assert_eq!(back.spot_ids[i], p.spot_id);
    }

    cmd_embed(&cfg, &tmp.path().join("again.semb")).unwrap();
    assert_eq!(stub.count(), 4);
    assert_eq!(read_embeddings(&tmp.path().join("again.semb")).unwrap().matrix, emb.matrix);
}
