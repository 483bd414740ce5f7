use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use proptest::prelude::*;
use textcav_embed::{CacheRecord, EmbedError, EmbedRequest, EmbedResponse, Embedder, EmbedderConfig, HttpEmbedder};

struct Mock {
    dim: usize,
    hits: AtomicUsize,
}

/// Deterministic, deliberately non-unit vector per text.
fn fake_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut state: u64 = 1469598103934665603;
    for b in text.bytes() {
        state = (state ^ b as u64).wrapping_mul(1099511628211);
    }
    (0..dim)
        .map(|i| {
            let x = state.wrapping_add(i as u64).wrapping_mul(6364136223846793005) >> 40;
            (x as f32 / (1u64 << 24) as f32) * 4.0 - 2.0
        })
        .collect()
}

async fn embed(State(mock): State<Arc<Mock>>, Json(req): Json<EmbedRequest>) -> Result<Json<EmbedResponse>, StatusCode> {
    mock.hits.fetch_add(1, Ordering::SeqCst);
    if req.model_id != "mock-clip" {
        return Err(StatusCode::BAD_REQUEST);
    }
    Ok(Json(EmbedResponse {
        model_id: req.model_id,
        dim: mock.dim,
        embeddings: req.texts.iter().map(|t| fake_embedding(t, mock.dim)).collect(),
    }))
}

fn spawn_mock(dim: usize) -> (String, Arc<Mock>) {
    let mock = Arc::new(Mock {
        dim,
        hits: AtomicUsize::new(0),
    });
    let state = mock.clone();
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/embed", post(embed)).with_state(state);
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), mock)
}

fn client(url: &str, dim: usize, cache: &std::path::Path) -> HttpEmbedder {
    HttpEmbedder::new(
        EmbedderConfig::new("mock-clip", dim)
            .with_endpoint(url)
            .with_cache(cache.join("embeddings.jsonl")),
    )
    .unwrap()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| (*s).to_owned()).collect()
}

#[test]
fn batch_order_and_normalization() {
    let (url, mock) = spawn_mock(8);
    let dir = tempfile::tempdir().unwrap();
    let e = client(&url, 8, dir.path());
    let out = e.embed_texts(&strings(&["stripes", "mane", "savanna"])).unwrap();
    assert_eq!(out.len(), 3);
    for (v, t) in out.iter().zip(["stripes", "mane", "savanna"]) {
        let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let raw = fake_embedding(t, 8);
        let cos: f64 = raw.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
            / raw.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        assert!((cos - 1.0).abs() < 1e-6);
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn cached_texts_never_refetched() {
    let (url, mock) = spawn_mock(4);
    let dir = tempfile::tempdir().unwrap();
    let e = client(&url, 4, dir.path());
    let first = e.embed_texts(&strings(&["wheel"])).unwrap();
    let second = e.embed_texts(&strings(&["wheel"])).unwrap();
    assert_eq!(first, second);
    assert_eq!(mock.hits.load(Ordering::SeqCst), 1);
    assert_eq!(e.request_count(), 1);

    // a fresh client reads the same bits back from disk
    let reloaded = client("http://127.0.0.1:1", 4, dir.path());
    assert_eq!(reloaded.embed_texts(&strings(&["wheel"])).unwrap(), first);
    assert_eq!(reloaded.request_count(), 0);
}

#[test]
fn dim_mismatch_is_a_contract_error() {
    let (url, _) = spawn_mock(384);
    let dir = tempfile::tempdir().unwrap();
    let e = client(&url, 512, dir.path());
    assert!(matches!(e.embed_texts(&strings(&["x"])), Err(EmbedError::Contract(_))));
    assert_eq!(e.cached_len(), 0);
}

#[test]
fn unknown_model_is_rejected_with_400() {
    let (url, _) = spawn_mock(4);
    let e = HttpEmbedder::new(EmbedderConfig::new("other-model", 4).with_endpoint(url)).unwrap();
    match e.embed_texts(&strings(&["x"])) {
        Err(EmbedError::Rejected { status, .. }) => assert_eq!(status, 400),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreachable_endpoint_lists_only_missing_texts() {
    let (url, _) = spawn_mock(4);
    let dir = tempfile::tempdir().unwrap();
    client(&url, 4, dir.path()).embed_texts(&strings(&["known"])).unwrap();
    let offline = client("http://127.0.0.1:1", 4, dir.path());
    match offline.embed_texts(&strings(&["known", "new one"])) {
        Err(EmbedError::Unavailable { missing, .. }) => assert_eq!(missing, ["new one"]),
        other => panic!("{other:?}"),
    }
    assert!(offline.embed_texts(&strings(&["known"])).is_ok());
}

#[test]
fn concurrent_callers_leave_a_clean_cache() {
    let (url, _) = spawn_mock(6);
    let dir = tempfile::tempdir().unwrap();
    let e = Arc::new(client(&url, 6, dir.path()));
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let e = e.clone();
            std::thread::spawn(move || {
                for i in 0..10 {
                    e.embed_texts(&[format!("t{}", (t * 3 + i) % 20)]).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let text = std::fs::read_to_string(dir.path().join("embeddings.jsonl")).unwrap();
    let mut seen = std::collections::HashSet::new();
    for line in text.lines() {
        let rec: CacheRecord = serde_json::from_str(line).unwrap();
        assert!(seen.insert(rec.text), "duplicate record");
    }
    assert_eq!(seen.len(), e.cached_len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn embedding_distributes_over_concatenation(
        a in prop::collection::vec("[a-z]{1,6}", 1..5),
        b in prop::collection::vec("[a-z]{1,6}", 1..5),
    ) {
        let (url, _) = spawn_mock(5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let joined: Vec<String> = a.iter().chain(&b).cloned().collect();
        let whole = client(&url, 5, d1.path()).embed_texts(&joined).unwrap();
        let split = client(&url, 5, d2.path());
        let mut parts = split.embed_texts(&a).unwrap();
        parts.extend(split.embed_texts(&b).unwrap());
        prop_assert_eq!(whole, parts);
    }
}
