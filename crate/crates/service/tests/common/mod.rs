#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::routing::post;
use axum::{Json, Router};
use textcav_core::store::WorkspaceLayout;
use textcav_core::synth::{gen_world, inject_bias, BiasSpec, SyntheticWorld, WorldParams};
use textcav_core::trainer::{save_checkpoint, train_maps, TrainOutcome, TrainingConfig};
use textcav_embed::{EmbedRequest, EmbedResponse};
use textcav_service::AppState;

pub const WS: &str = "zoo";

pub fn fast_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        epochs: 30,
        batch_size: 64,
        learning_rate: 1e-2,
        seed,
        ..TrainingConfig::default()
    }
}

pub fn biased_world(seed: u64) -> SyntheticWorld {
    let world = gen_world(&WorldParams::new(seed, 32, 32, 4, 2000, 0.0)).unwrap();
    inject_bias(
        &world,
        &BiasSpec {
            target_class: "class_0".into(),
            proxy_attribute: "support_device".into(),
        },
    )
    .unwrap()
}

/// Exports a biased synthetic world into `<data>/zoo` with one trained map
/// called `main`.
pub fn fixture(data: &Path) -> (SyntheticWorld, TrainOutcome) {
    let world = biased_world(3);
    let root = data.join(WS);
    world.export(&root).unwrap();
    let layout = WorkspaceLayout::new(&root);
    let outcome = train_maps(&layout.load_workspace().unwrap(), &fast_config(0)).unwrap();
    save_checkpoint(layout.map("main"), &outcome.maps, &outcome.report).unwrap();
    (world, outcome)
}

pub async fn start(data: &Path, embedder: Option<&str>) -> (String, Arc<AppState>) {
    let state = Arc::new(AppState::load(data, embedder).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let serving = state.clone();
    tokio::spawn(async move {
        textcav_service::serve(listener, serving, std::future::pending()).await.unwrap();
    });
    (url, state)
}

/// Deterministic pseudo-embedding for a text.
pub fn fake_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut state: u64 = 1469598103934665603;
    for b in text.bytes() {
        state = (state ^ b as u64).wrapping_mul(1099511628211);
    }
    (0..dim)
        .map(|i| {
            let x = state.wrapping_add(i as u64).wrapping_mul(6364136223846793005) >> 40;
            (x as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

pub async fn start_mock_embedder(dim: usize) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    let app = Router::new().route(
        "/embed",
        post(move |Json(req): Json<EmbedRequest>| async move {
            Json(EmbedResponse {
                model_id: req.model_id,
                dim,
                embeddings: req.texts.iter().map(|t| fake_embedding(t, dim)).collect(),
            })
        }),
    );
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}
