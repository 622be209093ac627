//! Serve the studio HTTP API over a freshly trained small checkpoint.
//!
//! `cargo run --release --example studio_server -- 127.0.0.1:8080`, then e.g.
//! `curl localhost:8080/api/checkpoints`.

use denoise_perception::harness::{
    network_model, serve, train_model, AppState, ExperimentConfig, RegisteredCheckpoint,
};
use denoise_perception::toytask::Dataset;

#[tokio::main]
async fn main() -> denoise_perception::Result<()> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8080".into());
    let cfg = ExperimentConfig::default().with_overrides(&["task.train_size=1024", "train.epochs=8"])?;
    let schedule = cfg.schedule.build()?;
    let train = Dataset::train_split(&cfg.task)?;
    let net = tokio::task::block_in_place(|| train_model(&cfg, &schedule, &train, None, |_, _| Ok(None)))?.0;
    let state = AppState::new(vec![RegisteredCheckpoint {
        id: "small".into(),
        label: "uniform, 8 epochs".into(),
        model: network_model(&cfg, net),
        config: cfg,
    }])?;
    eprintln!("listening on {addr}");
    serve(state, &addr).await
}
