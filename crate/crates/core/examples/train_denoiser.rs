//! Train a small denoiser into a run directory, then reload it.
//!
//! Pass extra `key=value` overrides as arguments, e.g.
//! `cargo run --release --example train_denoiser -- train.strategy=prob_scaling train.profile=schedule`.

use denoise_perception::harness::{ExperimentConfig, RunPlan, RunRecord, TRAIN_LOG_FILE};

fn main() -> denoise_perception::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = ExperimentConfig::default()
        .with_overrides(&["task.train_size=1024", "task.val_size=128", "train.epochs=8", "eval.steps=50"])?
        .with_overrides(&args)?;
    let root = std::env::temp_dir().join("dperc_example_runs");
    let rec = denoise_perception::harness::run_experiment(&root, &cfg, RunPlan { evaluate: true, trace: false }, |m| {
        eprintln!("{m}")
    })?;
    let dir = rec.dir(&root);
    println!("run {} in {}", rec.run_id, dir.display());
    let log = std::fs::read_to_string(dir.join(TRAIN_LOG_FILE)).map_err(|e| denoise_perception::Error::io(&dir, e))?;
    print!("{log}");

    let back = RunRecord::load(&root, &rec.run_id)?;
    let net = back.load_model(&root)?;
    println!("reloaded {} parameters, status {:?}", net.params().len(), back.status);
    Ok(())
}
