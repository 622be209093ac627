//! A reduced strategy ablation: uniform, probability scaling with a
//! statistics profile, and the same with target augmentation.
//!
//! `cargo run --release --example ablation_grid -- <out_dir> [seeds...]`

use denoise_perception::harness::{run_ablation, AblationSpec, CellOverrides, ExperimentConfig};

fn main() -> denoise_perception::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "ablation_out".into()));
    let seeds: Vec<u64> = args.map(|s| s.parse().expect("integer seed")).collect();
    let cell = |label: &str, set: &[&str]| CellOverrides { label: label.into(), set: set.iter().map(|s| s.to_string()).collect() };
    let spec = AblationSpec {
        base: ExperimentConfig::default().with_overrides(&[
            "task.train_size=1024",
            "task.val_size=128",
            "train.epochs=8",
            "eval.steps=50",
            "eval.checkpoint_steps=[1,10,20,30,40,50]",
            "eval.trace_samples=300",
            "eval.trace_steps=50",
        ])?,
        cells: vec![
            cell("uniform", &[]),
            cell("prob_scaling", &["train.strategy=prob_scaling", "train.profile=stats"]),
            cell("full", &["train.strategy=prob_scaling", "train.profile=stats", "augment.enabled=true"]),
        ],
        seeds: if seeds.is_empty() { vec![0] } else { seeds },
    };
    println!("{}", serde_json::to_string_pretty(&spec)?);
    let report = run_ablation(&spec.cells()?, &spec.seeds, |p| eprintln!("{p:?}"))?;
    report.write(&out)?;
    print!("{}", report.summary_csv());
    Ok(())
}
