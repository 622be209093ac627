//! Trace a trained model and estimate its statistics profile at several
//! sampling-step counts.

use denoise_perception::contribution::estimate_from_trace;
use denoise_perception::harness::{collect_trace, datasets, network_model, train_model, ExperimentConfig};

fn main() -> denoise_perception::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&["task.train_size=1024", "train.epochs=8"])?;
    let schedule = cfg.schedule.build()?;
    let (train, _) = datasets(&cfg)?;
    let (net, _) = train_model(&cfg, &schedule, &train, None, |_, _| Ok(None))?;
    let model = network_model(&cfg, net);
    let head = train.head(300);
    for steps in [25, 50, 100] {
        let trace = collect_trace(&model, &schedule, &head, steps, cfg.eval.groups, cfg.guidance, cfg.extraction()?, 0)?;
        let est = estimate_from_trace(&trace, cfg.eval.floor)?;
        let w: Vec<String> = est.profile.weights.iter().map(|w| format!("{w:.3}")).collect();
        println!("{steps:>3} steps  checkpoints {:?}", trace.timesteps());
        println!("           weights (t ascending) {}", w.join(" "));
    }
    let path = std::env::temp_dir().join("metric_trace_example.csv");
    collect_trace(&model, &schedule, &head, 100, cfg.eval.groups, cfg.guidance, cfg.extraction()?, 0)?.write_csv(&path)?;
    println!("trace written to {}", path.display());
    Ok(())
}
