//! Contribution profiles from the noise schedule and from a metric trace.

use denoise_perception::contribution::{estimate_from_trace, schedule_profile, MetricTrace};
use denoise_perception::diffusion::NoiseSchedule;
use denoise_perception::harness::trace_timesteps;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn show(name: &str, w: &[f64]) {
    let cells: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
    println!("{name:<10} {}", cells.join(" "));
}

fn main() -> denoise_perception::Result<()> {
    let schedule = NoiseSchedule::default();
    let p = schedule_profile(&schedule, 10)?;
    show("schedule", &p.weights);
    show("floored", &p.floored(0.01)?.weights);

    // A synthetic trace in which the final metric is mostly decided by the
    // snapshot taken in the noisiest group.
    let b = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut q, mut y) = (Vec::new(), Vec::new());
    for _ in 0..500 {
        let row: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        y.push((0.8 * row[0] + 0.2 * row[5] + 0.05 * rng.random_range(-1.0..1.0f64)).clamp(0.0, 1.0));
        q.push(row);
    }
    let trace = MetricTrace::new(schedule.steps(), trace_timesteps(schedule.steps(), 100, b)?, q, y)?;
    let est = estimate_from_trace(&trace, 0.01)?;
    println!("cumulative R² (noisiest group first): {:?}", est.r_squared.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>());
    show("stats", &est.profile.weights);
    println!("{}", est.profile.to_json()?);
    Ok(())
}
