//! Timestep laws and loss weights of the three training strategies.

use denoise_perception::contribution::schedule_profile;
use denoise_perception::diffusion::NoiseSchedule;
use denoise_perception::strategy::{StrategyKind, TimestepStrategy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> denoise_perception::Result<()> {
    let schedule = NoiseSchedule::default();
    let profile = schedule_profile(&schedule, 10)?.floored(0.01)?;
    for kind in [StrategyKind::Uniform, StrategyKind::LossScaling, StrategyKind::ProbScaling] {
        let s = TimestepStrategy::new(kind, schedule.steps(), Some(profile.clone()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            counts[(s.sample_timestep(&mut rng) - 1) / 100] += 1;
        }
        let freq: Vec<String> = counts.iter().map(|c| format!("{:.3}", *c as f64 / draws as f64)).collect();
        let weights: Vec<String> =
            [50, 250, 450, 650, 850, 950].iter().map(|t| format!("{:.2}", s.loss_weight(*t).unwrap())).collect();
        println!("{kind:?}");
        println!("  group frequency  {}", freq.join(" "));
        println!("  loss weight at t=50,250,..,950  {}", weights.join(" "));
        println!("  expected loss weight {:.6}", s.expected_loss_weight());
    }
    Ok(())
}
