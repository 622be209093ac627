//! Guided DDIM sampling with intermediate snapshots, with and without a
//! correctional negative condition.

use denoise_perception::guidance::{propose_negatives, sample_trajectory, SamplerConfig, TrajectoryRequest};
use denoise_perception::harness::{datasets, network_model, train_model, ExperimentConfig};

fn main() -> denoise_perception::Result<()> {
    let cfg = ExperimentConfig::default().with_overrides(&["task.train_size=1024", "train.epochs=8"])?;
    let schedule = cfg.schedule.build()?;
    let (train, val) = datasets(&cfg)?;
    eprintln!("training on {} scenes", train.len());
    let (net, _) = train_model(&cfg, &schedule, &train, None, |_, _| Ok(None))?;
    let model = network_model(&cfg, net);

    let mut sampler = SamplerConfig::new(100, cfg.guidance).at_step_indices(schedule.steps(), &[2, 20, 40, 60, 80, 100])?;
    sampler.extraction = cfg.extraction()?;
    let ex = val.hard_subset().examples.into_iter().next().expect("a hard scene");
    println!("scene {} referring to \"{}\"", ex.seed, ex.condition);
    let request = TrajectoryRequest { image: &ex.scene.image, condition: ex.condition, negative: None, truth: Some(&ex.mask), seed: 1 };
    let plain = sample_trajectory(&model, &schedule, &request, &sampler)?;
    for c in &plain.checkpoints {
        println!("  step {:>3} t={:>4} IoU {:.3}", c.step, c.t, c.iou.unwrap_or(f64::NAN));
    }
    println!("  final IoU {:.3}", plain.final_iou.unwrap_or(f64::NAN));

    if let Some(neg) = propose_negatives(&ex.scene, &ex.condition, 1).first() {
        let corrected = sample_trajectory(&model, &schedule, &TrajectoryRequest { negative: Some(*neg), ..request }, &sampler)?;
        println!("with negative \"{neg}\": final IoU {:.3}", corrected.final_iou.unwrap_or(f64::NAN));
    }
    Ok(())
}
