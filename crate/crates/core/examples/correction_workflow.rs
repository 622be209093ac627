//! Negative proposals, majority voting and the correction workflow on hard scenes.

use denoise_perception::guidance::{
    majority_vote, propose_negatives, run_correction_workflow, RuleBasedAdvisor, SamplerConfig, WorkflowItem,
};
use denoise_perception::harness::{datasets, evaluate_workflow, network_model, train_model, ExperimentConfig};
use denoise_perception::toytask::Mask;

fn main() -> denoise_perception::Result<()> {
    let a = Mask::from_fn(4, 4, |y, _| y < 2);
    let b = Mask::from_fn(4, 4, |_, x| x < 2);
    let c = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
    println!("vote of three masks covers {} pixels", majority_vote(&[a, b, c])?.area());

    let cfg = ExperimentConfig::default().with_overrides(&["task.train_size=1024", "train.epochs=8"])?;
    let schedule = cfg.schedule.build()?;
    let (train, val) = datasets(&cfg)?;
    let (net, _) = train_model(&cfg, &schedule, &train, None, |_, _| Ok(None))?;
    let model = network_model(&cfg, net);
    let mut sampler = SamplerConfig::new(50, cfg.guidance);
    sampler.extraction = cfg.extraction()?;

    let hard = val.hard_subset();
    let ex = &hard.examples[0];
    let negatives: Vec<String> = propose_negatives(&ex.scene, &ex.condition, 3).iter().map(|n| n.to_string()).collect();
    println!("\"{}\" -> negatives {negatives:?}", ex.condition);
    let item = WorkflowItem { scene: &ex.scene, condition: ex.condition, truth: Some(&ex.mask), seed: 0 };
    let r = run_correction_workflow(&model, &schedule, &item, 3, &sampler, &RuleBasedAdvisor)?;
    println!("{}", serde_json::to_string_pretty(&r.provenance)?);
    println!("voted IoU {:.3}", r.iou.unwrap_or(f64::NAN));

    let report = evaluate_workflow(&model, &schedule, &hard, 3, &sampler, 0)?;
    println!(
        "{} hard scenes: plain oIoU {:.3}, workflow oIoU {:.3}",
        report.samples, report.plain_oiou, report.workflow_oiou
    );
    Ok(())
}
