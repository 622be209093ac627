//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use denoise_perception::contribution::{
    estimate_from_trace, schedule_profile, stats_profile, ContributionProfile, MetricTrace,
};
use denoise_perception::denoiser::{ModelConfig, NetInput, PreparedBatch, Trainer};
use denoise_perception::diffusion::{
    corrected_epsilon, ddim_step, forward_diffuse, predict_eps, predict_x0, NoiseSchedule, Parameterization,
    Sample,
};
use denoise_perception::guidance::{compose_guidance, GuidanceWeights, SamplerConfig};
use denoise_perception::harness::{
    collect_trace, datasets, evaluate_workflow, network_model, run_ablation, trace_timesteps, AblationCell,
    AblationReport, EvalReport, ExperimentConfig,
};
use denoise_perception::strategy::{StrategyKind, TimestepStrategy};
use denoise_perception::toytask::TaskConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn normal(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Sample {
    let n = shape.iter().product();
    Sample::from_vec(shape[0], shape[1], shape[2], (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn scheduler_identities() -> Verdict {
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let shape = [3, 4, 4];
        let x0 = normal(&mut rng, shape);
        let x0_aug = normal(&mut rng, shape);
        let eps = normal(&mut rng, shape);
        let t = rng.random_range(1..=schedule.steps());
        let x_t = forward_diffuse(&x0, t, &eps, &schedule).unwrap();
        worst = worst.max(predict_x0(&x_t, &eps, t, &schedule).unwrap().max_abs_diff(&x0));
        worst = worst.max(predict_eps(&x_t, &x0, t, &schedule).unwrap().max_abs_diff(&eps));

        // noise re-derived for an augmented input points back at the clean target
        let x_aug = forward_diffuse(&x0_aug, t, &eps, &schedule).unwrap();
        let eps_c = corrected_epsilon(&x0, &x0_aug, &eps, t, &schedule).unwrap();
        worst = worst.max(predict_x0(&x_aug, &eps_c, t, &schedule).unwrap().max_abs_diff(&x0));
        let same = corrected_epsilon(&x0, &x0, &eps, t, &schedule).unwrap();
        worst = worst.max(same.max_abs_diff(&eps));

        // terminal step returns x̂0; exact predictions stay on the forward path
        let x0_eps = ddim_step(&x_t, &eps, Parameterization::Eps, t, 0, &schedule).unwrap();
        worst = worst.max(x0_eps.max_abs_diff(&x0));
        let x0_x0 = ddim_step(&x_t, &x0, Parameterization::X0, t, 0, &schedule).unwrap();
        worst = worst.max(x0_x0.max_abs_diff(&x0));
        if t > 1 {
            let t_prev = rng.random_range(1..t);
            let on_path = forward_diffuse(&x0, t_prev, &eps, &schedule).unwrap();
            let via_eps = ddim_step(&x_t, &eps, Parameterization::Eps, t, t_prev, &schedule).unwrap();
            let via_x0 = ddim_step(&x_t, &x0, Parameterization::X0, t, t_prev, &schedule).unwrap();
            worst = worst.max(via_eps.max_abs_diff(&on_path)).max(via_x0.max_abs_diff(&on_path));
        }
    }
    verdict(worst <= 1e-10, format!("max abs error {worst:.2e} (tol 1e-10)"))
}

/// R² of `y` on `cols` plus an intercept via modified Gram-Schmidt.
fn r_squared_oracle(cols: &[Vec<f64>], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let center = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let yc = center(y);
    let ss_tot: f64 = yc.iter().map(|v| v * v).sum();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut v = center(c);
        for q in &basis {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            basis.push(v.iter().map(|a| a / norm).collect());
        }
    }
    let explained: f64 = basis
        .iter()
        .map(|q| {
            let d: f64 = yc.iter().zip(q).map(|(a, b)| a * b).sum();
            d * d
        })
        .sum();
    explained / ss_tot
}

fn random_trace(rng: &mut ChaCha8Rng, n: usize, b: usize) -> MetricTrace {
    let timesteps = trace_timesteps(1000, 100, b).unwrap();
    let mix: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut q = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = row.iter().zip(&mix).map(|(a, w)| a * w).sum::<f64>() / mix.iter().sum::<f64>();
        y.push((s + 0.2 * rng.random_range(-1.0..1.0f64)).clamp(0.0, 1.0));
        q.push(row);
    }
    MetricTrace::new(1000, timesteps, q, y).unwrap()
}

fn stats_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, b) = (200, 10);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut bounded = true;
    for _ in 0..20 {
        let trace = random_trace(&mut rng, n, b);
        let est = estimate_from_trace(&trace, 0.01).unwrap();
        let cols: Vec<Vec<f64>> = (0..b).map(|j| trace.checkpoint_metrics().iter().map(|r| r[j]).collect()).collect();
        let mut prev = 0.0;
        for j in 1..=b {
            let r2 = r_squared_oracle(&cols[..j], trace.final_metrics());
            let inc = est.raw[b - j];
            worst = worst.max((inc - (r2 - prev)).abs());
            monotone &= inc >= 0.0;
            prev = r2;
        }
        bounded &= est.raw.iter().sum::<f64>() <= 1.0 + 1e-12;
        let p = &est.profile;
        bounded &= (p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9 && p.weights.iter().all(|w| *w >= 0.01 - 1e-12);
    }
    let timesteps = trace_timesteps(1000, 100, b).unwrap();
    let q: Vec<Vec<f64>> = (0..n).map(|_| (0..b).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let constant = MetricTrace::new(1000, timesteps.clone(), q.clone(), vec![0.5; n]).unwrap();
    let short = MetricTrace::new(1000, timesteps, q[..3 * b - 1].to_vec(), (0..3 * b - 1).map(|i| i as f64 / 40.0).collect())
        .unwrap();
    let rejects = stats_profile(&constant, 0.01).is_err() && stats_profile(&short, 0.01).is_err();
    verdict(
        worst <= 1e-9 && monotone && bounded && rejects,
        format!(
            "max increment error {worst:.2e} (tol 1e-9), non-negative {monotone}, sums bounded {bounded}, degenerate rejected {rejects}"
        ),
    )
}

fn guidance_degeneracies() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = GuidanceWeights { w_i: 1.5, w_d: 3.0, w_d_neg: 2.0 };
    let shape = [3, 4, 4];
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let [u, i, n, f] = [(); 4].map(|_| normal(&mut rng, shape));
        let plain = compose_guidance(&u, &i, None, &f, &w).unwrap();
        worst = worst.max(compose_guidance(&u, &i, Some(&i), &f, &w).unwrap().max_abs_diff(&plain));
        let text_neg = GuidanceWeights { w_d: w.w_d_neg, ..w };
        let reduced = compose_guidance(&u, &i, None, &n, &text_neg).unwrap();
        worst = worst.max(compose_guidance(&u, &i, Some(&n), &n, &w).unwrap().max_abs_diff(&reduced));

        // affine in the predictions: mixing inputs mixes outputs
        let [u2, i2, n2, f2] = [(); 4].map(|_| normal(&mut rng, shape));
        let a: f64 = rng.random_range(-2.0..2.0);
        let mix = |p: &Sample, q: &Sample| p.lincomb(a, q, 1.0 - a).unwrap();
        let left = compose_guidance(&mix(&u, &u2), &mix(&i, &i2), Some(&mix(&n, &n2)), &mix(&f, &f2), &w).unwrap();
        let right = mix(
            &compose_guidance(&u, &i, Some(&n), &f, &w).unwrap(),
            &compose_guidance(&u2, &i2, Some(&n2), &f2, &w).unwrap(),
        );
        worst = worst.max(left.max_abs_diff(&right));
    }
    let s = |v| Sample::filled(1, 1, 1, v);
    let scalar = compose_guidance(&s(0.0), &s(1.0), Some(&s(2.0)), &s(4.0), &w).unwrap().as_slice()[0];
    verdict(
        worst <= 1e-12 && (scalar - 9.5).abs() <= 1e-12,
        format!("max reduction error {worst:.2e} (tol 1e-12), scalar example {scalar}"),
    )
}

fn gradient_check() -> Verdict {
    let schedule = NoiseSchedule::default();
    let model = ModelConfig { grid: 4, hidden: 16, ..ModelConfig::default() };
    let profile = schedule_profile(&schedule, 10).unwrap().floored(0.01).unwrap();
    let strategy = TimestepStrategy::new(StrategyKind::LossScaling, schedule.steps(), Some(profile)).unwrap();
    let conds = TaskConfig::default().condition_vocabulary();
    let (d, p) = (model.input_dim(), model.pixels());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for b in 0..5u64 {
        let net = Trainer::initial_model(model, b).unwrap();
        let n = 4;
        let mut rows = vec![0.0; n * d];
        let mut targets = Vec::with_capacity(n * p);
        let mut weights = Vec::with_capacity(n);
        let mut timesteps = Vec::with_capacity(n);
        for (k, row) in rows.chunks_exact_mut(d).enumerate() {
            let x0 = Sample::from_vec(3, 4, 4, (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let eps = normal(&mut rng, [3, 4, 4]);
            let t = strategy.sample_timestep(&mut rng);
            let x_t = forward_diffuse(&x0, t, &eps, &schedule).unwrap();
            let cond = conds[rng.random_range(0..conds.len())].encode();
            let input = NetInput {
                x_t: x_t.as_slice(),
                image: (k != 1).then_some(x0.as_slice()),
                cond: (k != 2).then_some(&cond),
                t,
            };
            net.encode_input(&input, row).unwrap();
            // alternate noise and clean targets
            targets.extend_from_slice(if k % 2 == 0 { x0.as_slice() } else { eps.as_slice() });
            weights.push(strategy.loss_weight(t).unwrap());
            timesteps.push(t);
        }
        let batch = PreparedBatch { rows, targets, weights, timesteps, cond_dropped: vec![false; n], image_dropped: vec![false; n] };
        let (_, grad) = net.loss_and_grad(&batch);
        let h = 1e-5;
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.batch_loss(&batch) - minus.batch_loss(&batch)) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
            checked += 1;
        }
    }
    verdict(worst <= 1e-4, format!("max relative error {worst:.2e} over {checked} parameters in 5 batches (tol 1e-4)"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn evals<'a>(report: &'a AblationReport, label: &str) -> Vec<&'a EvalReport> {
    report.seeds.iter().filter_map(|s| report.run(label, *s).and_then(|r| r.eval())).collect()
}

fn finals(report: &AblationReport, label: &str) -> Vec<f64> {
    evals(report, label).iter().map(|e| e.final_oiou).collect()
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

fn report_line(id: u32, name: &str, v: &Verdict, secs: f64) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {status} {name}: {} [{secs:.1}s]", v.detail);
}

fn main() -> ExitCode {
    let mut all = true;
    let mut record = |id: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        report_line(id, name, &v, start.elapsed().as_secs_f64());
        all &= v.pass;
    };
    record(1, "scheduler identities", &mut scheduler_identities);
    record(2, "statistics profile oracle", &mut stats_oracle);
    record(3, "guidance degeneracies", &mut guidance_degeneracies);
    record(4, "gradient check", &mut gradient_check);

    let base = ExperimentConfig::default();
    let cell = |label: &str, set: &[&str]| AblationCell { label: label.into(), config: base.with_overrides(set).unwrap() };
    let prob = ["train.strategy=prob_scaling", "train.profile=stats"];
    let aug = |m: &str| [prob[0], prob[1], "augment.enabled=true", m].map(String::from);
    let cells = vec![
        cell("uniform", &[]),
        cell("prob_scaling", &prob),
        cell("full_x0", &aug("augment.intensity_multiplier=0").each_ref().map(String::as_str)),
        cell("full_x0.5", &aug("augment.intensity_multiplier=0.5").each_ref().map(String::as_str)),
        cell("full_x1", &aug("augment.intensity_multiplier=1").each_ref().map(String::as_str)),
    ];
    let seeds = [0, 1, 2];
    let start = Instant::now();
    let mut baseline_secs = Vec::new();
    let mut pending: Option<Instant> = None;
    let report = run_ablation(&cells, &seeds, |p| {
        use denoise_perception::harness::Progress;
        // training time of a uniform model, bounded above by the gap to the next event
        if let Some(t) = pending.take() {
            baseline_secs.push(t.elapsed().as_secs_f64());
        }
        if let Progress::Training { label: "uniform" | "baseline", .. } = p {
            pending = Some(Instant::now());
        }
        eprintln!("  {p:?}");
    })
    .expect("ablation");
    let ablation_secs = start.elapsed().as_secs_f64();

    record(5, "non-uniform statistics profile", &mut || {
        let maxima: Vec<f64> =
            report.estimates.iter().map(|e| e.weights.iter().cloned().fold(f64::MIN, f64::max)).collect();
        let slowest = baseline_secs.iter().cloned().fold(0.0, f64::max);
        verdict(
            maxima.len() == 3 && maxima.iter().all(|m| *m >= 0.3) && slowest <= 600.0,
            format!("largest group weight per seed {} (need >= 0.3), baseline training <= {slowest:.0}s", fmt(&maxima)),
        )
    });
    let uniform = finals(&report, "uniform");
    let sampling = finals(&report, "prob_scaling");
    let full: Vec<Vec<f64>> = ["full_x0", "full_x0.5", "full_x1"].iter().map(|l| finals(&report, l)).collect();
    record(6, "probability scaling beats uniform", &mut || {
        let gain = mean(&sampling) - mean(&uniform);
        verdict(
            gain >= 0.02 && ablation_secs <= 45.0 * 60.0,
            format!(
                "mean oIoU uniform {:.4} {} vs prob_scaling {:.4} {}, gain {:+.4} (need >= 0.02); ablation {:.0}s",
                mean(&uniform),
                fmt(&uniform),
                mean(&sampling),
                fmt(&sampling),
                gain,
                ablation_secs
            ),
        )
    });
    record(7, "augmentation gain and drift repair", &mut || {
        let drops = |label| evals(&report, label).iter().map(|e| e.late_drop()).collect::<Vec<_>>();
        let (d_off, d_on) = (drops("prob_scaling"), drops("full_x1"));
        let gain = mean(&full[2]) > mean(&sampling);
        let repaired = d_off.len() == 3 && d_on.iter().zip(&d_off).all(|(a, b)| a < b);
        verdict(
            gain && repaired,
            format!(
                "mean oIoU sampling-only {:.4} vs full {:.4}; late drop per seed without {} with {} (need strictly smaller)",
                mean(&sampling),
                mean(&full[2]),
                fmt(&d_off),
                fmt(&d_on)
            ),
        )
    });
    record(8, "intensity ablation", &mut || {
        let means: Vec<f64> = full.iter().map(|v| mean(v)).collect();
        verdict(means.windows(2).all(|w| w[0] <= w[1]), format!("mean oIoU at multipliers 0, 0.5, 1: {}", fmt(&means)))
    });

    let schedule = base.schedule.build().unwrap();
    let (train, val) = datasets(&base).unwrap();
    record(9, "correctional workflow on hard scenes", &mut || {
        let hard = val.hard_subset();
        let mut sampler = SamplerConfig::new(base.eval.steps, base.guidance);
        sampler.extraction = base.extraction().unwrap();
        let (mut plain, mut flow) = (Vec::new(), Vec::new());
        for seed in seeds {
            let run = report.run("full_x1", seed).expect("full run");
            let net = run.model.as_ref().expect("trained model");
            let model = network_model(&cells[4].config, (**net).clone());
            let r = evaluate_workflow(&model, &schedule, &hard, base.workflow.k, &sampler, base.eval.seed).unwrap();
            plain.push(r.plain_oiou);
            flow.push(r.workflow_oiou);
        }
        verdict(
            mean(&flow) >= mean(&plain),
            format!(
                "{} hard scenes, oIoU plain {:.4} {} vs workflow {:.4} {}",
                hard.len(),
                mean(&plain),
                fmt(&plain),
                mean(&flow),
                fmt(&flow)
            ),
        )
    });
    record(10, "sampling-step consistency", &mut || {
        let run = report.run("uniform", 0).expect("uniform run");
        let model = network_model(&base, (**run.model.as_ref().expect("trained model")).clone());
        let head = train.head(base.eval.trace_samples);
        let profiles: Vec<ContributionProfile> = [25, 50, 100]
            .iter()
            .map(|steps| {
                let trace = collect_trace(
                    &model,
                    &schedule,
                    &head,
                    *steps,
                    base.eval.groups,
                    base.guidance,
                    base.extraction().unwrap(),
                    base.eval.seed,
                )
                .unwrap();
                stats_profile(&trace, base.eval.floor).unwrap()
            })
            .collect();
        let rho: Vec<f64> = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|(a, b)| spearman(&profiles[*a].weights, &profiles[*b].weights))
            .collect();
        verdict(rho.iter().all(|r| *r >= 0.8), format!("pairwise Spearman 25/50, 25/100, 50/100: {}", fmt(&rho)))
    });
    record(11, "intermediate-step evaluation", &mut || {
        let mut ok = true;
        let mut count = 0;
        for run in &report.runs {
            if let Some(e) = run.eval() {
                let argmax = e.checkpoints.iter().map(|c| c.oiou).fold(e.final_oiou, f64::max);
                ok &= e.checkpoints.len() == base.eval.checkpoint_steps.len()
                    && e.best.oiou == argmax
                    && e.best.oiou >= e.final_oiou;
                count += 1;
            }
        }
        verdict(ok && count == report.runs.len(), format!("{count} reports expose {} checkpoints and a best >= final", base.eval.checkpoint_steps.len()))
    });

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
