use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use denoise_perception::contribution::{estimate_from_trace, schedule_profile, MetricTrace};
use denoise_perception::guidance::SamplerConfig;
use denoise_perception::harness::{
    collect_trace, datasets, evaluate_config, evaluate_workflow, network_model, run_ablation, run_experiment,
    AblationSpec, ExperimentConfig, RegisteredCheckpoint, RunPlan, RunRecord, RunStatus, REPORT_FILE, TRACE_FILE,
};
use denoise_perception::toytask::Dataset;
use denoise_perception::{Error, Result};

#[derive(Parser)]
#[command(name = "dperc", about = "Perception-aligned diffusion training on a synthetic referring task")]
struct Cli {
    /// Experiment config JSON (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dot-path override, e.g. `--set train.strategy=prob_scaling`.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Directory holding run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and validation splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model into a new run directory.
    Train {
        #[arg(long)]
        eval: bool,
        #[arg(long)]
        trace: bool,
    },
    /// Collect a metric trace for a run.
    Trace {
        run: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate a contribution profile from a trace, or from the schedule.
    Estimate {
        /// Trace CSV; defaults to the run's trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        run: Option<String>,
        /// Use the noise schedule instead of metric statistics.
        #[arg(long)]
        schedule: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a run on the validation split.
    Eval {
        run: String,
        /// Restrict to scenes with at least two attribute-sharing distractors.
        #[arg(long)]
        hard: bool,
    },
    /// Train and evaluate an ablation grid.
    Ablate {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare plain guidance with the correction workflow for a run.
    Workflow {
        run: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Serve the studio API over complete runs.
    Serve {
        /// Runs to expose; all complete runs when omitted.
        #[arg(long = "run")]
        run_ids: Vec<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Small end-to-end pass: train, evaluate, trace and estimate.
    Demo,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&cli.overrides)
}

fn run_config(cli: &Cli, run: &str) -> Result<(RunRecord, ExperimentConfig)> {
    let rec = RunRecord::load(&cli.runs, run)?;
    let cfg = rec.config(&cli.runs)?.with_overrides(&cli.overrides)?;
    Ok((rec, cfg))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { out } => {
            let cfg = config(cli)?;
            let (train, val) = datasets(&cfg)?;
            train.save(&out.join("train"))?;
            val.save(&out.join("val"))?;
            eprintln!("wrote {} train and {} val scenes to {}", train.len(), val.len(), out.display());
            Ok(())
        }
        Command::Train { eval, trace } => {
            let cfg = config(cli)?;
            let plan = RunPlan { evaluate: *eval, trace: *trace };
            let rec = run_experiment(&cli.runs, &cfg, plan, |m| eprintln!("{m}"))?;
            println!("{}", rec.run_id);
            Ok(())
        }
        Command::Trace { run, steps, out } => {
            let (mut rec, cfg) = run_config(cli, run)?;
            let schedule = cfg.schedule.build()?;
            let model = network_model(&cfg, rec.load_model(&cli.runs)?);
            let (train, _) = datasets(&cfg)?;
            let trace = collect_trace(
                &model,
                &schedule,
                &train.head(cfg.eval.trace_samples),
                steps.unwrap_or(cfg.eval.trace_steps),
                cfg.eval.groups,
                cfg.guidance,
                cfg.extraction()?,
                cfg.eval.seed,
            )?;
            match out {
                Some(p) => trace.write_csv(p)?,
                None => {
                    let name = match steps {
                        Some(s) => format!("trace_{s}.csv"),
                        None => TRACE_FILE.to_string(),
                    };
                    trace.write_csv(&rec.dir(&cli.runs).join(&name))?;
                    if !rec.traces.contains(&name) {
                        rec.traces.push(name);
                        rec.save(&cli.runs)?;
                    }
                }
            }
            Ok(())
        }
        Command::Estimate { trace, run, schedule, out } => {
            let cfg = match run {
                Some(r) => run_config(cli, r)?.1,
                None => config(cli)?,
            };
            let profile = if *schedule {
                schedule_profile(&cfg.schedule.build()?, cfg.eval.groups)?.floored(cfg.eval.floor)?
            } else {
                let path = match (trace, run) {
                    (Some(p), _) => p.clone(),
                    (None, Some(r)) => cli.runs.join(r).join(TRACE_FILE),
                    (None, None) => return Err(Error::Config("estimate needs --trace, --run or --schedule".into())),
                };
                let est = estimate_from_trace(&MetricTrace::read_csv(&path, cfg.schedule.steps)?, cfg.eval.floor)?;
                eprintln!("cumulative R²: {:?}", est.r_squared);
                est.profile
            };
            match out {
                Some(p) => profile.write_json(p),
                None => {
                    println!("{}", profile.to_json()?);
                    Ok(())
                }
            }
        }
        Command::Eval { run, hard } => {
            let (mut rec, cfg) = run_config(cli, run)?;
            let schedule = cfg.schedule.build()?;
            let model = network_model(&cfg, rec.load_model(&cli.runs)?);
            let (_, mut val) = datasets(&cfg)?;
            if *hard {
                val = val.hard_subset();
            }
            let report = evaluate_config(&cfg, &model, &schedule, &val)?;
            if !*hard {
                let p = rec.dir(&cli.runs).join(REPORT_FILE);
                std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
                rec.report = Some(REPORT_FILE.into());
                rec.save(&cli.runs)?;
            }
            print_json(&report)
        }
        Command::Ablate { spec, out } => {
            let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
            let spec: AblationSpec = serde_json::from_str(&text)?;
            let report = run_ablation(&spec.cells()?, &spec.seeds, |p| eprintln!("{p:?}"))?;
            report.write(out)?;
            print!("{}", report.summary_csv());
            Ok(())
        }
        Command::Workflow { run, k } => {
            let (rec, cfg) = run_config(cli, run)?;
            let schedule = cfg.schedule.build()?;
            let model = network_model(&cfg, rec.load_model(&cli.runs)?);
            let (_, val) = datasets(&cfg)?;
            let data: Dataset = if cfg.workflow.hard_only { val.hard_subset() } else { val };
            let mut sampler = SamplerConfig::new(cfg.eval.steps, cfg.guidance);
            sampler.extraction = cfg.extraction()?;
            let report = evaluate_workflow(&model, &schedule, &data, k.unwrap_or(cfg.workflow.k), &sampler, cfg.eval.seed)?;
            print_json(&report)
        }
        Command::Serve { run_ids, bind } => {
            let records = if run_ids.is_empty() {
                RunRecord::list(&cli.runs)?
            } else {
                run_ids.iter().map(|id| RunRecord::load(&cli.runs, id)).collect::<Result<_>>()?
            };
            let checkpoints = records
                .iter()
                .filter(|r| r.status == RunStatus::Complete && r.checkpoint.is_some())
                .map(|r| {
                    let cfg = r.config(&cli.runs)?;
                    Ok(RegisteredCheckpoint {
                        id: r.run_id.clone(),
                        label: format!("{:?} seed {}", cfg.train.strategy, r.seed),
                        model: network_model(&cfg, r.load_model(&cli.runs)?),
                        config: cfg,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let state = denoise_perception::harness::AppState::new(checkpoints)?;
            eprintln!("listening on {bind}");
            tokio::runtime::Runtime::new()
                .map_err(|e| Error::io(Path::new("tokio runtime"), e))?
                .block_on(denoise_perception::harness::serve(state, bind))
        }
        Command::Demo => demo(cli),
    }
}

fn demo(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?.with_overrides(&[
        "task.train_size=512",
        "task.val_size=64",
        "train.epochs=5",
        "eval.trace_samples=200",
        "eval.steps=50",
        "eval.checkpoint_steps=[1,10,25,40,50]",
        "eval.trace_steps=50",
    ])?;
    let rec = run_experiment(&cli.runs, &cfg, RunPlan { evaluate: true, trace: true }, |m| eprintln!("{m}"))?;
    let dir = rec.dir(&cli.runs);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join(REPORT_FILE)).map_err(|e| Error::io(&dir.join(REPORT_FILE), e))?,
    )?;
    let est = estimate_from_trace(&MetricTrace::read_csv(&dir.join(TRACE_FILE), cfg.schedule.steps)?, cfg.eval.floor)?;
    println!("run {}", rec.run_id);
    println!("final oIoU {}", report["final_oiou"]);
    println!("stats weights {:?}", est.profile.weights.iter().map(|w| (w * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    Ok(())
}
