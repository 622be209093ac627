use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment, AugmentationSpec};
use crate::diffusion::{corrected_epsilon, forward_diffuse, NoiseSchedule, Parameterization, Sample};
use crate::error::{Error, Result};
use crate::strategy::{StrategyKind, TimestepStrategy};
use crate::toytask::{derive_seed, Dataset, Example};

use super::{Denoiser, NetInput};

pub const TRAIN_LOG_HEADER: &str = "epoch,step,loss,val_oiou";

/// What the network is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Eps,
    /// Noise re-derived so that the implied clean target is the
    /// un-augmented one.
    EpsCorrected,
    X0,
}

impl TargetKind {
    pub fn parameterization(self) -> Parameterization {
        match self {
            TargetKind::Eps | TargetKind::EpsCorrected => Parameterization::Eps,
            TargetKind::X0 => Parameterization::X0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub target_kind: TargetKind,
    pub strategy: StrategyKind,
    /// `schedule`, `stats` (estimated from a uniform baseline trained with
    /// the same seed) or a path to a profile JSON. Required unless
    /// `strategy` is uniform.
    pub profile: Option<String>,
    pub cond_drop_prob: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_kind: TargetKind::X0,
            strategy: StrategyKind::Uniform,
            profile: None,
            cond_drop_prob: 0.1,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config("train: cond_drop_prob must lie in [0, 1]".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train: learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train: weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            *p -= self.lr * (update + self.weight_decay * *p);
        }
    }
}

/// Network inputs, regression targets and loss weights of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub rows: Vec<f64>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub cond_dropped: Vec<bool>,
    pub image_dropped: Vec<bool>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl Denoiser {
    /// Weighted mean-squared error of a prepared batch:
    /// `(1/n)·Σ_i w_i·mean_j (out_ij − target_ij)²`.
    pub fn batch_loss(&self, batch: &PreparedBatch) -> f64 {
        let o = self.config.output_dim();
        let acts = self.forward_rows(&batch.rows, batch.len());
        weighted_mse(&acts.output, &batch.targets, &batch.weights, o)
    }

    pub fn loss_and_grad(&self, batch: &PreparedBatch) -> (f64, Vec<f64>) {
        let n = batch.len();
        let o = self.config.output_dim();
        let acts = self.forward_rows(&batch.rows, n);
        let loss = weighted_mse(&acts.output, &batch.targets, &batch.weights, o);
        let mut d_out = vec![0.0; n * o];
        for (i, w) in batch.weights.iter().enumerate() {
            let k = 2.0 * w / (n * o) as f64;
            for j in i * o..(i + 1) * o {
                d_out[j] = k * (acts.output[j] - batch.targets[j]);
            }
        }
        (loss, self.backward(&batch.rows, n, &acts, &d_out))
    }
}

fn weighted_mse(out: &[f64], target: &[f64], weights: &[f64], width: usize) -> f64 {
    let n = weights.len();
    out.chunks_exact(width)
        .zip(target.chunks_exact(width))
        .zip(weights)
        .map(|((a, b), w)| w * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / width as f64)
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub val_oiou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for e in &self.epochs {
            let val = e.val_oiou.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.step, e.loss, val);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Owns the model, optimizer and the random streams of one training run.
///
/// Each source of randomness has its own stream, so switching augmentation
/// on or off leaves timestep, noise and dropout draws unchanged.
pub struct Trainer<'a> {
    net: Denoiser,
    opt: AdamW,
    cfg: TrainConfig,
    strategy: TimestepStrategy,
    aug: AugmentationSpec,
    schedule: &'a NoiseSchedule,
    shuffle_rng: ChaCha8Rng,
    t_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    drop_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: Denoiser,
        cfg: TrainConfig,
        strategy: TimestepStrategy,
        aug: AugmentationSpec,
        schedule: &'a NoiseSchedule,
    ) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        if strategy.total_steps() != schedule.steps() {
            return Err(Error::Config(format!(
                "strategy covers {} timesteps, schedule has {}",
                strategy.total_steps(),
                schedule.steps()
            )));
        }
        let stream = |k| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, k, 0));
        Ok(Self {
            opt: AdamW::new(net.params().len(), cfg.learning_rate, cfg.weight_decay),
            net,
            shuffle_rng: stream(1),
            t_rng: stream(2),
            noise_rng: stream(3),
            drop_rng: stream(4),
            aug_rng: stream(5),
            cfg,
            strategy,
            aug,
            schedule,
        })
    }

    /// Seeded initial weights for a config (shared by every strategy so
    /// ablation cells start from the same network).
    pub fn initial_model(model: super::ModelConfig, seed: u64) -> Result<Denoiser> {
        Denoiser::init(model, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0)))
    }

    pub fn model(&self) -> &Denoiser {
        &self.net
    }

    pub fn into_model(self) -> Denoiser {
        self.net
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Draws timesteps, noise, dropout and augmentation for a batch.
    pub fn prepare(&mut self, batch: &[&Example]) -> Result<PreparedBatch> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let d = self.net.config.input_dim();
        let p = self.net.config.pixels();
        let g = self.net.config.grid;
        let total = self.schedule.steps();
        let mut out = PreparedBatch {
            rows: vec![0.0; batch.len() * d],
            targets: Vec::with_capacity(batch.len() * p),
            weights: Vec::with_capacity(batch.len()),
            timesteps: Vec::with_capacity(batch.len()),
            cond_dropped: Vec::with_capacity(batch.len()),
            image_dropped: Vec::with_capacity(batch.len()),
        };
        for (ex, row) in batch.iter().zip(out.rows.chunks_exact_mut(d)) {
            if ex.scene.grid != g {
                return Err(Error::Shape {
                    expected: vec![g],
                    actual: vec![ex.scene.grid],
                });
            }
            let x0 = ex.target_image();
            let t = self.strategy.sample_timestep(&mut self.t_rng);
            let eps_data: Vec<f64> = (0..p).map(|_| self.noise_rng.sample(StandardNormal)).collect();
            let eps = Sample::from_vec(3, g, g, eps_data)?;
            let x0_aug = if self.aug.enabled {
                augment(&x0, &ex.scene.image, &ex.mask, t, total, &self.aug, &mut self.aug_rng)?
            } else {
                x0.clone()
            };
            let x_t = forward_diffuse(&x0_aug, t, &eps, self.schedule)?;
            let target = match self.cfg.target_kind {
                TargetKind::Eps => eps,
                TargetKind::EpsCorrected => corrected_epsilon(&x0, &x0_aug, &eps, t, self.schedule)?,
                TargetKind::X0 => x0,
            };
            let drop_cond = self.drop_rng.random::<f64>() < self.cfg.cond_drop_prob;
            let drop_image = self.drop_rng.random::<f64>() < self.cfg.cond_drop_prob;
            let cond = ex.condition.encode();
            self.net.encode_input(
                &NetInput {
                    x_t: x_t.as_slice(),
                    image: (!drop_image).then(|| ex.scene.image.as_slice()),
                    cond: (!drop_cond).then_some(&cond),
                    t,
                },
                row,
            )?;
            out.targets.extend_from_slice(target.as_slice());
            out.weights.push(self.strategy.loss_weight(t)?);
            out.timesteps.push(t);
            out.cond_dropped.push(drop_cond);
            out.image_dropped.push(drop_image);
        }
        Ok(out)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self, batch: &[&Example]) -> Result<f64> {
        let prepared = self.prepare(batch)?;
        let (loss, grad) = self.net.loss_and_grad(&prepared);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step: self.opt.steps() as usize,
                loss,
            });
        }
        self.opt.update(&mut self.net.params, &grad);
        Ok(loss)
    }

    /// Runs all epochs. `validate(epoch, model)` may return a validation
    /// oIoU to log.
    pub fn train(
        &mut self,
        data: &Dataset,
        mut validate: impl FnMut(usize, &Denoiser) -> Result<Option<f64>>,
    ) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut log = TrainLog::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 1..=self.cfg.epochs {
            order.shuffle(&mut self.shuffle_rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Example> = chunk.iter().map(|i| &data.examples[*i]).collect();
                let loss = self.step(&batch).map_err(|e| match e {
                    Error::Divergence { step, loss, .. } => Error::Divergence { epoch, step, loss },
                    other => other,
                })?;
                sum += loss;
                batches += 1;
            }
            let val_oiou = validate(epoch, &self.net)?;
            log.epochs.push(EpochLog {
                epoch,
                step: self.opt.steps(),
                loss: sum / batches as f64,
                val_oiou,
            });
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::toytask::TaskConfig;

    fn tiny_task() -> TaskConfig {
        TaskConfig {
            grid: 8,
            min_radius: 1,
            max_radius: 2,
            ..TaskConfig::default()
        }
    }

    fn tiny_model(grid: usize) -> ModelConfig {
        ModelConfig {
            grid,
            hidden: 12,
            ..ModelConfig::default()
        }
    }

    fn trainer<'a>(schedule: &'a NoiseSchedule, cfg: TrainConfig, aug: AugmentationSpec, grid: usize) -> Trainer<'a> {
        let net = Trainer::initial_model(tiny_model(grid), cfg.seed).unwrap();
        let strategy = TimestepStrategy::new(StrategyKind::Uniform, schedule.steps(), None).unwrap();
        Trainer::new(net, cfg, strategy, aug, schedule).unwrap()
    }

    /// Central differences on a G=4 network over 5 random batches.
    #[test]
    fn gradient_matches_finite_differences() {
        let model = ModelConfig { grid: 4, hidden: 10, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Denoiser::init(model, &mut rng).unwrap();
        let (d, p) = (model.input_dim(), model.pixels());
        let conds = TaskConfig::default().condition_vocabulary();
        let mut worst: f64 = 0.0;
        for b in 0..5 {
            let n = 3;
            let mut rows = vec![0.0; n * d];
            for (k, row) in rows.chunks_exact_mut(d).enumerate() {
                let x_t: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                let image: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                let cond = conds[rng.random_range(0..conds.len())].encode();
                let input = NetInput {
                    x_t: &x_t,
                    image: (k != 1).then_some(&image[..]),
                    cond: (k != 2).then_some(&cond),
                    t: 1 + 300 * k + b,
                };
                net.encode_input(&input, row).unwrap();
            }
            let batch = PreparedBatch {
                rows,
                targets: (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                weights: vec![1.0, 0.5, 2.0],
                timesteps: vec![],
                cond_dropped: vec![],
                image_dropped: vec![],
            };
            let (_, grad) = net.loss_and_grad(&batch);
            for _ in 0..60 {
                let i = rng.random_range(0..net.params().len());
                let h = 1e-5;
                let mut plus = net.clone();
                plus.params_mut()[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[i] -= h;
                let fd = (plus.batch_loss(&batch) - minus.batch_loss(&batch)) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let schedule = NoiseSchedule::default();
        let data = Dataset::generate(&tiny_task(), 1, 0, 8).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, weight_decay: 0.0, batch_size: 4, ..TrainConfig::default() };
        let mut tr = trainer(&schedule, cfg, AugmentationSpec::default(), 8);
        let before = tr.model().clone();
        let batch: Vec<&Example> = data.examples.iter().take(4).collect();
        let loss = tr.step(&batch).unwrap();
        assert!(loss.is_finite());
        assert_eq!(tr.model(), &before);
    }

    #[test]
    fn corrected_eps_without_augmentation_equals_eps() {
        let schedule = NoiseSchedule::default();
        let data = Dataset::generate(&tiny_task(), 2, 0, 8).unwrap();
        let batch: Vec<&Example> = data.examples.iter().collect();
        let run = |kind| {
            let cfg = TrainConfig { target_kind: kind, batch_size: 8, ..TrainConfig::default() };
            trainer(&schedule, cfg, AugmentationSpec::default(), 8).step(&batch).unwrap()
        };
        assert_eq!(run(TargetKind::Eps), run(TargetKind::EpsCorrected));
    }

    #[test]
    fn one_epoch_is_reproducible() {
        let schedule = NoiseSchedule::default();
        let data = Dataset::generate(&tiny_task(), 4, 0, 8).unwrap();
        let run = || {
            let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
            let mut tr = trainer(&schedule, cfg, AugmentationSpec::enabled(), 8);
            let log = tr.train(&data, |_, _| Ok(None)).unwrap();
            (log.final_loss().unwrap().to_bits(), tr.into_model())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_frequency() {
        let schedule = NoiseSchedule::default();
        let data = Dataset::generate(&tiny_task(), 5, 0, 100).unwrap();
        let cfg = TrainConfig { cond_drop_prob: 0.1, ..TrainConfig::default() };
        let mut tr = trainer(&schedule, cfg, AugmentationSpec::default(), 8);
        let batch: Vec<&Example> = data.examples.iter().collect();
        let (mut cond, mut img, mut n) = (0, 0, 0);
        for _ in 0..100 {
            let b = tr.prepare(&batch).unwrap();
            cond += b.cond_dropped.iter().filter(|d| **d).count();
            img += b.image_dropped.iter().filter(|d| **d).count();
            n += b.len();
        }
        assert!((cond as f64 / n as f64 - 0.1).abs() < 0.01);
        assert!((img as f64 / n as f64 - 0.1).abs() < 0.01);
    }

    #[test]
    fn log_csv_header() {
        let log = TrainLog { epochs: vec![EpochLog { epoch: 1, step: 2, loss: 0.5, val_oiou: None }] };
        assert_eq!(log.to_csv(), "epoch,step,loss,val_oiou\n1,2,0.5,\n");
    }
}
