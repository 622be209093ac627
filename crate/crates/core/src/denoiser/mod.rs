//! Conditional denoising MLP with hand-written reverse-mode gradients.
//!
//! Input row: noisy target (3G²) ⊕ conditioning image (3G²) ⊕ condition
//! encoding ⊕ sinusoidal timestep embedding. Two SiLU hidden layers, linear
//! output of 3G² values read as ε or x₀ depending on the target kind.

mod train;

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Parameterization, Sample};
use crate::error::{Error, Result};
use crate::toytask::CONDITION_DIM;

pub use train::{
    AdamW, EpochLog, PreparedBatch, TargetKind, TrainConfig, TrainLog, Trainer, TRAIN_LOG_HEADER,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            hidden: 256,
            time_dim: 32,
            cond_dim: CONDITION_DIM,
        }
    }
}

impl ModelConfig {
    pub fn pixels(&self) -> usize {
        3 * self.grid * self.grid
    }

    pub fn input_dim(&self) -> usize {
        2 * self.pixels() + self.cond_dim + self.time_dim
    }

    pub fn output_dim(&self) -> usize {
        self.pixels()
    }

    /// `in·h + h + h·h + h + h·out + out`.
    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        i * h + h + h * h + h + h * o + o
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.hidden == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(
                "model: grid and hidden must be positive, time_dim positive and even".into(),
            ));
        }
        if self.cond_dim != CONDITION_DIM {
            return Err(Error::Config(format!(
                "model: cond_dim must be {CONDITION_DIM}"
            )));
        }
        Ok(())
    }

    /// Offsets of `[w1, b1, w2, b2, w3, b3]` in the flat parameter vector.
    fn offsets(&self) -> [usize; 7] {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        let sizes = [i * h, h, h * h, h, h * o, o];
        let mut off = [0; 7];
        for k in 0..6 {
            off[k + 1] = off[k] + sizes[k];
        }
        off
    }
}

/// Sinusoidal embedding of a timestep: `[sin(t·f_k), cos(t·f_k)]` with
/// geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * f).sin());
    }
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * f).cos());
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `C = A·B + beta·C` for row-major `A: m×k`, `B: k×n`, with optional
/// transposition of either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided extents above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct Activations {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    pub output: Vec<f64>,
}

/// One network evaluation request. `None` image or condition means dropped.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub x_t: &'a [f64],
    pub image: Option<&'a [f64]>,
    pub cond: Option<&'a [f64; CONDITION_DIM]>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: ModelConfig,
    params: Vec<f64>,
}

impl Denoiser {
    /// Weights `U(−1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let off = config.offsets();
        let mut params = vec![0.0; config.param_count()];
        let fans = [config.input_dim(), config.hidden, config.hidden];
        for (layer, fan) in fans.iter().enumerate() {
            let a = 1.0 / (*fan as f64).sqrt();
            for p in &mut params[off[2 * layer]..off[2 * layer + 1]] {
                *p = rng.random_range(-a..a);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::Shape {
                expected: vec![config.param_count()],
                actual: vec![params.len()],
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("parameters must be finite".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// The output-layer bias.
    pub fn output_bias(&self) -> &[f64] {
        let off = self.config.offsets();
        &self.params[off[5]..off[6]]
    }

    /// Writes one input row into `row`.
    pub fn encode_input(&self, input: &NetInput<'_>, row: &mut [f64]) -> Result<()> {
        let p = self.config.pixels();
        if input.x_t.len() != p || input.image.is_some_and(|i| i.len() != p) {
            return Err(Error::Shape {
                expected: vec![p],
                actual: vec![input.x_t.len(), input.image.map_or(p, <[f64]>::len)],
            });
        }
        row[..p].copy_from_slice(input.x_t);
        match input.image {
            Some(img) => row[p..2 * p].copy_from_slice(img),
            None => row[p..2 * p].fill(0.0),
        }
        let c0 = 2 * p;
        match input.cond {
            Some(c) => row[c0..c0 + CONDITION_DIM].copy_from_slice(c),
            None => row[c0..c0 + CONDITION_DIM].fill(0.0),
        }
        let e0 = c0 + self.config.cond_dim;
        row[e0..].copy_from_slice(&timestep_embedding(input.t, self.config.time_dim));
        Ok(())
    }

    /// Batched forward pass over `n` pre-encoded input rows.
    pub fn forward_rows(&self, x: &[f64], n: usize) -> Activations {
        let (i, h, o) = (self.config.input_dim(), self.config.hidden, self.config.output_dim());
        debug_assert_eq!(x.len(), n * i);
        let off = self.config.offsets();
        let p = &self.params;
        let bias_rows = |b: &[f64], width: usize| -> Vec<f64> {
            let mut m = Vec::with_capacity(n * width);
            for _ in 0..n {
                m.extend_from_slice(b);
            }
            m
        };
        let mut z1 = bias_rows(&p[off[1]..off[2]], h);
        gemm(n, i, h, x, false, &p[off[0]..off[1]], false, 1.0, &mut z1);
        let a1: Vec<f64> = z1.iter().map(|v| silu(*v)).collect();
        let mut z2 = bias_rows(&p[off[3]..off[4]], h);
        gemm(n, h, h, &a1, false, &p[off[2]..off[3]], false, 1.0, &mut z2);
        let a2: Vec<f64> = z2.iter().map(|v| silu(*v)).collect();
        let mut output = bias_rows(&p[off[5]..off[6]], o);
        gemm(n, h, o, &a2, false, &p[off[4]..off[5]], false, 1.0, &mut output);
        Activations { z1, a1, z2, a2, output }
    }

    /// Gradient of a loss with output gradient `d_out` (`n × out`).
    pub fn backward(&self, x: &[f64], n: usize, acts: &Activations, d_out: &[f64]) -> Vec<f64> {
        let (i, h, o) = (self.config.input_dim(), self.config.hidden, self.config.output_dim());
        let off = self.config.offsets();
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let col_sum = |m: &[f64], width: usize, dst: &mut [f64]| {
            for row in m.chunks_exact(width) {
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        };

        gemm(h, n, o, &acts.a2, true, d_out, false, 0.0, &mut grad[off[4]..off[5]]);
        col_sum(d_out, o, &mut grad[off[5]..off[6]]);
        let mut dz2 = vec![0.0; n * h];
        gemm(n, o, h, d_out, false, &p[off[4]..off[5]], true, 0.0, &mut dz2);
        dz2.iter_mut().zip(&acts.z2).for_each(|(d, z)| *d *= silu_grad(*z));

        gemm(h, n, h, &acts.a1, true, &dz2, false, 0.0, &mut grad[off[2]..off[3]]);
        col_sum(&dz2, h, &mut grad[off[3]..off[4]]);
        let mut dz1 = vec![0.0; n * h];
        gemm(n, h, h, &dz2, false, &p[off[2]..off[3]], true, 0.0, &mut dz1);
        dz1.iter_mut().zip(&acts.z1).for_each(|(d, z)| *d *= silu_grad(*z));

        gemm(i, n, h, x, true, &dz1, false, 0.0, &mut grad[off[0]..off[1]]);
        col_sum(&dz1, h, &mut grad[off[1]..off[2]]);
        grad
    }

    /// Evaluates a batch of requests; one output sample per request.
    pub fn predict(&self, inputs: &[NetInput<'_>]) -> Result<Vec<Sample>> {
        let d = self.config.input_dim();
        let mut x = vec![0.0; inputs.len() * d];
        for (inp, row) in inputs.iter().zip(x.chunks_exact_mut(d)) {
            self.encode_input(inp, row)?;
        }
        let acts = self.forward_rows(&x, inputs.len());
        let g = self.config.grid;
        acts.output
            .chunks_exact(self.config.output_dim())
            .map(|o| Sample::from_vec(3, g, g, o.to_vec()))
            .collect()
    }

    /// Single forward evaluation.
    pub fn forward(&self, x_t: &Sample, image: Option<&Sample>, cond: Option<&[f64; CONDITION_DIM]>, t: usize) -> Result<Sample> {
        let input = NetInput {
            x_t: x_t.as_slice(),
            image: image.map(Sample::as_slice),
            cond,
            t,
        };
        Ok(self.predict(&[input])?.remove(0))
    }

    /// Checkpoint: magic, `u32` LE header length, JSON header, `f64` LE
    /// parameters.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let header = CheckpointHeader {
            model: self.config,
            param_count: self.params.len(),
            meta: meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(8 + json.len() + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::format("checkpoint", format!("{}: {m}", path.display()));
        if buf.len() < 8 || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let body = buf.get(8 + hlen..).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&buf[8..8 + hlen])?;
        if body.len() != header.param_count * 8 {
            return Err(bad("parameter blob size disagrees with header"));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self::from_params(header.model, params)?, header.meta))
    }
}

/// Free-form provenance stored in a checkpoint header.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub target: Option<Parameterization>,
    #[serde(default)]
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    param_count: usize,
    meta: CheckpointMeta,
}
