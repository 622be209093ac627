use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::even_group_bounds;

pub const TRACE_CSV_HEADER: &str = "sample_id,group_index,timestep,metric,final_metric";

/// Per-sample perception metrics along denoising trajectories.
///
/// Columns of `checkpoint_metrics` follow the denoising direction: column 0
/// is the checkpoint in the group nearest `t = T`, the last column the one
/// nearest `t = 1`. `final_metrics` are measured on the `t = 0` output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTrace {
    total_steps: usize,
    timesteps: Vec<usize>,
    checkpoint_metrics: Vec<Vec<f64>>,
    final_metrics: Vec<f64>,
}

impl MetricTrace {
    /// `timesteps[j]` is the checkpoint of column `j`; it must fall inside
    /// group `B − 1 − j` of the even partition of `1..=total_steps`.
    pub fn new(
        total_steps: usize,
        timesteps: Vec<usize>,
        checkpoint_metrics: Vec<Vec<f64>>,
        final_metrics: Vec<f64>,
    ) -> Result<Self> {
        let groups = timesteps.len();
        if groups == 0 || groups > total_steps {
            return Err(Error::Config(format!(
                "trace needs 1..={total_steps} checkpoints, got {groups}"
            )));
        }
        if checkpoint_metrics.len() != final_metrics.len() {
            return Err(Error::Shape {
                expected: vec![final_metrics.len()],
                actual: vec![checkpoint_metrics.len()],
            });
        }
        if checkpoint_metrics.is_empty() {
            return Err(Error::Empty("metric trace"));
        }
        if let Some(row) = checkpoint_metrics.iter().find(|r| r.len() != groups) {
            return Err(Error::Shape {
                expected: vec![groups],
                actual: vec![row.len()],
            });
        }
        if checkpoint_metrics
            .iter()
            .flatten()
            .chain(&final_metrics)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("trace metrics must be finite".into()));
        }
        let bounds = even_group_bounds(total_steps, groups)?;
        for (j, t) in timesteps.iter().enumerate() {
            let g = groups - 1 - j;
            if !(*t > bounds[g] && *t <= bounds[g + 1]) {
                return Err(Error::Config(format!(
                    "checkpoint t={t} of column {j} is outside group {g} ({}..={})",
                    bounds[g] + 1,
                    bounds[g + 1]
                )));
            }
        }
        Ok(Self {
            total_steps,
            timesteps,
            checkpoint_metrics,
            final_metrics,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn sample_count(&self) -> usize {
        self.final_metrics.len()
    }

    pub fn group_count(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn checkpoint_metrics(&self) -> &[Vec<f64>] {
        &self.checkpoint_metrics
    }

    pub fn final_metrics(&self) -> &[f64] {
        &self.final_metrics
    }

    /// True when every value lies in `[0, 1]` (IoU-like metrics).
    pub fn is_bounded_unit(&self) -> bool {
        self.checkpoint_metrics
            .iter()
            .flatten()
            .chain(&self.final_metrics)
            .all(|v| (0.0..=1.0).contains(v))
    }

    /// One row per (sample, checkpoint). `group_index` is the ascending-t
    /// group the checkpoint belongs to.
    pub fn to_csv(&self) -> String {
        let b = self.group_count();
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for (i, (row, fin)) in self
            .checkpoint_metrics
            .iter()
            .zip(&self.final_metrics)
            .enumerate()
        {
            for (j, (t, m)) in self.timesteps.iter().zip(row).enumerate() {
                let _ = writeln!(out, "{i},{},{t},{m},{fin}", b - 1 - j);
            }
        }
        out
    }

    pub fn from_csv(text: &str, total_steps: usize) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == TRACE_CSV_HEADER => {}
            other => {
                return Err(Error::format(
                    "trace csv",
                    format!("expected header `{TRACE_CSV_HEADER}`, got {other:?}"),
                ))
            }
        }
        // (sample, group, t, metric, final)
        let mut rows: Vec<(usize, usize, usize, f64, f64)> = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::format("trace csv", format!("line {}: {line}", n + 2)));
            }
            let bad = |_| Error::format("trace csv", format!("line {}: {line}", n + 2));
            rows.push((
                f[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                f[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                f[4].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            ));
        }
        if rows.is_empty() {
            return Err(Error::Empty("trace csv"));
        }
        let samples = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let groups = rows.iter().map(|r| r.1).max().unwrap() + 1;
        if rows.len() != samples * groups {
            return Err(Error::format(
                "trace csv",
                format!("expected {} rows for {samples}×{groups}, got {}", samples * groups, rows.len()),
            ));
        }
        let mut timesteps = vec![None; groups];
        let mut q = vec![vec![f64::NAN; groups]; samples];
        let mut q0 = vec![None; samples];
        for (i, g, t, m, fin) in rows {
            let col = groups - 1 - g;
            match timesteps[col] {
                None => timesteps[col] = Some(t),
                Some(prev) if prev != t => {
                    return Err(Error::format(
                        "trace csv",
                        format!("group {g} has checkpoints {prev} and {t}"),
                    ))
                }
                _ => {}
            }
            q[i][col] = m;
            match q0[i] {
                None => q0[i] = Some(fin),
                Some(prev) if prev != fin => {
                    return Err(Error::format(
                        "trace csv",
                        format!("sample {i} has two final metrics"),
                    ))
                }
                _ => {}
            }
        }
        if q.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::format("trace csv", "missing (sample, group) entries"));
        }
        Self::new(
            total_steps,
            timesteps.into_iter().map(Option::unwrap).collect(),
            q,
            q0.into_iter().map(Option::unwrap).collect(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, total_steps: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, total_steps)
    }
}
