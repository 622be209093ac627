//! Timestep-dependent corruption of clean training targets.
//!
//! Painted-mask targets get color jitter, a small rigid-plus-scale drift of
//! the painted region and rectangular erasing; scalar fields get a Gaussian
//! blur. Intensity grows linearly with `t` by default, so targets paired
//! with noisier inputs are corrupted more.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Sample;
use crate::error::{Error, Result};
use crate::toytask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensitySchedule {
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentOps {
    pub color: bool,
    pub location: bool,
    pub shape: bool,
    pub blur: bool,
}

impl Default for AugmentOps {
    fn default() -> Self {
        Self {
            color: true,
            location: true,
            shape: true,
            blur: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub enabled: bool,
    pub intensity_multiplier: f64,
    pub schedule: IntensitySchedule,
    pub ops: AugmentOps,
    pub color_max: f64,
    pub rotate_max_deg: f64,
    pub translate_max_frac: f64,
    pub scale_range: [f64; 2],
    pub erase_frac_range: [f64; 2],
    pub blur_kernel: usize,
    pub blur_sigma_max: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            intensity_multiplier: 1.0,
            schedule: IntensitySchedule::Linear,
            ops: AugmentOps::default(),
            color_max: 0.2,
            rotate_max_deg: 10.0,
            translate_max_frac: 0.05,
            scale_range: [0.95, 1.05],
            erase_frac_range: [0.01, 0.05],
            blur_kernel: 31,
            blur_sigma_max: 10.0,
        }
    }
}

impl AugmentationSpec {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.intensity_multiplier,
            self.color_max,
            self.rotate_max_deg,
            self.translate_max_frac,
            self.blur_sigma_max,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("augment: maxima must be finite and >= 0".into()));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::Config("augment: scale_range must bracket 1".into()));
        }
        let [a, b] = self.erase_frac_range;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::Config("augment: erase_frac_range must lie in [0, 1]".into()));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Config("augment: blur_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Effective intensity `s` at timestep `t`.
    pub fn intensity(&self, t: usize, total: usize) -> Result<f64> {
        if t > total {
            return Err(Error::Timestep { t, max: total });
        }
        Ok(match self.schedule {
            IntensitySchedule::Linear => self.intensity_multiplier * t as f64 / total as f64,
            IntensitySchedule::Constant => self.intensity_multiplier,
        })
    }

    fn is_identity(&self) -> bool {
        !self.enabled || self.intensity_multiplier == 0.0
    }
}

/// Sampled corruption parameters and intermediate masks of one call.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentReport {
    pub image: Sample,
    pub intensity: f64,
    pub color_magnitude: f64,
    pub rotation_deg: f64,
    pub translation: (f64, f64),
    pub scale: f64,
    /// Painted region after the location jitter, before erasing.
    pub moved_mask: Mask,
    pub erased_pixels: usize,
    pub final_mask: Mask,
}

/// Corrupts the target `x0` whose painted region is `mask`, restoring
/// vacated pixels from `scene`. Scalar fields (one channel) are blurred
/// instead.
pub fn augment<R: Rng + ?Sized>(
    x0: &Sample,
    scene: &Sample,
    mask: &Mask,
    t: usize,
    total: usize,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<Sample> {
    if x0.channels() == 1 {
        spec.intensity(t, total)?;
        if spec.is_identity() || !spec.ops.blur {
            return Ok(x0.clone());
        }
        return gaussian_blur(x0, t, total, spec, rng);
    }
    Ok(augment_report(x0, scene, mask, t, total, spec, rng)?.image)
}

pub fn augment_report<R: Rng + ?Sized>(
    x0: &Sample,
    scene: &Sample,
    mask: &Mask,
    t: usize,
    total: usize,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<AugmentReport> {
    let s = spec.intensity(t, total)?;
    x0.ensure_same_shape(scene)?;
    let (c, h, w) = (x0.channels(), x0.height(), x0.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape {
            expected: vec![h, w],
            actual: vec![mask.height(), mask.width()],
        });
    }
    let mut report = AugmentReport {
        image: x0.clone(),
        intensity: s,
        color_magnitude: 0.0,
        rotation_deg: 0.0,
        translation: (0.0, 0.0),
        scale: 1.0,
        moved_mask: mask.clone(),
        erased_pixels: 0,
        final_mask: mask.clone(),
    };
    if spec.is_identity() || mask.is_empty() {
        return Ok(report);
    }

    // painted colors after jitter, indexed like x0
    let mut painted = x0.clone();
    if spec.ops.color {
        let m = rng.random_range(0.0..=spec.color_max * s);
        report.color_magnitude = m;
        for ch in 0..c {
            let gain = 1.0 + m * rng.random_range(-1.0..=1.0);
            let offset = m * rng.random_range(-1.0..=1.0);
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) {
                        let v = (gain * x0.get(ch, y, x) + offset).clamp(-1.0, 1.0);
                        painted.set(ch, y, x, v);
                    }
                }
            }
        }
    }

    let mut out = x0.clone();
    let mut moved = mask.clone();
    if spec.ops.location {
        let rot = spec.rotate_max_deg * s;
        let theta_deg = if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 };
        let radius = spec.translate_max_frac * s * h.max(w) as f64;
        let r = if radius > 0.0 { rng.random_range(0.0..=radius) } else { 0.0 };
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (ty, tx) = (r * phi.sin(), r * phi.cos());
        let [lo, hi] = spec.scale_range;
        let scale = rng.random_range((1.0 - (1.0 - lo) * s)..=(1.0 + (hi - 1.0) * s));
        report.rotation_deg = theta_deg;
        report.translation = (ty, tx);
        report.scale = scale;

        let (cy, cx) = mask.centroid().expect("non-empty mask");
        let (sin, cos) = theta_deg.to_radians().sin_cos();
        moved = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                // inverse map of p' = c + S·R(θ)(p − c) + τ
                let dy = (y as f64 - cy - ty) / scale;
                let dx = (x as f64 - cx - tx) / scale;
                let sy = (cy + cos * dy - sin * dx).round();
                let sx = (cx + sin * dy + cos * dx).round();
                if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
                    let (sy, sx) = (sy as usize, sx as usize);
                    if mask.get(sy, sx) {
                        moved.set(y, x, true);
                        for ch in 0..c {
                            out.set(ch, y, x, painted.get(ch, sy, sx));
                        }
                    }
                }
            }
        }
        restore_vacated(&mut out, scene, mask, &moved);
    } else {
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    for ch in 0..c {
                        out.set(ch, y, x, painted.get(ch, y, x));
                    }
                }
            }
        }
    }
    report.moved_mask = moved.clone();

    let mut fin = moved.clone();
    if spec.ops.shape && !moved.is_empty() {
        let [a, b] = spec.erase_frac_range;
        let frac = if b > a { rng.random_range(a..=b) } else { a };
        let want = frac * moved.area() as f64;
        let mut quota = want.floor() as usize;
        if rng.random::<f64>() < want.fract() {
            quota += 1;
        }
        report.erased_pixels = erase_rectangles(&mut fin, quota, rng);
        restore_vacated(&mut out, scene, &moved, &fin);
    }
    report.final_mask = fin;
    report.image = out;
    Ok(report)
}

fn restore_vacated(out: &mut Sample, scene: &Sample, before: &Mask, after: &Mask) {
    for y in 0..before.height() {
        for x in 0..before.width() {
            if before.get(y, x) && !after.get(y, x) {
                for ch in 0..out.channels() {
                    out.set(ch, y, x, scene.get(ch, y, x));
                }
            }
        }
    }
}

/// Clears `quota` pixels of `mask` using random axis-aligned rectangles
/// centered on set pixels. Returns the number cleared.
fn erase_rectangles<R: Rng + ?Sized>(mask: &mut Mask, quota: usize, rng: &mut R) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let mut erased = 0;
    while erased < quota && !mask.is_empty() {
        let on: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|(y, x)| mask.get(*y, *x))
            .collect();
        let (cy, cx) = on[rng.random_range(0..on.len())];
        let side = ((quota - erased) as f64).sqrt().ceil().max(1.0) as usize;
        let rh = rng.random_range(1..=side);
        let rw = rng.random_range(1..=side);
        let y0 = cy.saturating_sub(rh / 2);
        let x0 = cx.saturating_sub(rw / 2);
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                if erased < quota && mask.get(y, x) {
                    mask.set(y, x, false);
                    erased += 1;
                }
            }
        }
    }
    erased
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`.
fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / sum).collect()
}

/// Symmetric reflection (`… 2 1 0 | 0 1 2 … n−1 | n−1 n−2 …`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur of a single-channel field with a fixed `sigma`.
/// The kernel of `kernel` taps is clipped to the field size.
pub fn gaussian_blur_with_sigma(field: &Sample, sigma: f64, kernel: usize) -> Result<Sample> {
    if field.channels() != 1 {
        return Err(Error::Shape {
            expected: vec![1, field.height(), field.width()],
            actual: field.shape().to_vec(),
        });
    }
    if sigma <= 0.0 {
        return Ok(field.clone());
    }
    let (h, w) = (field.height(), field.width());
    let half = kernel / 2;
    let blur_axis = |src: &Sample, along_rows: bool| -> Sample {
        let len = if along_rows { w } else { h };
        let r = half.min(len.saturating_sub(1));
        let taps = gaussian_taps(sigma, r);
        let mut dst = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, tap) in taps.iter().enumerate() {
                    let off = k as i64 - r as i64;
                    let v = if along_rows {
                        src.get(0, y, reflect(x as i64 + off, w))
                    } else {
                        src.get(0, reflect(y as i64 + off, h), x)
                    };
                    acc += tap * v;
                }
                dst.set(0, y, x, acc);
            }
        }
        dst
    };
    Ok(blur_axis(&blur_axis(field, true), false))
}

/// Blur with `σ ~ U[0, blur_sigma_max · s]` for the intensity `s` at `t`.
pub fn gaussian_blur<R: Rng + ?Sized>(
    field: &Sample,
    t: usize,
    total: usize,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<Sample> {
    let s = spec.intensity(t, total)?;
    let max = spec.blur_sigma_max * s;
    let sigma = if max > 0.0 { rng.random_range(0.0..=max) } else { 0.0 };
    gaussian_blur_with_sigma(field, sigma, spec.blur_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytask::{render_target, Color, Shape, ToyObject, ToyScene};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> (ToyScene, Sample) {
        let objs = vec![
            ToyObject { shape: Shape::Square, color: Color::Blue, cx: 5, cy: 5, radius: 3, z_order: 0 },
            ToyObject { shape: Shape::Disk, color: Color::Green, cx: 11, cy: 10, radius: 3, z_order: 1 },
        ];
        let s = ToyScene::from_objects(16, objs).unwrap();
        let x0 = render_target(&s.image, &s.masks[0]).unwrap();
        (s, x0)
    }

    #[test]
    fn zero_multiplier_is_identity() {
        let (s, x0) = scene();
        let spec = AugmentationSpec { intensity_multiplier: 0.0, ..AugmentationSpec::enabled() };
        let out = augment(&x0, &s.image, &s.masks[0], 900, 1000, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn vanishing_intensity_without_erasing_is_identity() {
        let (s, x0) = scene();
        let mut spec = AugmentationSpec::enabled();
        spec.ops.shape = false;
        let out = augment(&x0, &s.image, &s.masks[0], 0, 1000, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, x0);
        assert!(augment(&x0, &s.image, &s.masks[0], 1001, 1000, &spec, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn empty_mask_is_untouched() {
        let (s, _) = scene();
        let out = augment(&s.image, &s.image, &Mask::empty(16, 16), 1000, 1000, &AugmentationSpec::enabled(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, s.image);
    }

    #[test]
    fn deterministic_given_seed() {
        let (s, x0) = scene();
        let spec = AugmentationSpec::enabled();
        let run = |seed| augment(&x0, &s.image, &s.masks[0], 700, 1000, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn geometric_bounds_at_full_intensity() {
        // large object on a large grid so nearest-neighbour rounding is small
        let g = 64;
        let obj = ToyObject { shape: Shape::Square, color: Color::Red, cx: 32, cy: 32, radius: 12, z_order: 0 };
        let s = ToyScene::from_objects(g, vec![obj]).unwrap();
        let x0 = render_target(&s.image, &s.masks[0]).unwrap();
        let spec = AugmentationSpec::enabled();
        let area0 = s.masks[0].area() as f64;
        let (cy0, cx0) = s.masks[0].centroid().unwrap();
        for seed in 0..50 {
            let r = augment_report(&x0, &s.image, &s.masks[0], 1000, 1000, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (cy, cx) = r.moved_mask.centroid().unwrap();
            let shift = ((cy - cy0).powi(2) + (cx - cx0).powi(2)).sqrt();
            assert!(shift <= 0.05 * g as f64 + 0.5, "shift {shift}");
            let ratio = r.moved_mask.area() as f64 / area0;
            assert!((0.95f64.powi(2) * 0.95..=1.05f64.powi(2)).contains(&ratio), "ratio {ratio}");
            let erased = r.erased_pixels as f64 / r.moved_mask.area() as f64;
            let slack = 1.0 / r.moved_mask.area() as f64;
            assert!((0.01 - slack..=0.05 + slack).contains(&erased), "erased {erased}");
            assert_eq!(r.final_mask.area() + r.erased_pixels, r.moved_mask.area());
            assert!(r.rotation_deg.abs() <= 10.0 && (0.95..=1.05).contains(&r.scale));
        }
    }

    #[test]
    fn corruption_grows_with_t() {
        let (s, x0) = scene();
        let spec = AugmentationSpec::enabled();
        let ts: Vec<usize> = (1..=10).map(|k| k * 100).collect();
        let means: Vec<f64> = ts
            .iter()
            .map(|&t| {
                (0..1000u64)
                    .map(|seed| {
                        let out = augment(&x0, &s.image, &s.masks[0], t, 1000, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                        out.squared_distance(&x0).sqrt()
                    })
                    .sum::<f64>()
                    / 1000.0
            })
            .collect();
        // Spearman against t: ranks of the means must follow 1..10
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|a, b| means[*a].total_cmp(&means[*b]));
        let mut rank = vec![0.0; 10];
        for (r, i) in order.iter().enumerate() {
            rank[*i] = r as f64;
        }
        let d2: f64 = rank.iter().enumerate().map(|(i, r)| (i as f64 - r).powi(2)).sum();
        let rho = 1.0 - 6.0 * d2 / (10.0 * 99.0);
        assert!(rho >= 0.95, "rho {rho}, means {means:?}");
    }

    #[test]
    fn blur_identities() {
        let mut field = Sample::filled(1, 16, 16, 0.7);
        let out = gaussian_blur_with_sigma(&field, 3.0, 31).unwrap();
        assert!(out.max_abs_diff(&field) < 1e-12);
        field.set(0, 3, 4, 2.0);
        assert_eq!(gaussian_blur_with_sigma(&field, 0.0, 31).unwrap(), field);
        assert!(gaussian_blur_with_sigma(&Sample::zeros(3, 4, 4), 1.0, 31).is_err());
    }

    #[test]
    fn blur_impulse_matches_direct_gaussian() {
        let mut field = Sample::zeros(1, 64, 64);
        field.set(0, 32, 32, 1.0);
        let out = gaussian_blur_with_sigma(&field, 2.0, 31).unwrap();
        assert!((out.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mut norm = 0.0;
        for dy in -15i64..=15 {
            for dx in -15i64..=15 {
                norm += (-((dy * dy + dx * dx) as f64) / 8.0).exp();
            }
        }
        assert!((out.get(0, 32, 32) - 1.0 / norm).abs() < 1e-6);
    }

    #[test]
    fn blur_keeps_mean_on_constants() {
        let spec = AugmentationSpec::enabled();
        let field = Sample::filled(1, 16, 16, -0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in [1, 500, 1000] {
            let out = gaussian_blur(&field, t, 1000, &spec, &mut rng).unwrap();
            let mean = out.as_slice().iter().sum::<f64>() / 256.0;
            assert!((mean + 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentationSpec::default().validate().is_ok());
        assert!(AugmentationSpec { blur_kernel: 30, ..Default::default() }.validate().is_err());
        assert!(AugmentationSpec { erase_frac_range: [0.5, 0.2], ..Default::default() }.validate().is_err());
    }
}
