use crate::error::{Error, Result};

/// Ridge damping added to the diagonal of the centered Gram matrix.
pub const RIDGE_LAMBDA: f64 = 1e-8;

/// Least-squares fit with intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    /// `[intercept, slope_1, …, slope_p]`.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
}

impl RegressionFit {
    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.coefficients[1..]
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept() + row.iter().zip(self.slopes()).map(|(x, b)| x * b).sum::<f64>()
    }
}

/// Ordinary least squares of `y` on the rows of `x` plus an intercept.
///
/// Solves the centered normal equations `(XᵀX + λI)β = Xᵀy` by Cholesky.
/// Summation always runs in row order, so results depend only on input order.
pub fn fit_linear_regression(x: &[Vec<f64>], y: &[f64]) -> Result<RegressionFit> {
    let n = y.len();
    if x.len() != n {
        return Err(Error::Shape {
            expected: vec![n],
            actual: vec![x.len()],
        });
    }
    let p = x.first().map_or(0, Vec::len);
    if n <= p + 1 {
        return Err(Error::Underdetermined {
            samples: n,
            regressors: p,
        });
    }
    if let Some(row) = x.iter().find(|r| r.len() != p) {
        return Err(Error::Shape {
            expected: vec![p],
            actual: vec![row.len()],
        });
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Config("regression inputs must be finite".into()));
    }

    let nf = n as f64;
    let y_mean = y.iter().sum::<f64>() / nf;
    let ss_tot: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
    let y_scale = y.iter().map(|v| v * v).sum::<f64>() / nf;
    if ss_tot <= 1e-24 * nf * (1.0 + y_scale) {
        return Err(Error::DegenerateTarget);
    }

    let mut x_mean = vec![0.0; p];
    for row in x {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    x_mean.iter_mut().for_each(|m| *m /= nf);

    let mut gram = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut centered = vec![0.0; p];
    for (row, yv) in x.iter().zip(y) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&x_mean) {
            *c = v - m;
        }
        let yc = yv - y_mean;
        for i in 0..p {
            xty[i] += centered[i] * yc;
            for j in 0..=i {
                gram[i * p + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += RIDGE_LAMBDA;
        for j in 0..i {
            gram[j * p + i] = gram[i * p + j];
        }
    }

    let slopes = cholesky_solve(&mut gram, &xty, p)?;
    let intercept = y_mean - slopes.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    let mut coefficients = Vec::with_capacity(p + 1);
    coefficients.push(intercept);
    coefficients.extend_from_slice(&slopes);
    let mut fit = RegressionFit {
        coefficients,
        r_squared: 0.0,
    };

    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(row, yv)| {
            let r = yv - fit.predict(row);
            r * r
        })
        .sum();
    fit.r_squared = (1.0 - ss_res / ss_tot).clamp(0.0, 1.0);
    Ok(fit)
}

/// In-place Cholesky factorization of a symmetric positive-definite `p × p`
/// matrix followed by forward/back substitution.
fn cholesky_solve(a: &mut [f64], b: &[f64], p: usize) -> Result<Vec<f64>> {
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Consistency(format!(
                "Gram matrix not positive definite at pivot {j}"
            )));
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in (j + 1)..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * p + k] * z[k];
        }
        z[i] = s / a[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in (i + 1)..p {
            s -= a[k * p + i] * x[k];
        }
        x[i] = s / a[i * p + i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_line() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64 + 1.0).collect();
        let fit = fit_linear_regression(&x, &y).unwrap();
        assert!((fit.slopes()[0] - 2.0).abs() < 1e-8);
        assert!((fit.intercept() - 1.0).abs() < 1e-8);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_explains_nothing() {
        let x: Vec<Vec<f64>> = (0..20).map(|_| vec![0.0]).collect();
        let y: Vec<f64> = (0..20).map(|i| ((i * 7919) % 13) as f64).collect();
        let fit = fit_linear_regression(&x, &y).unwrap();
        assert_eq!(fit.r_squared, 0.0);
    }

    /// `x_i = sin(i)`, noise from a fixed LCG mapped to N(0, 0.1²) via
    /// Box-Muller. The expected R² was computed with statsmodels OLS on the
    /// identical sequence (see `lcg_noise`).
    #[test]
    fn matches_statsmodels_reference() {
        let (x, y) = reference_data();
        let fit = fit_linear_regression(&x, &y).unwrap();
        assert!(
            (fit.r_squared - STATSMODELS_R2).abs() < 1e-6,
            "r2 = {}",
            fit.r_squared
        );
        assert!((fit.slopes()[0] - STATSMODELS_SLOPE).abs() < 1e-6);
        assert!((fit.intercept() - STATSMODELS_INTERCEPT).abs() < 1e-6);
    }

    const STATSMODELS_R2: f64 = 0.9314478716539027;
    const STATSMODELS_SLOPE: f64 = 0.5034198509599535;
    const STATSMODELS_INTERCEPT: f64 = 0.000594196464453992;

    fn lcg_noise(n: usize) -> Vec<f64> {
        let mut state: u64 = 12345;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        };
        (0..n)
            .map(|_| {
                let u1 = next();
                let u2 = next();
                0.1 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    fn reference_data() -> (Vec<Vec<f64>>, Vec<f64>) {
        let noise = lcg_noise(1000);
        let x: Vec<Vec<f64>> = (0..1000).map(|i| vec![(i as f64).sin()]).collect();
        let y = x.iter().zip(&noise).map(|(r, e)| 0.5 * r[0] + e).collect();
        (x, y)
    }

    #[test]
    fn degenerate_and_underdetermined() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        assert!(matches!(
            fit_linear_regression(&x, &[0.1; 5]),
            Err(Error::DegenerateTarget)
        ));
        let x: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 1.0]).collect();
        assert!(matches!(
            fit_linear_regression(&x, &[1.0, 2.0, 0.0]),
            Err(Error::Underdetermined { .. })
        ));
    }

    #[test]
    fn collinear_columns_survive() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..30).map(|i| (i as f64).sqrt()).collect();
        let fit = fit_linear_regression(&x, &y).unwrap();
        let single = fit_linear_regression(
            &x.iter().map(|r| vec![r[0]]).collect::<Vec<_>>(),
            &y,
        )
        .unwrap();
        assert!((fit.r_squared - single.r_squared).abs() < 1e-9);
    }
}
