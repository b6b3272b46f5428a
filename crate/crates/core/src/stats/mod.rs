// SPDX-License-Identifier: MIT OR Apache-2.0

//! Statistical kernels shared by the probes and the ablation analysis.
//!
//! Everything here is pure and allocation-light: ordinary least squares via
//! Householder QR, a one-tailed paired t-test, Benjamini–Hochberg adjustment,
//! population z-scores, and Pearson correlation. Student-t tail probabilities
//! come from [`dist`].

pub mod dist;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

/// Ordinary least squares fit. `slope` is the coefficient of the first
/// regressor; any extra columns follow it in `coefficients`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub se_slope: f64,
    pub t: f64,
    /// Two-sided p-value for the slope.
    pub p: f64,
    pub r2: f64,
    pub n: usize,
    /// Gaussian AIC with the constant dropped: `n ln(SSE/n) + 2k`.
    pub aic: f64,
    /// `[intercept, slope, extra...]`
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub df: usize,
    pub sse: f64,
}

impl RegressionResult {
    /// t statistic and two-sided p for coefficient `idx` (0 = intercept).
    pub fn coef_test(&self, idx: usize) -> (f64, f64) {
        let (t, p) = t_and_p(self.coefficients[idx], self.std_errors[idx], self.df);
        (t, p)
    }
}

/// Result of a one-tailed paired t-test (alternative: mean difference > 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p_one_tailed: f64,
    pub mean_diff: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1).
pub fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (v.len() as f64 - 1.0)).sqrt()
}

/// Standard error of the mean; zero for fewer than two values.
pub fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    sample_sd(v) / (v.len() as f64).sqrt()
}

fn t_and_p(coef: f64, se: f64, df: usize) -> (f64, f64) {
    if se > 0.0 && se.is_finite() {
        let t = coef / se;
        (t, dist::student_t_two_sided(t, df as f64))
    } else if coef == 0.0 {
        (0.0, 1.0)
    } else {
        (coef.signum() * f64::INFINITY, 0.0)
    }
}

/// Least-squares fit of `y` on an intercept, `x`, and optional extra columns.
pub fn ols(x: &[f64], y: &[f64], extra_columns: Option<&[Vec<f64>]>) -> Result<RegressionResult> {
    let n = y.len();
    if x.len() != n {
        return Err(ProbeError::Argument(format!(
            "ols: x has {} values, y has {n}",
            x.len()
        )));
    }
    let extra = extra_columns.unwrap_or(&[]);
    if let Some(bad) = extra.iter().find(|c| c.len() != n) {
        return Err(ProbeError::Argument(format!(
            "ols: extra column has {} values, y has {n}",
            bad.len()
        )));
    }
    let k = 2 + extra.len();
    if n <= k {
        return Err(ProbeError::Argument(format!(
            "ols: need more than {k} observations, got {n}"
        )));
    }
    if x.iter().chain(y).chain(extra.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(ProbeError::Argument("ols: non-finite input".into()));
    }

    // Column-major design matrix.
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
    columns.push(vec![1.0; n]);
    columns.push(x.to_vec());
    columns.extend(extra.iter().cloned());
    let norms: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let mut a = columns.clone();
    let mut qty = y.to_vec();
    let mut r = vec![vec![0.0; k]; k];
    for j in 0..k {
        let norm_below: f64 = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norms[j] == 0.0 || norm_below <= 1e-10 * norms[j] {
            return Err(ProbeError::DegenerateRegressor(format!(
                "design column {j} is constant or collinear with earlier columns"
            )));
        }
        let alpha = if a[j][j] > 0.0 { -norm_below } else { norm_below };
        let mut v: Vec<f64> = a[j][j..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|e| e * e).sum();
        let reflect = |col: &mut [f64]| {
            let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in col.iter_mut().zip(&v) {
                *c -= f * vi;
            }
        };
        for col in a.iter_mut().skip(j) {
            reflect(&mut col[j..]);
        }
        reflect(&mut qty[j..]);
        for (i, row) in r.iter_mut().enumerate().take(j + 1) {
            row[j] = a[j][i];
        }
    }

    // Back substitution for the coefficients and R^{-1} for the covariance.
    let mut coef = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|j| r[i][j] * coef[j]).sum();
        coef[i] = (qty[i] - s) / r[i][i];
    }
    let mut rinv = vec![vec![0.0; k]; k];
    for i in (0..k).rev() {
        rinv[i][i] = 1.0 / r[i][i];
        for j in i + 1..k {
            let s: f64 = (i + 1..=j).map(|l| r[i][l] * rinv[l][j]).sum();
            rinv[i][j] = -s / r[i][i];
        }
    }

    let sse: f64 = (0..n)
        .map(|i| {
            let fit: f64 = columns.iter().zip(&coef).map(|(c, b)| c[i] * b).sum();
            let e = y[i] - fit;
            e * e
        })
        .sum();
    let ybar = mean(y);
    let sst: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    let r2 = if sst > 0.0 {
        (1.0 - sse / sst).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let df = n - k;
    let sigma2 = sse / df as f64;
    let std_errors: Vec<f64> = (0..k)
        .map(|i| (sigma2 * (i..k).map(|j| rinv[i][j] * rinv[i][j]).sum::<f64>()).sqrt())
        .collect();
    let (t, p) = t_and_p(coef[1], std_errors[1], df);
    let aic = n as f64 * (sse / n as f64).ln() + 2.0 * k as f64;

    Ok(RegressionResult {
        slope: coef[1],
        intercept: coef[0],
        se_slope: std_errors[1],
        t,
        p,
        r2,
        n,
        aic,
        coefficients: coef,
        std_errors,
        df,
        sse,
    })
}

/// One-tailed paired t-test of `a − b > 0`.
///
/// Differences that are all exactly zero give `t = 0, p = 0.5`; constant
/// nonzero differences have no defined t and are rejected.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(ProbeError::Argument(format!(
            "paired t-test: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(ProbeError::Argument(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let df = n - 1;
    if d.iter().all(|v| *v == 0.0) {
        return Ok(TTestResult {
            t: 0.0,
            df,
            p_one_tailed: 0.5,
            mean_diff: 0.0,
        });
    }
    let sd = sample_sd(&d);
    if !(sd > 0.0) {
        return Err(ProbeError::DegenerateTest(
            "paired differences have zero variance".into(),
        ));
    }
    let t = m / (sd / (n as f64).sqrt());
    Ok(TTestResult {
        t,
        df,
        p_one_tailed: dist::student_t_sf(t, df as f64),
        mean_diff: m,
    })
}

/// Benjamini–Hochberg step-up adjustment; output follows input order.
pub fn bh_fdr(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ProbeError::Argument(format!("p-value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &idx) in order.iter().enumerate().rev() {
        let candidate = p[idx] * m as f64 / (rank0 + 1) as f64;
        running = running.min(candidate);
        // exact value is >= p; m·p/j can round one ulp below it
        adjusted[idx] = running.min(1.0).max(p[idx]);
    }
    Ok(adjusted)
}

/// Standardize with the population standard deviation.
pub fn zscore(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(ProbeError::Argument(format!(
            "zscore needs at least 2 values, got {}",
            v.len()
        )));
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-14 * m.abs() {
        return Err(ProbeError::DegenerateRegressor(
            "zscore of a zero-variance vector".into(),
        ));
    }
    Ok(v.iter().map(|x| (x - m) / sd).collect())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(ProbeError::Argument(format!(
            "pearson needs two equal-length vectors of length >= 2 (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(ProbeError::DegenerateRegressor(
            "pearson of a zero-variance vector".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
