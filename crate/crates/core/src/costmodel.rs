//! Linear execution-time models and their least-squares calibration.
//!
//! Two models are used throughout the simulator:
//!
//! * unchunked prefill: `prefill_k * len + prefill_b`
//! * one chunked iteration: `k_ctxp * prefill_ctx + k_ctxd * decode_ctx_sum + b_c`
//!
//! The number of prefill tokens in a chunked iteration is intentionally not
//! a regressor: iterations run close to the token budget, so its effect is
//! folded into the intercept. A decode-only iteration is the chunked model
//! with `prefill_ctx = 0`.
//!
//! Fitting uses ordinary least squares on centred, scaled regressors. The
//! centred normal equations are at most 2x2 and are solved with partial
//! pivoting; a pivot below `RANK_TOL` (relative to the scaled system) is
//! reported as a degenerate fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GpuProfile;

const RANK_TOL: f64 = 1e-10;
const MAPE_FLOOR: f64 = 1e-9;

pub fn prefill_time(profile: &GpuProfile, len: u64) -> f64 {
    profile.prefill_k * len as f64 + profile.prefill_b
}

pub fn chunked_iter_time(profile: &GpuProfile, prefill_ctx: u64, decode_ctx_sum: u64) -> f64 {
    profile.chunked_k_ctxp * prefill_ctx as f64
        + profile.chunked_k_ctxd * decode_ctx_sum as f64
        + profile.chunked_b
}

/// Sum of an arithmetic sequence of `n_iter` iteration times.
pub fn chunked_total_time(n_iter: u64, t_first: f64, t_last: f64) -> f64 {
    n_iter as f64 * (t_first + t_last) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillSample {
    pub prefill_len: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkedSample {
    pub prefill_ctx: f64,
    pub decode_ctx_sum: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficients {
    Prefill { k: f64, b: f64 },
    Chunked { k_ctxp: f64, k_ctxd: f64, b: f64 },
}

impl Coefficients {
    /// Config keys and values for a GPU profile fragment.
    pub fn profile_keys(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Coefficients::Prefill { k, b } => vec![("prefill_k", k), ("prefill_b", b)],
            Coefficients::Chunked { k_ctxp, k_ctxd, b } => vec![
                ("chunked_k_ctxp", k_ctxp),
                ("chunked_k_ctxd", k_ctxd),
                ("chunked_b", b),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub coefficients: Coefficients,
    pub r2: f64,
    pub mape: f64,
    pub samples: usize,
}

pub fn fit_prefill(samples: &[PrefillSample]) -> Result<FitReport> {
    let distinct = {
        let mut lens: Vec<f64> = samples.iter().map(|s| s.prefill_len).collect();
        lens.sort_by(f64::total_cmp);
        lens.dedup();
        lens.len()
    };
    if distinct < 2 {
        return Err(Error::DegenerateFit(
            "need at least two distinct prefill lengths".into(),
        ));
    }
    let xs: Vec<[f64; 1]> = samples.iter().map(|s| [s.prefill_len]).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let (beta, b) = ols(&xs, &ys)?;
    let predict = |x: &[f64; 1]| beta[0] * x[0] + b;
    let (r2, mape) = goodness(&xs, &ys, predict);
    Ok(FitReport {
        coefficients: Coefficients::Prefill { k: beta[0], b },
        r2,
        mape,
        samples: samples.len(),
    })
}

pub fn fit_chunked(samples: &[ChunkedSample]) -> Result<FitReport> {
    let xs: Vec<[f64; 2]> = samples
        .iter()
        .map(|s| [s.prefill_ctx, s.decode_ctx_sum])
        .collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let (beta, b) = ols(&xs, &ys)?;
    let predict = |x: &[f64; 2]| beta[0] * x[0] + beta[1] * x[1] + b;
    let (r2, mape) = goodness(&xs, &ys, predict);
    Ok(FitReport {
        coefficients: Coefficients::Chunked {
            k_ctxp: beta[0],
            k_ctxd: beta[1],
            b,
        },
        r2,
        mape,
        samples: samples.len(),
    })
}

fn goodness<const N: usize>(
    xs: &[[f64; N]],
    ys: &[f64],
    predict: impl Fn(&[f64; N]) -> f64,
) -> (f64, f64) {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut ape = 0.0;
    let mut counted = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        let r = y - predict(x);
        ss_res += r * r;
        ss_tot += (y - mean) * (y - mean);
        if y.abs() >= MAPE_FLOOR {
            ape += (r / y).abs();
            counted += 1;
        }
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    let mape = if counted > 0 { ape / counted as f64 } else { 0.0 };
    (r2, mape)
}

/// OLS with intercept. Returns slopes and intercept.
fn ols<const N: usize>(xs: &[[f64; N]], ys: &[f64]) -> Result<([f64; N], f64)> {
    if xs.len() != ys.len() || xs.len() < N + 1 {
        return Err(Error::DegenerateFit(format!(
            "need at least {} samples, got {}",
            N + 1,
            xs.len()
        )));
    }
    if xs.iter().flatten().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit("non-finite sample".into()));
    }
    let n = xs.len() as f64;
    let mut x_mean = [0.0; N];
    for x in xs {
        for j in 0..N {
            x_mean[j] += x[j] / n;
        }
    }
    let y_mean = ys.iter().sum::<f64>() / n;

    // Column scale so the normal matrix has unit-ish diagonal.
    let mut scale = [0.0; N];
    for x in xs {
        for j in 0..N {
            scale[j] = f64::max(scale[j], (x[j] - x_mean[j]).abs());
        }
    }
    if scale.contains(&0.0) {
        return Err(Error::DegenerateFit("a regressor is constant".into()));
    }

    let mut a = [[0.0; N]; N];
    let mut rhs = [0.0; N];
    for (x, &y) in xs.iter().zip(ys) {
        let z: [f64; N] = std::array::from_fn(|j| (x[j] - x_mean[j]) / scale[j]);
        for i in 0..N {
            rhs[i] += z[i] * (y - y_mean);
            for j in 0..N {
                a[i][j] += z[i] * z[j];
            }
        }
    }
    let norm = (0..N).map(|i| a[i][i]).fold(0.0, f64::max);
    let gamma = solve_pivoted(a, rhs, norm * RANK_TOL)?;
    let beta: [f64; N] = std::array::from_fn(|j| gamma[j] / scale[j]);
    let intercept = y_mean - (0..N).map(|j| beta[j] * x_mean[j]).sum::<f64>();
    Ok((beta, intercept))
}

/// Gaussian elimination with partial pivoting.
fn solve_pivoted<const N: usize>(
    mut a: [[f64; N]; N],
    mut b: [f64; N],
    tol: f64,
) -> Result<[f64; N]> {
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() <= tol {
            return Err(Error::DegenerateFit("design matrix is rank deficient".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}
