//! Spectral-tail learning after `T2`.
//!
//! With `u = s = 1` frozen the coordinate errors relax as
//! `e_i(T2 + tau) = e_i(T2) e^{-8 lambda_i tau}`, so
//! `MSE(T2 + tau) = MSE(T2) * S^_d(tau)` with the mixing curve
//! `S^_d(tau) = sum_i pi_i e^{-16 lambda_i tau}`, `pi_i ∝ e_i(T2)^2`.
//! The uniform benchmark is `S_d(tau) = (1/d) sum_i e^{-16 lambda_i tau}`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, Error, Result};
use crate::spectrum::{Spectrum, Teacher};
use crate::stats::Trajectory;

/// `beta_d tau` below which the early-time expansion is used.
pub const EARLY_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub pi: Vec<f64>,
    pub t2_index: usize,
    pub mse_at_t2: f64,
    /// Accuracy used to detect `T2`; scales the error envelope.
    pub epsilon: f64,
}

impl MixWeights {
    /// Weights from the student at `T2`, using the sign branch closest to `w*`.
    pub fn from_student(w: &[f64], teacher: &Teacher, t2_index: usize, epsilon: f64) -> Result<Self> {
        check_dims(teacher.d(), w.len(), "w")?;
        let minus: f64 = w.iter().zip(&teacher.w_star).map(|(a, b)| (a - b) * (a - b)).sum();
        let plus: f64 = w.iter().zip(&teacher.w_star).map(|(a, b)| (a + b) * (a + b)).sum();
        let sign = if plus < minus { -1.0 } else { 1.0 };
        let sq: Vec<f64> = w
            .iter()
            .zip(&teacher.w_star)
            .map(|(a, b)| (a - sign * b) * (a - sign * b))
            .collect();
        Self::from_squared_errors(sq, t2_index, epsilon)
    }

    pub fn from_squared_errors(sq: Vec<f64>, t2_index: usize, epsilon: f64) -> Result<Self> {
        let total: f64 = sq.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("student already equals the teacher; mixing weights undefined"));
        }
        let d = sq.len() as f64;
        Ok(Self {
            pi: sq.iter().map(|e| e / total).collect(),
            t2_index,
            mse_at_t2: total / d,
            epsilon,
        })
    }

    /// Uniform weights `pi_i = 1/d`.
    pub fn uniform(d: usize) -> Self {
        Self {
            pi: vec![1.0 / d as f64; d],
            t2_index: 0,
            mse_at_t2: 1.0,
            epsilon: 0.0,
        }
    }

    /// `d * max_i pi_i`, the spread constant with `S^_d <= C S_d`.
    pub fn spread(&self) -> f64 {
        self.pi.len() as f64 * self.pi.iter().copied().fold(0.0, f64::max)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("tau must be >= 0, got {tau}")));
    }
    Ok(())
}

/// `S_d(tau) = (1/d) sum_i e^{-16 lambda_i tau}`.
pub fn spectral_mix_exact(spec: &Spectrum, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let sum: f64 = spec.lambdas.iter().map(|l| (-16.0 * l * tau).exp()).sum();
    Ok(sum / spec.d as f64)
}

/// `1 - S_d(tau)` evaluated without cancellation.
pub fn spectral_mix_deficit(spec: &Spectrum, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let sum: f64 = spec.lambdas.iter().rev().map(|l| -(-16.0 * l * tau).exp_m1()).sum();
    Ok(sum / spec.d as f64)
}

/// `S^_d(tau) = sum_i pi_i e^{-16 lambda_i tau}`.
pub fn spectral_mix_weighted(spec: &Spectrum, weights: &MixWeights, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_dims(spec.d, weights.pi.len(), "mixing weights")?;
    Ok(spec
        .lambdas
        .iter()
        .zip(&weights.pi)
        .map(|(l, p)| p * (-16.0 * l * tau).exp())
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    /// `1 - 16 tau / d`.
    Early,
    /// `1 - Gamma(1 - 1/a) x_d / d`, `x_d = (beta_d tau)^{1/a}`.
    Meso,
    /// Upper bound `exp(-beta_d tau d^{-a})`, not an estimate.
    Late,
}

/// Asymptotic form of `S_d(tau)` for the regime selected by `beta_d tau`.
pub fn spectral_mix_asymptotic(spec: &Spectrum, tau: f64) -> Result<(Regime, f64)> {
    check_tau(tau)?;
    let d = spec.d as f64;
    let bt = spec.beta() * tau;
    if bt < EARLY_THRESHOLD {
        return Ok((Regime::Early, 1.0 - 16.0 * tau / d));
    }
    // x_d > d  <=>  beta_d tau > d^a
    if bt > d.powf(spec.a) {
        return Ok((Regime::Late, (-bt * d.powf(-spec.a)).exp()));
    }
    if spec.a <= 1.0 {
        return Err(Error::UnsupportedExponent(spec.a));
    }
    let x = bt.powf(1.0 / spec.a);
    Ok((Regime::Meso, 1.0 - libm::tgamma(1.0 - 1.0 / spec.a) * x / d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase3Point {
    pub tau: f64,
    /// `MSE(T2) * S^_d(tau)`.
    pub predicted: f64,
    /// `eps * (MSE(T2) - predicted) + eps^2 (1/d) sum_i (1 - e^{-8 lambda_i tau})^2 (w*_i)^2`.
    pub envelope: f64,
}

pub fn predict_phase3_mse(
    spec: &Spectrum,
    teacher: &Teacher,
    weights: &MixWeights,
    tau_grid: &[f64],
) -> Result<Vec<Phase3Point>> {
    check_dims(spec.d, teacher.d(), "teacher")?;
    let eps = weights.epsilon;
    tau_grid
        .iter()
        .map(|&tau| {
            let predicted = weights.mse_at_t2 * spectral_mix_weighted(spec, weights, tau)?;
            let forcing: f64 = spec
                .lambdas
                .iter()
                .zip(&teacher.w_star)
                .map(|(l, t)| {
                    let g = -(-8.0 * l * tau).exp_m1();
                    g * g * t * t
                })
                .sum::<f64>()
                / spec.d as f64;
            Ok(Phase3Point {
                tau,
                predicted,
                envelope: eps * (weights.mse_at_t2 - predicted) + eps * eps * forcing,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase3Comparison {
    pub tau: f64,
    pub simulated: f64,
    pub predicted: f64,
    pub envelope: f64,
}

impl Phase3Comparison {
    pub fn relative_error(&self) -> f64 {
        (self.simulated - self.predicted).abs() / self.predicted
    }

    pub fn within_envelope(&self) -> bool {
        (self.simulated - self.predicted).abs() <= self.envelope
    }
}

/// Simulated MSE at every record from `weights.t2_index` on, next to the prediction.
pub fn compare_phase3(
    traj: &Trajectory,
    spec: &Spectrum,
    teacher: &Teacher,
    weights: &MixWeights,
) -> Result<Vec<Phase3Comparison>> {
    let recs = traj
        .records
        .get(weights.t2_index..)
        .ok_or_else(|| invalid("T2 index beyond the trajectory"))?;
    let t2 = recs[0].t;
    let taus: Vec<f64> = recs.iter().map(|r| r.t - t2).collect();
    let pred = predict_phase3_mse(spec, teacher, weights, &taus)?;
    Ok(recs
        .iter()
        .zip(pred)
        .map(|(r, p)| Phase3Comparison {
            tau: p.tau,
            simulated: r.mse,
            predicted: p.predicted,
            envelope: p.envelope,
        })
        .collect())
}

/// Closed-form errors of the frozen flow `e' = -8 Q e` after time `tau`.
pub fn ideal_errors(spec: &Spectrum, e0: &[f64], tau: f64) -> Vec<f64> {
    spec.lambdas
        .iter()
        .zip(e0)
        .map(|(l, e)| e * (-8.0 * l * tau).exp())
        .collect()
}

/// Steps the frozen flow `e' = -8 Q e` with exact per-step propagators.
pub fn integrate_frozen_flow(spec: &Spectrum, e0: &[f64], h: f64, n_steps: usize) -> Vec<f64> {
    let factors: Vec<f64> = spec.lambdas.iter().map(|l| (-8.0 * l * h).exp()).collect();
    let mut e = e0.to_vec();
    for _ in 0..n_steps {
        for (x, f) in e.iter_mut().zip(&factors) {
            *x *= f;
        }
    }
    e
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares slope of `ln y` against `ln x` on `window`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64], window: Range<usize>) -> Result<LogLogFit> {
    if xs.len() != ys.len() {
        return Err(invalid("xs and ys differ in length"));
    }
    let (xs, ys) = xs
        .get(window.clone())
        .zip(ys.get(window.clone()))
        .ok_or_else(|| invalid(format!("window {window:?} out of range")))?;
    if xs.len() < 3 {
        return Err(Error::InsufficientData("log-log fit needs at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("log-log fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LogLogFit { slope, intercept, r2 })
}
