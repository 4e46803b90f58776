//! Summary statistics of a weight vector and trajectories of them.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, Result};
use crate::spectrum::{Spectrum, Teacher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    /// Continuous time, `step * eta`.
    pub t: f64,
    pub step: u64,
    /// `u_k[k - 1] = u^(k) = <w, w*>_{Q^k}`.
    pub u_k: Vec<f64>,
    /// `s_k[k - 1] = s^(k) = ||w||^2_{Q^k}`.
    pub s_k: Vec<f64>,
    pub mse: f64,
    /// Phase clock `Theta(t) = int_0^t (1 - 3 s)`.
    pub theta: f64,
}

impl StatRecord {
    pub fn u(&self) -> f64 {
        self.u_k[0]
    }

    pub fn s(&self) -> f64 {
        self.s_k[0]
    }

    pub fn u2(&self) -> Option<f64> {
        self.u_k.get(1).copied()
    }

    pub fn s2(&self) -> Option<f64> {
        self.s_k.get(1).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StatRecord>,
    pub config_digest: String,
    pub seed: u64,
    /// Set when `w*` was negated at `t = 0` to make `u(0) >= 0`.
    pub teacher_flipped: bool,
    /// Largest observed loss increase over the run, if it exceeded `1e-9`.
    pub descent_violation: Option<f64>,
    /// Set when the run stopped early (divergence).
    pub truncated: bool,
    pub warnings: Vec<String>,
    /// Full weight vectors aligned with `records`, when requested.
    #[serde(skip)]
    pub weights: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn u(&self) -> Vec<f64> {
        self.records.iter().map(StatRecord::u).collect()
    }

    pub fn s(&self) -> Vec<f64> {
        self.records.iter().map(StatRecord::s).collect()
    }

    pub fn mse(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mse).collect()
    }

    pub fn last(&self) -> Option<&StatRecord> {
        self.records.last()
    }

    /// Weight snapshot at record `idx`, if snapshots were kept.
    pub fn weights_at(&self, idx: usize) -> Option<&[f64]> {
        self.weights.as_ref()?.get(idx).map(Vec::as_slice)
    }
}

/// Moment hierarchy of `w` up to depth `k_max`; `t` and `theta` are left at zero.
pub fn summary_stats(
    w: &[f64],
    teacher: &Teacher,
    spec: &Spectrum,
    k_max: usize,
) -> Result<StatRecord> {
    check_dims(spec.d, w.len(), "w")?;
    check_dims(spec.d, teacher.d(), "teacher")?;
    if k_max < 1 {
        return Err(invalid("moment depth K must be at least 1"));
    }
    let mut u_k = vec![0.0; k_max];
    let mut s_k = vec![0.0; k_max];
    for ((&l, &wi), &ti) in spec.lambdas.iter().zip(w).zip(&teacher.w_star) {
        let mut lw = l * wi;
        for k in 0..k_max {
            u_k[k] += lw * ti;
            s_k[k] += lw * wi;
            lw *= l;
        }
    }
    Ok(StatRecord {
        t: 0.0,
        step: 0,
        u_k,
        s_k,
        mse: mse(w, teacher)?,
        theta: 0.0,
    })
}

/// `(1/d) min(||w - w*||^2, ||w + w*||^2)`.
pub fn mse(w: &[f64], teacher: &Teacher) -> Result<f64> {
    check_dims(teacher.d(), w.len(), "w")?;
    let (mut minus, mut plus) = (0.0, 0.0);
    for (&wi, &ti) in w.iter().zip(&teacher.w_star) {
        minus += (wi - ti) * (wi - ti);
        plus += (wi + ti) * (wi + ti);
    }
    Ok(minus.min(plus) / w.len() as f64)
}

/// Fills `theta` by the trapezoidal rule on `1 - 3 s(t)`, with `Theta(t_0) = 0`.
pub fn accumulate_theta(mut traj: Trajectory) -> Result<Trajectory> {
    if traj.records.windows(2).any(|p| !(p[1].t > p[0].t)) {
        return Err(invalid("trajectory times must be strictly increasing"));
    }
    let mut theta = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for r in &mut traj.records {
        let s = r.s();
        if let Some((t0, s0)) = prev {
            theta += (r.t - t0) * (1.0 - 1.5 * (s + s0));
        }
        r.theta = theta;
        prev = Some((r.t, s));
    }
    Ok(traj)
}
