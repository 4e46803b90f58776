//! Stopping times of the three-phase trajectory.
//!
//! * `T1`: first time with `|u|`, `s`, `|u^(2)| >= delta` (escape);
//! * `T1'`: entry into the band `s > 1/3 + s0`, persisting to the end of the record;
//! * `T2`: first time after `T1'` with `min(|u|, s) >= 1 - epsilon`.
//!
//! Crossing times are linearly interpolated between records.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::spectrum::{Spectrum, Teacher};
use crate::stats::{StatRecord, Trajectory};

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_S0: f64 = 0.05;
pub const DEFAULT_EPSILON: f64 = 0.05;

/// Interpolated crossing with the gap between the bracketing records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub t: f64,
    /// Index of the first record at or after the crossing.
    pub index: usize,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub t1: Option<Crossing>,
    pub t1_prime: Option<Crossing>,
    pub t2: Option<Crossing>,
    pub delta: f64,
    pub s0: f64,
    pub epsilon: f64,
    pub u_at_t1: Option<f64>,
    pub s_at_t1: Option<f64>,
    pub u2_at_t1: Option<f64>,
}

impl PhaseReport {
    pub fn t1(&self) -> Option<f64> {
        self.t1.map(|c| c.t)
    }

    pub fn t1_prime(&self) -> Option<f64> {
        self.t1_prime.map(|c| c.t)
    }

    pub fn t2(&self) -> Option<f64> {
        self.t2.map(|c| c.t)
    }

    /// `sign(u^(2)(T1)) == sign(u(T1))`, when `T1` exists.
    pub fn sign_coherent(&self) -> Option<bool> {
        Some(self.u_at_t1?.signum() == self.u2_at_t1?.signum())
    }
}

/// First crossing of `g >= 0` at or after record `start`, interpolated with
/// the preceding record.
fn first_crossing(records: &[StatRecord], start: usize, g: impl Fn(&StatRecord) -> f64) -> Option<Crossing> {
    let j = (start..records.len()).find(|&i| g(&records[i]) >= 0.0)?;
    if j == 0 {
        return Some(Crossing {
            t: records[0].t,
            index: 0,
            gap: 0.0,
        });
    }
    let (p, r) = (&records[j - 1], &records[j]);
    let (gp, gr) = (g(p), g(r));
    let frac = if gp < 0.0 && gr > gp { -gp / (gr - gp) } else { 1.0 };
    Some(Crossing {
        t: p.t + frac * (r.t - p.t),
        index: j,
        gap: r.t - p.t,
    })
}

fn interpolate_at(records: &[StatRecord], t: f64, value: impl Fn(&StatRecord) -> f64) -> f64 {
    let j = records.partition_point(|r| r.t < t);
    if j == 0 {
        return value(&records[0]);
    }
    if j == records.len() {
        return value(&records[j - 1]);
    }
    let (p, r) = (&records[j - 1], &records[j]);
    let frac = (t - p.t) / (r.t - p.t);
    value(p) * (1.0 - frac) + value(r) * frac
}

pub fn detect_phases(traj: &Trajectory, delta: f64, s0: f64, epsilon: f64) -> Result<PhaseReport> {
    for (name, v) in [("delta", delta), ("s0", s0), ("epsilon", epsilon)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(invalid(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    let recs = &traj.records;
    if recs.iter().any(|r| r.u_k.len() < 2) {
        return Err(invalid("records need the u^(2) column (K >= 2)"));
    }
    let mut report = PhaseReport {
        t1: None,
        t1_prime: None,
        t2: None,
        delta,
        s0,
        epsilon,
        u_at_t1: None,
        s_at_t1: None,
        u2_at_t1: None,
    };

    let Some(t1) = first_crossing(recs, 0, |r| {
        r.u().abs().min(r.s()).min(r.u_k[1].abs()) - delta
    }) else {
        return Ok(report);
    };
    report.t1 = Some(t1);
    report.u_at_t1 = Some(interpolate_at(recs, t1.t, StatRecord::u));
    report.s_at_t1 = Some(interpolate_at(recs, t1.t, StatRecord::s));
    report.u2_at_t1 = Some(interpolate_at(recs, t1.t, |r| r.u_k[1]));

    let band = 1.0 / 3.0 + s0;
    let g_band = |r: &StatRecord| r.s() - band;
    let from = t1.index.saturating_sub(1);
    let t1_prime = match (from..recs.len()).rev().find(|&i| g_band(&recs[i]) <= 0.0) {
        Some(last) if last + 1 == recs.len() => None,
        Some(last) => first_crossing(recs, last + 1, g_band),
        None => Some(t1),
    };
    let Some(mut t1_prime) = t1_prime else {
        return Ok(report);
    };
    if t1_prime.t < t1.t {
        t1_prime = Crossing { t: t1.t, ..t1_prime };
    }
    report.t1_prime = Some(t1_prime);

    let target = 1.0 - epsilon;
    let start = t1_prime.index.saturating_sub(1);
    report.t2 = first_crossing(recs, start, |r| r.u().abs().min(r.s()) - target).map(|c| {
        if c.t < t1_prime.t {
            Crossing { t: t1_prime.t, ..c }
        } else {
            c
        }
    });
    Ok(report)
}

/// Ratio `T1 / log d`, the empirical constant of the logarithmic escape time.
pub fn escape_time_ratio(report: &PhaseReport, d: usize) -> Option<f64> {
    let t1 = report.t1()?;
    (d > 1).then(|| t1 / (d as f64).ln())
}

/// Every record from `T1'` on sits strictly above `1/3`.
pub fn band_persists(traj: &Trajectory, report: &PhaseReport) -> Option<bool> {
    let t1p = report.t1_prime()?;
    Some(traj.records.iter().filter(|r| r.t >= t1p).all(|r| r.s() > 1.0 / 3.0))
}

/// Index of the first record with `u >= level`.
pub fn first_record_with_u(traj: &Trajectory, level: f64) -> Option<usize> {
    traj.records.iter().position(|r| r.u() >= level)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T2Prediction {
    pub t1_prime: f64,
    /// `s` at the snapshot used for `T1'`.
    pub s_at_t1_prime: f64,
    pub lambda_eps: f64,
    /// 1-based eigen-index of `lambda_eps`.
    pub lambda_index: usize,
    /// `T(lambda_eps)`.
    pub tail: f64,
    /// `min(eps/4, eps^2 / (16 s(T1')))`.
    pub tail_bound: f64,
    /// `S_>=(lambda_eps) = sum_{lambda_i >= lambda_eps} lambda_i |w*_i w_i(T1')|`.
    pub head_alignment: f64,
    pub predicted_t2: f64,
    pub warning: Option<String>,
}

/// Time-to-accuracy bound
/// `T2(eps) = T1' + log(4 S_>=(lambda_eps) / eps) / (4 s0 lambda_eps)`,
/// where `lambda_eps` is the largest eigenvalue cutoff whose tail mass obeys
/// `T(lambda_eps) <= min(eps/4, eps^2 / (16 s(T1')))`.
///
/// Needs weight snapshots in `traj`; `T1'` is detected with [`DEFAULT_DELTA`].
/// The cutoff is capped at `lambda_1` and a negative logarithm is clamped to
/// zero, so large `eps` gives `T1'` itself.
pub fn predicted_t2(
    teacher: &Teacher,
    spec: &Spectrum,
    traj: &Trajectory,
    epsilon: f64,
    s0: f64,
) -> Result<T2Prediction> {
    if !(epsilon > 0.0) || !(s0 > 0.0 && s0 < 1.0) {
        return Err(invalid("need epsilon > 0 and s0 in (0, 1)"));
    }
    let detect_eps = epsilon.min(0.5);
    let report = detect_phases(traj, DEFAULT_DELTA, s0, detect_eps)?;
    let t1p = report
        .t1_prime
        .ok_or_else(|| invalid("trajectory never enters the band s > 1/3 + s0"))?;
    let w = traj
        .weights_at(t1p.index)
        .ok_or_else(|| invalid("predicted_t2 needs weight snapshots (keep_weights)"))?;
    let s_t1p = traj.records[t1p.index].s();

    let bound = (epsilon / 4.0).min(epsilon * epsilon / (16.0 * s_t1p));
    let d = spec.d;
    let mut suffix = vec![0.0; d + 1];
    for i in (0..d).rev() {
        let t = teacher.w_star[i];
        suffix[i] = suffix[i + 1] + spec.lambdas[i] * t * t;
    }
    let tail_at = |j: usize| suffix[spec.lambdas.partition_point(|&l| l >= spec.lambdas[j])];
    // T(lambda_j) is nonincreasing in j and T(lambda_d) = 0, so a cutoff always exists
    let j = (0..d).find(|&j| tail_at(j) <= bound).unwrap_or(d - 1);
    let lambda_eps = spec.lambdas[j];
    let head: f64 = spec
        .lambdas
        .iter()
        .zip(teacher.w_star.iter().zip(w))
        .take_while(|(&l, _)| l >= lambda_eps)
        .map(|(l, (t, wi))| l * (t * wi).abs())
        .sum();
    let log_term = (4.0 * head / epsilon).ln().max(0.0);

    let warning = (spec.a > 1.0)
        .then(|| (d as f64).powf(-(spec.a - 1.0) / 2.0))
        .filter(|&floor| epsilon < floor)
        .map(|floor| format!("epsilon = {epsilon} is below the resolvable floor d^(-(a-1)/2) = {floor:.3e}"));

    Ok(T2Prediction {
        t1_prime: t1p.t,
        s_at_t1_prime: s_t1p,
        lambda_eps,
        lambda_index: j + 1,
        tail: tail_at(j),
        tail_bound: bound,
        head_alignment: head,
        predicted_t2: t1p.t + log_term / (4.0 * s0 * lambda_eps),
        warning,
    })
}
