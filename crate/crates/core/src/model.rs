//! Population loss geometry.
//!
//! With `s = ||w||_Q^2`, `u = <w, w*>_Q` and `s* = ||w*||_Q^2` the population
//! loss is `3 s^2 + 3 s*^2 - 4 u^2 - 2 s* s`, its gradient is
//! `12 s Qw - 4 s* Qw - 8 u Qw*` and its Hessian is
//! `24 (Qw)(Qw)^T + (12 s - 4 s*) Q - 8 (Qw*)(Qw*)^T`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, Result};
use crate::rng::{rng_for, Stream};
use crate::spectrum::{Spectrum, Teacher};

/// Gradient infinity-norm below which a point counts as critical.
pub const DEFAULT_GRAD_TOL: f64 = 1e-8;
/// Rayleigh quotients with magnitude below this are treated as flat.
pub const DEFAULT_CURVATURE_TOL: f64 = 1e-10;
/// Random probe directions used by [`classify_critical_point`].
const RANDOM_PROBES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEval {
    pub value: f64,
    pub s: f64,
    pub u: f64,
    pub s_star: f64,
}

/// `(s, u)` in one pass over the coordinates.
pub fn overlaps(w: &[f64], teacher: &Teacher, spec: &Spectrum) -> (f64, f64) {
    let mut s = 0.0;
    let mut u = 0.0;
    for ((&l, &wi), &ti) in spec.lambdas.iter().zip(w).zip(&teacher.w_star) {
        let lw = l * wi;
        s += lw * wi;
        u += lw * ti;
    }
    (s, u)
}

pub fn loss_from_overlaps(s: f64, u: f64, s_star: f64) -> f64 {
    3.0 * s * s + 3.0 * s_star * s_star - 4.0 * u * u - 2.0 * s_star * s
}

pub fn loss_closed_form(w: &[f64], teacher: &Teacher, spec: &Spectrum) -> Result<LossEval> {
    check_dims(spec.d, w.len(), "w")?;
    check_dims(spec.d, teacher.d(), "teacher")?;
    let (s, u) = overlaps(w, teacher, spec);
    let s_star = teacher.s_star();
    Ok(LossEval {
        value: loss_from_overlaps(s, u, s_star),
        s,
        u,
        s_star,
    })
}

/// Sample mean of the quartic loss and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Monte-Carlo estimate of `E[((x.w)^2 - (x.w*)^2)^2]` with `x_i = sqrt(lambda_i) z_i`.
pub fn loss_monte_carlo(
    w: &[f64],
    teacher: &Teacher,
    spec: &Spectrum,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_dims(spec.d, w.len(), "w")?;
    check_dims(spec.d, teacher.d(), "teacher")?;
    if n == 0 {
        return Err(invalid("Monte-Carlo sample count must be at least 1"));
    }
    let mut rng = rng_for(seed, Stream::MonteCarlo);
    let sqrt_l: Vec<f64> = spec.lambdas.iter().map(|l| l.sqrt()).collect();
    // Welford accumulation
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n {
        let mut p = 0.0;
        let mut q = 0.0;
        for ((&sl, &wi), &ti) in sqrt_l.iter().zip(w).zip(&teacher.w_star) {
            let x = sl * rng.sample::<f64, _>(StandardNormal);
            p += x * wi;
            q += x * ti;
        }
        let r = p * p - q * q;
        let v = r * r;
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    let std_err = if n > 1 {
        (m2 / (n - 1) as f64 / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, std_err, n })
}

/// Writes the population gradient into `out`.
pub(crate) fn gradient_into(w: &[f64], teacher: &Teacher, spec: &Spectrum, out: &mut [f64]) {
    let (s, u) = overlaps(w, teacher, spec);
    let c_w = 12.0 * s - 4.0 * teacher.s_star();
    let c_t = 8.0 * u;
    for (((o, &l), &wi), &ti) in out.iter_mut().zip(&spec.lambdas).zip(w).zip(&teacher.w_star) {
        *o = l * (c_w * wi - c_t * ti);
    }
}

pub fn gradient(w: &[f64], teacher: &Teacher, spec: &Spectrum) -> Result<Vec<f64>> {
    check_dims(spec.d, w.len(), "w")?;
    check_dims(spec.d, teacher.d(), "teacher")?;
    let mut out = vec![0.0; w.len()];
    gradient_into(w, teacher, spec, &mut out);
    Ok(out)
}

/// Hessian-vector product in O(d) without forming the matrix.
pub fn hessian_apply(w: &[f64], v: &[f64], teacher: &Teacher, spec: &Spectrum) -> Result<Vec<f64>> {
    check_dims(spec.d, w.len(), "w")?;
    check_dims(spec.d, v.len(), "v")?;
    check_dims(spec.d, teacher.d(), "teacher")?;
    let (s, _) = overlaps(w, teacher, spec);
    // (Qw).v and (Qw*).v
    let qw_v = spec.q_inner(1, w, v);
    let qt_v = spec.q_inner(1, &teacher.w_star, v);
    let diag = 12.0 * s - 4.0 * teacher.s_star();
    Ok(spec
        .lambdas
        .iter()
        .zip(w)
        .zip(&teacher.w_star)
        .zip(v)
        .map(|(((&l, &wi), &ti), &vi)| {
            l * (24.0 * wi * qw_v + diag * vi - 8.0 * ti * qt_v)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CriticalPoint {
    GlobalMin,
    LocalMax,
    Saddle,
    Noncritical,
}

/// Classifies `w` by the gradient norm and the sign of the Hessian
/// Rayleigh quotient along `w`, `w*` and ten seeded random directions.
pub fn classify_critical_point(
    w: &[f64],
    teacher: &Teacher,
    spec: &Spectrum,
    tol: f64,
) -> Result<CriticalPoint> {
    classify_with_tolerances(w, teacher, spec, tol, DEFAULT_CURVATURE_TOL)
}

pub fn classify_with_tolerances(
    w: &[f64],
    teacher: &Teacher,
    spec: &Spectrum,
    grad_tol: f64,
    curvature_tol: f64,
) -> Result<CriticalPoint> {
    if !(grad_tol > 0.0) || !(curvature_tol > 0.0) {
        return Err(invalid("tolerances must be positive"));
    }
    let g = gradient(w, teacher, spec)?;
    if g.iter().fold(0.0f64, |m, x| m.max(x.abs())) > grad_tol {
        return Ok(CriticalPoint::Noncritical);
    }

    let mut probes: Vec<Vec<f64>> = vec![w.to_vec(), teacher.w_star.clone()];
    let mut rng = rng_for(0, Stream::Probe);
    for _ in 0..RANDOM_PROBES {
        probes.push((0..spec.d).map(|_| rng.sample(StandardNormal)).collect());
    }

    let (mut pos, mut neg) = (0, 0);
    for v in &probes {
        let norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if norm_sq == 0.0 {
            continue;
        }
        let hv = hessian_apply(w, v, teacher, spec)?;
        let rq = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>() / norm_sq;
        if rq > curvature_tol {
            pos += 1;
        } else if rq < -curvature_tol {
            neg += 1;
        }
    }
    Ok(match (pos, neg) {
        (_, 0) if pos > 0 => CriticalPoint::GlobalMin,
        (0, _) if neg > 0 => CriticalPoint::LocalMax,
        _ => CriticalPoint::Saddle,
    })
}

/// A point with `u = 0` and `s = s*/3`, built from the second coordinate
/// axis projected onto the `Q`-orthogonal complement of `w*`.
pub fn saddle_point(teacher: &Teacher, spec: &Spectrum) -> Result<Vec<f64>> {
    check_dims(spec.d, teacher.d(), "teacher")?;
    if spec.d < 2 {
        return Err(invalid("saddle construction needs d >= 2"));
    }
    let mut v = vec![0.0; spec.d];
    v[1] = 1.0;
    let proj = spec.q_inner(1, &v, &teacher.w_star) / teacher.s_star();
    for (vi, ti) in v.iter_mut().zip(&teacher.w_star) {
        *vi -= proj * ti;
    }
    let s = spec.q_inner(1, &v, &v);
    if s <= 0.0 {
        return Err(invalid("second coordinate axis is Q-parallel to the teacher"));
    }
    let scale = (teacher.s_star() / 3.0 / s).sqrt();
    Ok(v.into_iter().map(|x| x * scale).collect())
}
