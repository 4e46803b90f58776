//! Escape-phase analysis.
//!
//! While `s(t)` is negligible the overlap obeys the renewal equation
//! `u(t) = a_0(t) + 8 int_0^t K(t - tau) u(tau) dtau` with
//! `a_0(t) = sum_i w_i(0) w*_i lambda_i e^{b lambda_i t}` and
//! `K(t) = sum_i (w*_i)^2 lambda_i^2 e^{b lambda_i t}`, `b = 4`.
//! Its growth rate is the root of `1 = 8 K^(rho)` to the right of `b lambda_1`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, Error, Result};
use crate::spectrum::{Spectrum, Teacher};
use crate::stats::Trajectory;

/// Clock rate of the escape phase.
pub const PHASE_ONE_CLOCK: f64 = 4.0;
/// Largest exponent evaluated before reporting a range error.
const MAX_EXPONENT: f64 = 700.0;
const RESIDUAL_TOL: f64 = 1e-12;
const MAX_DOUBLINGS: usize = 60;

/// `K(t) = sum_i c_i e^{r_i t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpSumKernel {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
    pub b: f64,
}

impl ExpSumKernel {
    /// Memory kernel with `c_i = (w*_i)^2 lambda_i^2`, `r_i = b lambda_i`.
    pub fn memory(teacher: &Teacher, spec: &Spectrum, b: f64) -> Self {
        let weights = spec
            .lambdas
            .iter()
            .zip(&teacher.w_star)
            .map(|(l, t)| t * t * l * l)
            .collect();
        Self::with_rates(weights, spec, b)
    }

    /// Source term with `c_i = w_i(0) w*_i lambda_i`.
    pub fn source(w0: &[f64], teacher: &Teacher, spec: &Spectrum, b: f64) -> Self {
        let weights = spec
            .lambdas
            .iter()
            .zip(w0.iter().zip(&teacher.w_star))
            .map(|(l, (w, t))| w * t * l)
            .collect();
        Self::with_rates(weights, spec, b)
    }

    fn with_rates(weights: Vec<f64>, spec: &Spectrum, b: f64) -> Self {
        Self {
            weights,
            rates: spec.lambdas.iter().map(|l| b * l).collect(),
            b,
        }
    }

    pub fn max_rate(&self) -> f64 {
        self.rates.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `t` for which every exponent stays below 700.
    pub fn safe_horizon(&self) -> f64 {
        let r = self.max_rate();
        if r > 0.0 {
            MAX_EXPONENT / r
        } else {
            f64::INFINITY
        }
    }
}

/// Evaluates the kernel, summing the smallest rates first.
pub fn kernel_eval(k: &ExpSumKernel, t: f64) -> Result<f64> {
    let horizon = k.safe_horizon();
    if t > horizon {
        return Err(Error::Range {
            t,
            safe_horizon: horizon,
        });
    }
    let mut order: Vec<usize> = (0..k.rates.len()).collect();
    order.sort_by(|&i, &j| k.rates[i].total_cmp(&k.rates[j]));
    Ok(order
        .into_iter()
        .map(|i| k.weights[i] * (k.rates[i] * t).exp())
        .sum())
}

/// `a_0(t) = sum_i w_i(0) w*_i lambda_i e^{4 lambda_i t}`.
pub fn source_a0(w0: &[f64], teacher: &Teacher, spec: &Spectrum, t: f64) -> Result<f64> {
    check_dims(spec.d, w0.len(), "w0")?;
    check_dims(spec.d, teacher.d(), "teacher")?;
    kernel_eval(&ExpSumKernel::source(w0, teacher, spec, PHASE_ONE_CLOCK), t)
}

fn check_above_pole(spec: &Spectrum, b: f64, p: f64) -> Result<()> {
    let pole = b * spec.lambda_max();
    if !(p > pole) {
        return Err(Error::Domain(format!(
            "Laplace variable p = {p} must exceed b * lambda_1 = {pole}"
        )));
    }
    Ok(())
}

/// `K^(p) = sum_i (w*_i)^2 lambda_i^2 / (p - b lambda_i)` for `p > b lambda_1`.
pub fn laplace_k(teacher: &Teacher, spec: &Spectrum, b: f64, p: f64) -> Result<f64> {
    check_dims(spec.d, teacher.d(), "teacher")?;
    check_above_pole(spec, b, p)?;
    Ok(laplace_sum(teacher, spec, b, p))
}

fn laplace_sum(teacher: &Teacher, spec: &Spectrum, b: f64, p: f64) -> f64 {
    spec.lambdas
        .iter()
        .zip(&teacher.w_star)
        .rev()
        .map(|(l, t)| t * t * l * l / (p - b * l))
        .sum()
}

/// `a^(p) = sum_i lambda_i w_i(0) w*_i / (p - b lambda_i)`.
pub fn laplace_source(w0: &[f64], teacher: &Teacher, spec: &Spectrum, b: f64, p: f64) -> Result<f64> {
    check_dims(spec.d, w0.len(), "w0")?;
    check_above_pole(spec, b, p)?;
    Ok(spec
        .lambdas
        .iter()
        .zip(w0.iter().zip(&teacher.w_star))
        .rev()
        .map(|(l, (w, t))| l * w * t / (p - b * l))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionResult {
    pub b: f64,
    pub rho_true: f64,
    /// Final bisection bracket.
    pub bracket: (f64, f64),
    pub iterations: usize,
    /// `|1 - 8 K^(rho)|` at the returned root.
    pub residual: f64,
    /// `D'(rho) = 8 sum_i (w*_i)^2 lambda_i^2 / (rho - b lambda_i)^2`.
    pub d_prime: f64,
    /// `sqrt(d) a^(rho) / D'(rho)`, available when an initialization is given.
    pub coefficient: Option<f64>,
    /// Set when the coefficient is non-positive or far below its upper bound
    /// `8 (s*^(2))^{3/2} / (rho - b lambda_1)`.
    pub anomalous_init: bool,
}

impl DispersionResult {
    /// Gap `rho - b lambda_1` to the leading pole.
    pub fn gap(&self, spec: &Spectrum) -> f64 {
        self.rho_true - self.b * spec.lambda_max()
    }
}

/// Solves `1 - 8 K^(rho) = 0` on `(b lambda_1, inf)` by bisection.
pub fn solve_dispersion(
    teacher: &Teacher,
    spec: &Spectrum,
    b: f64,
    w0: Option<&[f64]>,
) -> Result<DispersionResult> {
    check_dims(spec.d, teacher.d(), "teacher")?;
    if !(b > 0.0) || !b.is_finite() {
        return Err(invalid(format!("clock rate b must be positive, got {b}")));
    }
    let s2 = teacher.moment(spec, 2);
    if !(s2 > 0.0) {
        return Err(invalid("degenerate teacher: s*^(2) = 0"));
    }
    let pole = b * spec.lambda_max();
    let f = |p: f64| 1.0 - 8.0 * laplace_sum(teacher, spec, b, p);

    let mut lo = pole * (1.0 + 1e-12);
    if lo <= pole {
        lo = pole + f64::MIN_POSITIVE;
    }
    let mut hi = pole + 16.0 * 8.0 * s2;
    if f(lo) >= 0.0 {
        return Err(Error::NumericalFailure(format!(
            "no sign change at the pole edge (f({lo}) = {})",
            f(lo)
        )));
    }
    let mut doublings = 0;
    while f(hi) <= 0.0 {
        if doublings == MAX_DOUBLINGS {
            return Err(Error::NumericalFailure(
                "dispersion bracket did not close after 60 doublings".into(),
            ));
        }
        hi = pole + 2.0 * (hi - pole);
        doublings += 1;
    }

    let mut iterations = 0;
    let mut mid = 0.5 * (lo + hi);
    loop {
        let fm = f(mid);
        if fm.abs() <= 0.1 * RESIDUAL_TOL {
            break;
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        let next = 0.5 * (lo + hi);
        iterations += 1;
        if next == mid || next <= lo || next >= hi {
            break;
        }
        mid = next;
    }
    let rho = mid;
    let residual = f(rho).abs();
    if residual > RESIDUAL_TOL {
        return Err(Error::NumericalFailure(format!(
            "bisection stalled with residual {residual:e}"
        )));
    }
    let d_prime = 8.0
        * spec
            .lambdas
            .iter()
            .zip(&teacher.w_star)
            .rev()
            .map(|(l, t)| {
                let g = rho - b * l;
                t * t * l * l / (g * g)
            })
            .sum::<f64>();
    let (coefficient, anomalous_init) = match w0 {
        Some(w0) => {
            let a_hat = laplace_source(w0, teacher, spec, b, rho)?;
            let c = (spec.d as f64).sqrt() * a_hat / d_prime;
            let bound = 8.0 * s2.powf(1.5) / (rho - pole);
            (Some(c), !(c > 1e-3 * bound))
        }
        None => (None, false),
    };
    Ok(DispersionResult {
        b,
        rho_true: rho,
        bracket: (lo, hi),
        iterations,
        residual,
        d_prime,
        coefficient,
        anomalous_init,
    })
}

/// Grid solution of the escape-phase Volterra equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolterraSolution {
    pub h: f64,
    pub u: Vec<f64>,
}

impl VolterraSolution {
    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.h
    }

    pub fn t_max(&self) -> f64 {
        self.t(self.u.len() - 1)
    }

    /// Linear interpolation on the grid; `None` outside `[0, t_max]`.
    pub fn at(&self, t: f64) -> Option<f64> {
        if t < 0.0 || t > self.t_max() {
            return None;
        }
        let x = t / self.h;
        let n = (x.floor() as usize).min(self.u.len() - 1);
        if n + 1 == self.u.len() {
            return Some(self.u[n]);
        }
        let frac = x - n as f64;
        Some(self.u[n] * (1.0 - frac) + self.u[n + 1] * frac)
    }
}

/// Product-trapezoid solver:
/// `u_n (1 - 4 h K(0)) = a_0(t_n) + 8 h [K(t_n) u_0 / 2 + sum_{j=1}^{n-1} K(t_n - t_j) u_j]`.
pub fn solve_volterra_u(
    w0: &[f64],
    teacher: &Teacher,
    spec: &Spectrum,
    h: f64,
    t_max: f64,
) -> Result<VolterraSolution> {
    check_dims(spec.d, w0.len(), "w0")?;
    check_dims(spec.d, teacher.d(), "teacher")?;
    if !(h > 0.0) || !(t_max >= 0.0) {
        return Err(invalid("need h > 0 and t_max >= 0"));
    }
    let kernel = ExpSumKernel::memory(teacher, spec, PHASE_ONE_CLOCK);
    let source = ExpSumKernel::source(w0, teacher, spec, PHASE_ONE_CLOCK);
    let k0 = kernel.weights.iter().sum::<f64>();
    let diag = 1.0 - 4.0 * h * k0;
    if !(diag > 0.0) {
        return Err(Error::StepTooLarge(format!(
            "4 h K(0) = {} must be below 1",
            4.0 * h * k0
        )));
    }
    let n = (t_max / h).ceil() as usize;
    let k_grid: Vec<f64> = (0..=n)
        .map(|m| kernel_eval(&kernel, m as f64 * h))
        .collect::<Result<_>>()?;
    let a_grid: Vec<f64> = (0..=n)
        .map(|m| kernel_eval(&source, m as f64 * h))
        .collect::<Result<_>>()?;

    let mut u = Vec::with_capacity(n + 1);
    u.push(a_grid[0]);
    for step in 1..=n {
        let mut memory = 0.5 * k_grid[step] * u[0];
        for j in 1..step {
            memory += k_grid[step - j] * u[j];
        }
        u.push((a_grid[step] + 8.0 * h * memory) / diag);
    }
    Ok(VolterraSolution { h, u })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub k: usize,
    pub checked: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
    pub first_violation_t: Option<f64>,
}

impl EnvelopeCheck {
    pub fn passed(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0
    }
}

/// Checks, for `k = 2..K` and every record with `t <= t1`,
/// `-E_k(t) + 8 s*^(k) int_0^t u <= u^(k)(t) <= E_k(t) + lambda_1^{k-1} (u(t) - u(0))`
/// with `E_k(t) = slack * lambda_1^k sqrt(log d / d) e^{4 lambda_1 t}`.
pub fn moment_envelope_check(
    traj: &Trajectory,
    teacher: &Teacher,
    spec: &Spectrum,
    t1: f64,
    slack: f64,
) -> Vec<EnvelopeCheck> {
    let Some(first) = traj.records.first() else {
        return Vec::new();
    };
    let k_max = first.u_k.len();
    let l1 = spec.lambda_max();
    let d = spec.d as f64;
    let scale = slack * (d.ln() / d).sqrt();
    let u0 = first.u();

    // running trapezoid of u
    let mut integral = Vec::with_capacity(traj.records.len());
    let mut acc = 0.0;
    for (i, r) in traj.records.iter().enumerate() {
        if i > 0 {
            let p = &traj.records[i - 1];
            acc += 0.5 * (r.t - p.t) * (r.u() + p.u());
        }
        integral.push(acc);
    }

    (2..=k_max)
        .map(|k| {
            let sk = teacher.moment(spec, k);
            let mut out = EnvelopeCheck {
                k,
                checked: 0,
                lower_violations: 0,
                upper_violations: 0,
                first_violation_t: None,
            };
            for (r, &int_u) in traj.records.iter().zip(&integral) {
                if r.t > t1 {
                    break;
                }
                let env = scale * l1.powi(k as i32) * (4.0 * l1 * r.t).exp();
                let lower = -env + 8.0 * sk * int_u;
                let upper = env + l1.powi(k as i32 - 1) * (r.u() - u0);
                let uk = r.u_k[k - 1];
                out.checked += 1;
                let (lo_bad, hi_bad) = (uk < lower, uk > upper);
                out.lower_violations += lo_bad as usize;
                out.upper_violations += hi_bad as usize;
                if (lo_bad || hi_bad) && out.first_violation_t.is_none() {
                    out.first_violation_t = Some(r.t);
                }
            }
            out
        })
        .collect()
}
