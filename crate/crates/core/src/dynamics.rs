//! Time integrators for the student vector `w`.
//!
//! Population gradient descent discretizes `w' = -grad L(w)`, i.e.
//! `w_i' = 4 lambda_i (s* - 3 s) w_i + 8 lambda_i u w*_i`, with a fixed step
//! `eta`; online SGD replaces the population gradient by a one-sample
//! estimate. Continuous time is `t = step * eta`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::model::loss_from_overlaps;
use crate::rng::{rng_for, Stream};
use crate::spectrum::{Normalization, Spectrum, Teacher};
use crate::stats::{accumulate_theta, summary_stats, StatRecord, Trajectory};

pub const DEFAULT_RECORD_POINTS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordSchedule {
    /// Roughly log-spaced step indices, always including 0 and the last step.
    LogSpaced(usize),
    /// Every `k`-th step, plus the last step.
    Every(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Population,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub d: usize,
    pub a: f64,
    pub seed: u64,
    pub eta: f64,
    pub n_steps: u64,
    pub record_schedule: RecordSchedule,
    pub mode: Mode,
    pub sgd_noise_sigma: f64,
    pub teacher_mode: Normalization,
    /// Moment depth stored in each record.
    #[serde(rename = "K")]
    pub k: usize,
    pub integrator: Integrator,
    /// Keep a copy of `w` at every record.
    pub keep_weights: bool,
    /// Test hook: SGD steps use the exact population gradient instead of a sample.
    pub sgd_population_gradient: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 1000,
            a: 2.0,
            seed: 0,
            eta: 1e-2,
            n_steps: 10_000_000,
            record_schedule: RecordSchedule::LogSpaced(DEFAULT_RECORD_POINTS),
            mode: Mode::Population,
            sgd_noise_sigma: 0.0,
            teacher_mode: Normalization::QUnit,
            k: 4,
            integrator: Integrator::Euler,
            keep_weights: false,
            sgd_population_gradient: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("d must be at least 1"));
        }
        if !self.a.is_finite() || self.a < 0.0 {
            return Err(invalid("a must be finite and >= 0"));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(invalid("eta must be finite and >= 0"));
        }
        if self.n_steps == 0 {
            return Err(invalid("n_steps must be positive"));
        }
        if self.k == 0 {
            return Err(invalid("K must be at least 1"));
        }
        if !(self.sgd_noise_sigma >= 0.0) {
            return Err(invalid("sgd_noise_sigma must be >= 0"));
        }
        match self.record_schedule {
            RecordSchedule::LogSpaced(n) if n < 2 => {
                Err(invalid("LOG_SPACED schedule needs at least 2 points"))
            }
            RecordSchedule::Every(0) => Err(invalid("EVERY schedule needs k >= 1")),
            _ => Ok(()),
        }
    }

    /// Short hex digest of the serialized configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let hash = Sha256::digest(json.as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sorted, deduplicated step indices at which records are taken.
pub fn record_steps(schedule: RecordSchedule, n_steps: u64) -> Vec<u64> {
    let mut steps = match schedule {
        RecordSchedule::LogSpaced(n) => {
            let n = n.max(2);
            let top = (n_steps.max(1) as f64).ln();
            let mut v = vec![0u64];
            v.extend((0..n - 1).map(|k| {
                let frac = k as f64 / (n - 2).max(1) as f64;
                (top * frac).exp().round() as u64
            }));
            v
        }
        RecordSchedule::Every(k) => (0..=n_steps).step_by(k.max(1) as usize).collect(),
    };
    steps.push(n_steps);
    steps.retain(|&s| s <= n_steps);
    steps.sort_unstable();
    steps.dedup();
    steps
}

/// Uniform point on the unit sphere `S^{d-1}`.
pub fn sample_sphere(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, Stream::Init);
    loop {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return z.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Spectrum, teacher and initialization shared by every integrator for one
/// configuration. The teacher is negated once if `u(0) < 0`.
#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: Spectrum,
    pub teacher: Teacher,
    pub w0: Vec<f64>,
    pub teacher_flipped: bool,
}

impl Problem {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = Spectrum::power_law(cfg.d, cfg.a)?;
        let k_store = cfg.k.max(crate::spectrum::DEFAULT_MOMENTS);
        let teacher = Teacher::sample_with_moments(&spec, cfg.seed, cfg.teacher_mode, k_store)?;
        let w0 = sample_sphere(cfg.d, cfg.seed);
        Ok(Self::with_initialization(spec, teacher, w0))
    }

    pub fn with_initialization(spec: Spectrum, teacher: Teacher, w0: Vec<f64>) -> Self {
        let u0 = spec.q_inner(1, &w0, &teacher.w_star);
        let flip = u0 < 0.0;
        let teacher = if flip { teacher.negated() } else { teacher };
        Self {
            spec,
            teacher,
            w0,
            teacher_flipped: flip,
        }
    }
}

struct Recorder<'a> {
    problem: &'a Problem,
    cfg: &'a RunConfig,
    steps: Vec<u64>,
    next: usize,
    traj: Trajectory,
}

impl<'a> Recorder<'a> {
    fn new(problem: &'a Problem, cfg: &'a RunConfig) -> Self {
        let mut digest = cfg.digest();
        if problem.teacher_flipped {
            digest.push_str("+flip");
        }
        let mut warnings = Vec::new();
        let lin = 12.0 * cfg.eta * problem.spec.lambda_max() * problem.teacher.s_star().max(1.0);
        if lin >= 1.0 {
            warnings.push(format!(
                "12 * eta * lambda_1 = {lin:.3} >= 1: explicit Euler may be unstable"
            ));
        }
        Self {
            problem,
            cfg,
            steps: record_steps(cfg.record_schedule, cfg.n_steps),
            next: 0,
            traj: Trajectory {
                config_digest: digest,
                seed: cfg.seed,
                teacher_flipped: problem.teacher_flipped,
                warnings,
                weights: cfg.keep_weights.then(Vec::new),
                ..Default::default()
            },
        }
    }

    fn due(&self, step: u64) -> bool {
        self.steps.get(self.next) == Some(&step)
    }

    fn record(&mut self, step: u64, w: &[f64]) -> Result<()> {
        let p = self.problem;
        let mut r: StatRecord = summary_stats(w, &p.teacher, &p.spec, self.cfg.k)?;
        r.t = step as f64 * self.cfg.eta;
        r.step = step;
        self.traj.records.push(r);
        if let Some(ws) = self.traj.weights.as_mut() {
            ws.push(w.to_vec());
        }
        self.next += 1;
        Ok(())
    }

    fn finish(self) -> Result<Trajectory> {
        let mut traj = self.traj;
        if traj.records.len() >= 2 && traj.records[1].t == traj.records[0].t {
            // eta = 0: all records share t = 0; theta stays 0.
            return Ok(traj);
        }
        traj = accumulate_theta(traj)?;
        Ok(traj)
    }

    fn diverged(self, step: u64) -> Error {
        let mut traj = self.traj;
        traj.truncated = true;
        traj.warnings.push(format!("non-finite state at step {step}"));
        if let Some(ws) = traj.weights.as_mut() {
            ws.truncate(traj.records.len());
        }
        let traj = accumulate_theta(traj.clone()).unwrap_or(traj);
        Error::Divergence {
            step,
            t: step as f64 * self.cfg.eta,
            partial: Box::new(traj),
        }
    }
}

/// `(s, u)` with `s = sum lambda w^2`, `u = sum lambda w w*`.
fn overlaps(lambdas: &[f64], w: &[f64], t: &[f64]) -> (f64, f64) {
    let (mut s, mut u) = (0.0, 0.0);
    for ((&l, &wi), &ti) in lambdas.iter().zip(w).zip(t) {
        let lw = l * wi;
        s += lw * wi;
        u += lw * ti;
    }
    (s, u)
}

/// One explicit Euler step in place; returns the updated `(s, u)`.
fn euler_step(lambdas: &[f64], w: &mut [f64], t: &[f64], s_star: f64, s: f64, u: f64, eta: f64) -> (f64, f64) {
    let cw = 4.0 * (s_star - 3.0 * s);
    let ct = 8.0 * u;
    let (mut s_new, mut u_new) = (0.0, 0.0);
    for ((&l, wi), &ti) in lambdas.iter().zip(w.iter_mut()).zip(t) {
        let nw = *wi + eta * l * (cw * *wi + ct * ti);
        *wi = nw;
        let lw = l * nw;
        s_new += lw * nw;
        u_new += lw * ti;
    }
    (s_new, u_new)
}

fn drift_into(lambdas: &[f64], w: &[f64], t: &[f64], s_star: f64, out: &mut [f64]) {
    let (s, u) = overlaps(lambdas, w, t);
    let cw = 4.0 * (s_star - 3.0 * s);
    let ct = 8.0 * u;
    for (((o, &l), &wi), &ti) in out.iter_mut().zip(lambdas).zip(w).zip(t) {
        *o = l * (cw * wi + ct * ti);
    }
}

struct Rk4Buffers {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Buffers {
    fn new(d: usize) -> Self {
        Self {
            k1: vec![0.0; d],
            k2: vec![0.0; d],
            k3: vec![0.0; d],
            k4: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }

    fn step(&mut self, lambdas: &[f64], w: &mut [f64], t: &[f64], s_star: f64, eta: f64) {
        drift_into(lambdas, w, t, s_star, &mut self.k1);
        for ((x, &wi), &k) in self.tmp.iter_mut().zip(w.iter()).zip(&self.k1) {
            *x = wi + 0.5 * eta * k;
        }
        drift_into(lambdas, &self.tmp, t, s_star, &mut self.k2);
        for ((x, &wi), &k) in self.tmp.iter_mut().zip(w.iter()).zip(&self.k2) {
            *x = wi + 0.5 * eta * k;
        }
        drift_into(lambdas, &self.tmp, t, s_star, &mut self.k3);
        for ((x, &wi), &k) in self.tmp.iter_mut().zip(w.iter()).zip(&self.k3) {
            *x = wi + eta * k;
        }
        drift_into(lambdas, &self.tmp, t, s_star, &mut self.k4);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi += eta / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Population gradient descent from a uniform point on the unit sphere.
pub fn run_population_flow(cfg: &RunConfig) -> Result<Trajectory> {
    let problem = Problem::from_config(cfg)?;
    simulate_population(&problem, cfg)
}

/// Population gradient descent for an explicit problem instance.
pub fn simulate_population(problem: &Problem, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let lambdas = &problem.spec.lambdas;
    let t = &problem.teacher.w_star;
    let s_star = problem.teacher.s_star();
    let mut w = problem.w0.clone();
    let mut rec = Recorder::new(problem, cfg);
    let mut rk4 = (cfg.integrator == Integrator::Rk4).then(|| Rk4Buffers::new(w.len()));

    let (mut s, mut u) = overlaps(lambdas, &w, t);
    let loss0 = loss_from_overlaps(s, u, s_star);
    rec.record(0, &w)?;
    for step in 1..=cfg.n_steps {
        match rk4.as_mut() {
            None => (s, u) = euler_step(lambdas, &mut w, t, s_star, s, u, cfg.eta),
            Some(buf) => {
                buf.step(lambdas, &mut w, t, s_star, cfg.eta);
                (s, u) = overlaps(lambdas, &w, t);
            }
        }
        if !(s.is_finite() && u.is_finite()) {
            return Err(rec.diverged(step));
        }
        if rec.due(step) {
            rec.record(step, &w)?;
        }
    }
    let loss_end = loss_from_overlaps(s, u, s_star);
    let mut traj = rec.finish()?;
    if loss_end > loss0 + 1e-9 {
        traj.descent_violation = Some(loss_end - loss0);
        traj.warnings
            .push(format!("final loss {loss_end} exceeds initial loss {loss0}"));
    }
    Ok(traj)
}

/// One-sample stochastic gradient of the quartic loss:
/// `4 ((x.w)^2 - y) (x.w) x` with `y = (x.w*)^2 + xi`.
pub fn sample_gradient<R: Rng + ?Sized>(
    sqrt_lambdas: &[f64],
    w: &[f64],
    teacher: &[f64],
    noise_sigma: f64,
    rng: &mut R,
    x: &mut [f64],
    out: &mut [f64],
) {
    let (mut p, mut q) = (0.0, 0.0);
    for ((xi, &sl), (&wi, &ti)) in x.iter_mut().zip(sqrt_lambdas).zip(w.iter().zip(teacher)) {
        *xi = sl * rng.sample::<f64, _>(StandardNormal);
        p += *xi * wi;
        q += *xi * ti;
    }
    let mut y = q * q;
    if noise_sigma > 0.0 {
        y += noise_sigma * rng.sample::<f64, _>(StandardNormal);
    }
    let c = 4.0 * (p * p - y) * p;
    for (o, &xi) in out.iter_mut().zip(x.iter()) {
        *o = c * xi;
    }
}

/// Online SGD with one fresh Gaussian sample per step.
pub fn run_online_sgd(cfg: &RunConfig) -> Result<Trajectory> {
    let problem = Problem::from_config(cfg)?;
    simulate_sgd(&problem, cfg)
}

pub fn simulate_sgd(problem: &Problem, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if cfg.mode != Mode::Sgd {
        return Err(invalid("run_online_sgd requires mode = SGD"));
    }
    let lambdas = &problem.spec.lambdas;
    let t = &problem.teacher.w_star;
    let s_star = problem.teacher.s_star();
    let sqrt_l: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    let mut rng = rng_for(cfg.seed, Stream::Samples);
    let mut w = problem.w0.clone();
    let mut x = vec![0.0; w.len()];
    let mut g = vec![0.0; w.len()];
    let mut rec = Recorder::new(problem, cfg);

    let (mut s, mut u) = overlaps(lambdas, &w, t);
    rec.record(0, &w)?;
    for step in 1..=cfg.n_steps {
        if cfg.sgd_population_gradient {
            (s, u) = euler_step(lambdas, &mut w, t, s_star, s, u, cfg.eta);
        } else {
            sample_gradient(&sqrt_l, &w, t, cfg.sgd_noise_sigma, &mut rng, &mut x, &mut g);
            let mut finite = true;
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= cfg.eta * gi;
                finite &= wi.is_finite();
            }
            if !finite {
                return Err(rec.diverged(step));
            }
        }
        if !(s.is_finite() && u.is_finite()) {
            return Err(rec.diverged(step));
        }
        if rec.due(step) {
            rec.record(step, &w)?;
        }
    }
    rec.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Closure {
    /// `u^(K+1) = s^(K+1) = 0`.
    Zero,
    /// Level `K` scaled by `s*^(K+1) / s*^(K)`.
    Geometric,
}

/// Integrates the moment hierarchy
/// `s^(k)' = 8 (s* - 3s) s^(k+1) + 16 u u^(k+1)`,
/// `u^(k)' = 4 (s* - 3s) u^(k+1) + 8 u s*^(k+1)`
/// for `k <= k_trunc` with explicit Euler, closing level `k_trunc + 1`.
/// Records carry `k_trunc` moments and `mse = NaN` (not observable from moments).
pub fn run_truncated_hierarchy(cfg: &RunConfig, k_trunc: usize, closure: Closure) -> Result<Trajectory> {
    let problem = Problem::from_config(cfg)?;
    simulate_truncated(&problem, cfg, k_trunc, closure)
}

pub fn simulate_truncated(
    problem: &Problem,
    cfg: &RunConfig,
    k_trunc: usize,
    closure: Closure,
) -> Result<Trajectory> {
    cfg.validate()?;
    if k_trunc < 2 {
        return Err(invalid("truncation depth must be at least 2"));
    }
    let spec = &problem.spec;
    let teacher = &problem.teacher;
    let s_star: Vec<f64> = (1..=k_trunc + 1).map(|k| teacher.moment(spec, k)).collect();
    let init = summary_stats(&problem.w0, teacher, spec, k_trunc)?;
    let mut u = init.u_k.clone();
    let mut s = init.s_k.clone();
    let ratio = if s_star[k_trunc - 1] > 0.0 {
        s_star[k_trunc] / s_star[k_trunc - 1]
    } else {
        0.0
    };
    let mut du = vec![0.0; k_trunc];
    let mut ds = vec![0.0; k_trunc];

    let mut digest = cfg.digest();
    digest.push_str(&format!("+trunc{k_trunc}"));
    if problem.teacher_flipped {
        digest.push_str("+flip");
    }
    let mut traj = Trajectory {
        config_digest: digest,
        seed: cfg.seed,
        teacher_flipped: problem.teacher_flipped,
        ..Default::default()
    };
    let steps = record_steps(cfg.record_schedule, cfg.n_steps);
    let mut next = 0;
    let push = |traj: &mut Trajectory, step: u64, u: &[f64], s: &[f64]| {
        traj.records.push(StatRecord {
            t: step as f64 * cfg.eta,
            step,
            u_k: u.to_vec(),
            s_k: s.to_vec(),
            mse: f64::NAN,
            theta: 0.0,
        });
    };
    push(&mut traj, 0, &u, &s);
    next += 1;
    for step in 1..=cfg.n_steps {
        let c = s_star[0] - 3.0 * s[0];
        let u1 = u[0];
        for k in 0..k_trunc {
            let (u_next, s_next) = if k + 1 < k_trunc {
                (u[k + 1], s[k + 1])
            } else {
                match closure {
                    Closure::Zero => (0.0, 0.0),
                    Closure::Geometric => (u[k] * ratio, s[k] * ratio),
                }
            };
            du[k] = 4.0 * c * u_next + 8.0 * u1 * s_star[k + 1];
            ds[k] = 8.0 * c * s_next + 16.0 * u1 * u_next;
        }
        for k in 0..k_trunc {
            u[k] += cfg.eta * du[k];
            s[k] += cfg.eta * ds[k];
        }
        if !(u[0].is_finite() && s[0].is_finite()) {
            traj.truncated = true;
            let traj = accumulate_theta(traj.clone()).unwrap_or(traj);
            return Err(Error::Divergence {
                step,
                t: step as f64 * cfg.eta,
                partial: Box::new(traj),
            });
        }
        if steps.get(next) == Some(&step) {
            push(&mut traj, step, &u, &s);
            next += 1;
        }
    }
    if cfg.eta > 0.0 {
        traj = accumulate_theta(traj)?;
    }
    Ok(traj)
}

/// Largest relative deviation of `u` between two trajectories recorded on the
/// same schedule, over records where the reference `u` is at most `u_cap`.
pub fn max_relative_u_deviation(reference: &Trajectory, other: &Trajectory, u_cap: f64) -> f64 {
    reference
        .records
        .iter()
        .zip(&other.records)
        .take_while(|(r, _)| r.u() <= u_cap)
        .map(|(r, o)| {
            let dev = ((o.u() - r.u()) / r.u()).abs();
            if dev.is_nan() {
                f64::INFINITY
            } else {
                dev
            }
        })
        .fold(0.0, f64::max)
}
