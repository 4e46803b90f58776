//! Power-law covariance spectra and teacher vectors.
//!
//! The covariance is diagonal, `Q = diag(lambda_1, ..., lambda_d)` with
//! `lambda_i = i^{-a} / H_{d,a}` and `H_{d,a} = sum_j j^{-a}`, so that
//! `tr Q = 1`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, Error, Result};
use crate::rng::{rng_for, Stream};
use crate::scaling::fit_loglog_slope;

/// Number of teacher moments `s*^(k)` stored by default.
pub const DEFAULT_MOMENTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub d: usize,
    pub a: f64,
    pub lambdas: Vec<f64>,
    pub harmonic_sum: f64,
}

impl Spectrum {
    /// Builds the trace-normalized power-law spectrum.
    pub fn power_law(d: usize, a: f64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dimension d must be at least 1"));
        }
        if !a.is_finite() || a < 0.0 {
            return Err(invalid(format!("decay exponent a must be finite and >= 0, got {a}")));
        }
        // smallest terms first
        let harmonic_sum = (1..=d).rev().map(|i| (i as f64).powf(-a)).sum::<f64>();
        let lambdas = (1..=d)
            .map(|i| (i as f64).powf(-a) / harmonic_sum)
            .collect();
        Ok(Self {
            d,
            a,
            lambdas,
            harmonic_sum,
        })
    }

    /// Largest eigenvalue `lambda_1`.
    pub fn lambda_max(&self) -> f64 {
        self.lambdas[0]
    }

    /// Smallest eigenvalue `lambda_d`.
    pub fn lambda_min(&self) -> f64 {
        self.lambdas[self.d - 1]
    }

    /// `beta_d = 16 / H_{d,a}`, the rate prefactor of the mixing curve.
    pub fn beta(&self) -> f64 {
        16.0 / self.harmonic_sum
    }

    pub fn trace(&self) -> f64 {
        self.lambdas.iter().rev().sum()
    }

    /// `sum_i lambda_i^k x_i y_i`, the `Q^k` inner product.
    pub fn q_inner(&self, k: u32, x: &[f64], y: &[f64]) -> f64 {
        self.lambdas
            .iter()
            .zip(x.iter().zip(y))
            .map(|(&l, (&xi, &yi))| l.powi(k as i32) * xi * yi)
            .sum()
    }
}

/// Teacher normalization convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Normalization {
    /// `||w*||_Q = 1`, i.e. `s*^(1) = 1`.
    QUnit,
    /// `||w*||^2 = d`.
    EuclidD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub w_star: Vec<f64>,
    pub normalization: Normalization,
    /// `s_star_moments[k - 1] = s*^(k) = sum_i lambda_i^k (w*_i)^2`.
    pub s_star_moments: Vec<f64>,
    pub sigma_star_sq: f64,
    /// Seed the vector was finally drawn with (differs from the requested
    /// seed only after a zero-norm resample).
    pub seed: u64,
    pub resamples: u32,
}

impl Teacher {
    /// Wraps an explicit teacher vector, computing `k_max` moments.
    pub fn from_vector(
        spec: &Spectrum,
        w_star: Vec<f64>,
        normalization: Normalization,
        k_max: usize,
    ) -> Result<Self> {
        check_dims(spec.d, w_star.len(), "teacher")?;
        if k_max == 0 {
            return Err(invalid("number of moments must be at least 1"));
        }
        let s_star_moments = (1..=k_max as u32)
            .map(|k| spec.q_inner(k, &w_star, &w_star))
            .collect();
        let sigma_star_sq = w_star.iter().map(|x| x * x).sum::<f64>() / spec.d as f64;
        Ok(Self {
            w_star,
            normalization,
            s_star_moments,
            sigma_star_sq,
            seed: 0,
            resamples: 0,
        })
    }

    /// Draws a Gaussian teacher and normalizes it; stores `DEFAULT_MOMENTS` moments.
    pub fn sample(spec: &Spectrum, seed: u64, normalization: Normalization) -> Result<Self> {
        Self::sample_with_moments(spec, seed, normalization, DEFAULT_MOMENTS)
    }

    pub fn sample_with_moments(
        spec: &Spectrum,
        seed: u64,
        normalization: Normalization,
        k_max: usize,
    ) -> Result<Self> {
        let mut seed_used = seed;
        let mut resamples = 0u32;
        loop {
            let mut rng = rng_for(seed_used, Stream::Teacher);
            let raw: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm_sq = match normalization {
                Normalization::QUnit => spec.q_inner(1, &raw, &raw),
                Normalization::EuclidD => raw.iter().map(|x| x * x).sum::<f64>(),
            };
            if norm_sq > 0.0 && norm_sq.is_finite() {
                let scale = match normalization {
                    Normalization::QUnit => norm_sq.sqrt().recip(),
                    Normalization::EuclidD => (spec.d as f64 / norm_sq).sqrt(),
                };
                let w_star = raw.into_iter().map(|x| x * scale).collect();
                let mut t = Self::from_vector(spec, w_star, normalization, k_max)?;
                t.seed = seed_used;
                t.resamples = resamples;
                return Ok(t);
            }
            resamples += 1;
            seed_used = seed_used.wrapping_add(1);
        }
    }

    pub fn d(&self) -> usize {
        self.w_star.len()
    }

    /// `s*^(1) = ||w*||_Q^2`.
    pub fn s_star(&self) -> f64 {
        self.s_star_moments[0]
    }

    /// `s*^(k)` for any `k >= 1`; stored values are reused when available.
    pub fn moment(&self, spec: &Spectrum, k: usize) -> f64 {
        match self.s_star_moments.get(k.wrapping_sub(1)) {
            Some(&m) => m,
            None => spec.q_inner(k as u32, &self.w_star, &self.w_star),
        }
    }

    /// The teacher with its sign flipped; all moments are unchanged.
    pub fn negated(&self) -> Self {
        Self {
            w_star: self.w_star.iter().map(|x| -x).collect(),
            ..self.clone()
        }
    }
}

/// `T(lambda_c) = sum_{lambda_i < lambda_c} lambda_i (w*_i)^2`.
pub fn tail_mass(spec: &Spectrum, teacher: &Teacher, lambda_c: f64) -> f64 {
    // lambdas are sorted decreasingly, so the tail is a suffix
    let start = spec.lambdas.partition_point(|&l| l >= lambda_c);
    spec.lambdas[start..]
        .iter()
        .zip(&teacher.w_star[start..])
        .rev()
        .map(|(l, w)| l * w * w)
        .sum()
}

/// `sum_{lambda_i >= lambda_c} lambda_i (w*_i)^2`, the complement of [`tail_mass`].
pub fn head_mass(spec: &Spectrum, teacher: &Teacher, lambda_c: f64) -> f64 {
    let end = spec.lambdas.partition_point(|&l| l >= lambda_c);
    spec.lambdas[..end]
        .iter()
        .zip(&teacher.w_star[..end])
        .map(|(l, w)| l * w * w)
        .sum()
}

/// Index window of the tail-mass fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailFitWindow {
    /// Smallest eigen-index used as a cutoff.
    pub i_min: usize,
    /// Largest eigen-index as a fraction of `d`.
    pub i_max_fraction: f64,
    pub n_points: usize,
}

impl Default for TailFitWindow {
    fn default() -> Self {
        Self {
            i_min: 20,
            i_max_fraction: 0.1,
            n_points: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TailFit {
    pub slope: f64,
    pub r2: f64,
    /// `(lambda, mu_d((0, lambda]))` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

/// Fits the log-log slope of the teacher-weighted spectral measure
/// `mu_d((0, lambda]) = 8 sum_{lambda_i <= lambda} lambda_i (w*_i)^2`
/// over geometrically spaced cutoffs in the lower part of the spectrum.
/// For `a > 1` the slope approaches `1 - 1/a`.
pub fn tail_mass_exponent_check(spec: &Spectrum, teacher: &Teacher) -> Result<TailFit> {
    tail_mass_exponent_check_with(spec, teacher, TailFitWindow::default())
}

pub fn tail_mass_exponent_check_with(
    spec: &Spectrum,
    teacher: &Teacher,
    window: TailFitWindow,
) -> Result<TailFit> {
    check_dims(spec.d, teacher.d(), "teacher")?;
    if spec.a == 0.0 {
        return Err(Error::DegenerateSpectrum(
            "isotropic spectrum (a = 0) has no power-law tail".into(),
        ));
    }
    let i_min = window.i_min.max(1);
    let i_max = (window.i_max_fraction * spec.d as f64).floor() as usize;
    if i_max <= i_min || window.n_points < 3 {
        return Err(Error::InsufficientData(format!(
            "fit window [{i_min}, {i_max}] is empty for d = {}",
            spec.d
        )));
    }
    let ratio = (i_max as f64 / i_min as f64).powf(1.0 / (window.n_points - 1) as f64);
    let mut indices: Vec<usize> = (0..window.n_points)
        .map(|k| (i_min as f64 * ratio.powi(k as i32)).round() as usize)
        .collect();
    indices.dedup();

    // suffix sums of lambda_i (w*_i)^2, accumulated from the smallest term
    let mut suffix = vec![0.0; spec.d + 1];
    for i in (0..spec.d).rev() {
        let w = teacher.w_star[i];
        suffix[i] = suffix[i + 1] + spec.lambdas[i] * w * w;
    }
    let points: Vec<(f64, f64)> = indices
        .iter()
        .map(|&i| (spec.lambdas[i - 1], 8.0 * suffix[i - 1]))
        .filter(|&(_, m)| m > 0.0)
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "only {} cutoffs carry mass",
            points.len()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let fit = fit_loglog_slope(&xs, &ys, 0..xs.len())?;
    Ok(TailFit {
        slope: fit.slope,
        r2: fit.r2,
        points,
    })
}
