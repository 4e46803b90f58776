//! Config-driven experiment runner and canned figure reproductions.
//!
//! A run writes one trajectory CSV per sweep point (`t,u,s,u2,s2,mse,theta`),
//! a phases CSV with detected and predicted boundaries, and a JSON manifest.
//! CSV bodies depend only on the configuration; timestamps live in the manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{simulate_population, simulate_sgd, Mode, Problem, RecordSchedule, RunConfig};
use crate::error::{invalid, Error, Result};
use crate::phases::{detect_phases, first_record_with_u, predicted_t2, DEFAULT_DELTA, DEFAULT_EPSILON, DEFAULT_S0};
use crate::scaling::{compare_phase3, MixWeights};
use crate::stats::Trajectory;

pub const SCHEMA_VERSION: u32 = 1;
pub const TRAJECTORY_HEADER: [&str; 7] = ["t", "u", "s", "u2", "s2", "mse", "theta"];
/// Weight snapshots are kept only while `records * d` stays below this.
const SNAPSHOT_BUDGET: usize = 50_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FigureTarget {
    Fig1,
    Fig3,
    Fig4,
    Fig6,
    Fig7,
    Fig8,
    #[default]
    None,
}

impl FigureTarget {
    pub const ALL: [FigureTarget; 6] = [
        FigureTarget::Fig1,
        FigureTarget::Fig3,
        FigureTarget::Fig4,
        FigureTarget::Fig6,
        FigureTarget::Fig7,
        FigureTarget::Fig8,
    ];
}

impl fmt::Display for FigureTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FigureTarget::Fig1 => "FIG1",
            FigureTarget::Fig3 => "FIG3",
            FigureTarget::Fig4 => "FIG4",
            FigureTarget::Fig6 => "FIG6",
            FigureTarget::Fig7 => "FIG7",
            FigureTarget::Fig8 => "FIG8",
            FigureTarget::None => "NONE",
        };
        f.write_str(s)
    }
}

impl FromStr for FigureTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let up = if up.starts_with("FIG") || up == "NONE" {
            up
        } else {
            format!("FIG{up}")
        };
        [FigureTarget::None]
            .into_iter()
            .chain(FigureTarget::ALL)
            .find(|t| t.to_string() == up)
            .ok_or_else(|| invalid(format!("unknown figure target `{s}`")))
    }
}

/// Optional lists swept as a cross product; an empty list keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub a: Vec<f64>,
    pub d: Vec<usize>,
    pub eta: Vec<f64>,
    pub seed: Vec<u64>,
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        self.a.is_empty() && self.d.is_empty() && self.eta.is_empty() && self.seed.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub experiment_id: String,
    pub output_dir: PathBuf,
    pub figure_target: FigureTarget,
    pub sweep: Sweep,
    pub delta: f64,
    pub s0: f64,
    pub epsilon: f64,
    /// Free-form remarks copied into the manifest.
    pub notes: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            experiment_id: "run".into(),
            output_dir: PathBuf::from("out"),
            figure_target: FigureTarget::None,
            sweep: Sweep::default(),
            delta: DEFAULT_DELTA,
            s0: DEFAULT_S0,
            epsilon: DEFAULT_EPSILON,
            notes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub config: RunConfig,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.trim().is_empty() {
            return Err(invalid("experiment_id must be nonempty"));
        }
        if self
            .experiment_id
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || "-_.".contains(c)))
        {
            return Err(invalid("experiment_id may only use [A-Za-z0-9._-]"));
        }
        for (name, v) in [("delta", self.delta), ("s0", self.s0), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        self.sweep_points()?.iter().try_for_each(|p| p.config.validate())
    }

    /// Cross product of the sweep with per-point seeds `seed ^ hash(coordinates)`.
    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>> {
        if self.sweep.is_empty() {
            return Ok(vec![SweepPoint {
                label: "run".into(),
                config: self.run.clone(),
            }]);
        }
        let or_base = |v: &[f64], base: f64| if v.is_empty() { vec![base] } else { v.to_vec() };
        let a_vals = or_base(&self.sweep.a, self.run.a);
        let eta_vals = or_base(&self.sweep.eta, self.run.eta);
        let d_vals = if self.sweep.d.is_empty() { vec![self.run.d] } else { self.sweep.d.clone() };
        let seeds = if self.sweep.seed.is_empty() { vec![self.run.seed] } else { self.sweep.seed.clone() };
        let mut out = Vec::new();
        for &a in &a_vals {
            for &d in &d_vals {
                for &eta in &eta_vals {
                    for &seed in &seeds {
                        let coords = format!("a={a};d={d};eta={eta}");
                        out.push(SweepPoint {
                            label: format!("a{a}_d{d}_eta{eta}_seed{seed}"),
                            config: RunConfig {
                                a,
                                d,
                                eta,
                                seed: seed ^ coordinate_hash(&coords),
                                ..self.run.clone()
                            },
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

fn coordinate_hash(coords: &str) -> u64 {
    let h = Sha256::digest(coords.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Ok,
    Diverged { step: u64, t: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub a: f64,
    pub d: usize,
    pub eta: f64,
    pub seed: u64,
    pub config_digest: String,
    pub status: RunStatus,
    pub truncated: bool,
    pub teacher_flipped: bool,
    pub trajectory_csv: String,
    pub extra_files: Vec<String>,
    pub warnings: Vec<String>,
    pub phases: PhaseRow,
}

/// One line of the phases CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub t1: Option<f64>,
    pub t1_prime: Option<f64>,
    pub t2: Option<f64>,
    pub predicted_t2: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment_id: String,
    pub figure_target: FigureTarget,
    pub library_version: String,
    pub config: ExperimentConfig,
    pub sweep_size: usize,
    pub seeds: Vec<u64>,
    pub started_unix_s: f64,
    pub wall_time_s: f64,
    pub phases_csv: String,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

impl ExperimentOutput {
    pub fn any_diverged(&self) -> bool {
        self.manifest
            .runs
            .iter()
            .any(|r| matches!(r.status, RunStatus::Diverged { .. }))
    }

    /// Paths of every CSV written, in manifest order.
    pub fn csv_paths(&self) -> Vec<PathBuf> {
        let dir = self.manifest_path.parent().unwrap_or(Path::new("."));
        let mut v = Vec::new();
        for r in &self.manifest.runs {
            v.push(dir.join(&r.trajectory_csv));
            v.extend(r.extra_files.iter().map(|f| dir.join(f)));
        }
        v.push(dir.join(&self.manifest.phases_csv));
        v
    }
}

/// Fixed-width scientific notation with 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::NumericalFailure(format!("csv writer: {other:?}")),
    }
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let rows = traj.records.iter().map(|r| {
        vec![
            num(r.t),
            num(r.u()),
            num(r.s()),
            opt_num(r.u2()),
            opt_num(r.s2()),
            num(r.mse),
            num(r.theta),
        ]
    });
    write_csv(path, &TRAJECTORY_HEADER, rows)
}

fn run_point(cfg: &ExperimentConfig, point: &SweepPoint, dir: &Path) -> Result<RunSummary> {
    let mut rc = point.config.clone();
    let n_records = match rc.record_schedule {
        RecordSchedule::LogSpaced(n) => n,
        RecordSchedule::Every(k) => (rc.n_steps / k.max(1)) as usize + 2,
    };
    let snapshots = rc.keep_weights || n_records.saturating_mul(rc.d) <= SNAPSHOT_BUDGET;
    rc.keep_weights = snapshots;
    let problem = Problem::from_config(&rc)?;
    let result = match rc.mode {
        Mode::Population => simulate_population(&problem, &rc),
        Mode::Sgd => simulate_sgd(&problem, &rc),
    };
    let (traj, status) = match result {
        Ok(t) => (t, RunStatus::Ok),
        Err(Error::Divergence { step, t, partial }) => (*partial, RunStatus::Diverged { step, t }),
        Err(e) => return Err(e),
    };

    let stem = format!("{}_{}", cfg.experiment_id, point.label);
    let traj_name = format!("{stem}.csv");
    write_trajectory_csv(&dir.join(&traj_name), &traj)?;

    let mut phases = PhaseRow::default();
    let mut warnings = traj.warnings.clone();
    let has_u2 = traj.records.iter().all(|r| r.u_k.len() >= 2);
    if has_u2 && !traj.records.is_empty() {
        let rep = detect_phases(&traj, cfg.delta, cfg.s0, cfg.epsilon)?;
        phases.t1 = rep.t1();
        phases.t1_prime = rep.t1_prime();
        phases.t2 = rep.t2();
        if snapshots && rep.t1_prime.is_some() {
            match predicted_t2(&problem.teacher, &problem.spec, &traj, cfg.epsilon, cfg.s0) {
                Ok(p) => {
                    phases.predicted_t2 = Some(p.predicted_t2);
                    warnings.extend(p.warning);
                }
                Err(e) => warnings.push(format!("predicted T2 unavailable: {e}")),
            }
        }
    }

    let mut extra_files = Vec::new();
    match cfg.figure_target {
        FigureTarget::Fig6 => {
            if let Some(name) = write_phase3(&stem, dir, &traj, &problem)? {
                extra_files.push(name);
            } else {
                warnings.push("u never reached 0.9; no Phase-III comparison written".into());
            }
        }
        FigureTarget::Fig8 => {
            let name = format!("{stem}_one_minus_u.csv");
            let rows = traj
                .records
                .iter()
                .map(|r| vec![num(r.t), num(1.0 - r.u())]);
            write_csv(&dir.join(&name), &["t", "one_minus_u"], rows)?;
            extra_files.push(name);
        }
        _ => {}
    }

    Ok(RunSummary {
            label: point.label.clone(),
            a: rc.a,
            d: rc.d,
            eta: rc.eta,
            seed: rc.seed,
            config_digest: traj.config_digest.clone(),
            status,
            truncated: traj.truncated,
            teacher_flipped: traj.teacher_flipped,
            trajectory_csv: traj_name,
            extra_files,
            warnings,
        phases,
    })
}

/// Level of `u` marking `T2` in the Phase-III comparison.
pub const PHASE3_U_LEVEL: f64 = 0.9;

fn write_phase3(stem: &str, dir: &Path, traj: &Trajectory, problem: &Problem) -> Result<Option<String>> {
    let Some(idx) = first_record_with_u(traj, PHASE3_U_LEVEL) else {
        return Ok(None);
    };
    let Some(w) = traj.weights_at(idx) else {
        return Ok(None);
    };
    let u_t2 = traj.records[idx].u();
    let weights = MixWeights::from_student(w, &problem.teacher, idx, 1.0 - u_t2)?;
    let cmp = compare_phase3(traj, &problem.spec, &problem.teacher, &weights)?;
    let t2 = traj.records[idx].t;
    let name = format!("{stem}_phase3.csv");
    let rows = cmp.iter().map(|c| {
        vec![
            num(c.tau),
            num(t2 + c.tau),
            num(c.simulated),
            num(c.predicted),
            num(c.envelope),
        ]
    });
    write_csv(
        &dir.join(&name),
        &["tau", "t", "mse_simulated", "mse_predicted", "envelope"],
        rows,
    )?;
    Ok(Some(name))
}

/// Runs every sweep point (in parallel), writes CSVs and the manifest.
///
/// Divergent runs keep their partial CSV and are marked in the manifest;
/// they do not make this function fail.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let clock = Instant::now();
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let points = cfg.sweep_points()?;

    let runs: Vec<RunSummary> = points
        .par_iter()
        .map(|p| run_point(cfg, p, dir))
        .collect::<Result<_>>()?;

    let phases_name = format!("{}_phases.csv", cfg.experiment_id);
    let rows = runs.iter().map(|r| {
        vec![
            r.label.clone(),
            r.seed.to_string(),
            opt_num(r.phases.t1),
            opt_num(r.phases.t1_prime),
            opt_num(r.phases.t2),
            opt_num(r.phases.predicted_t2),
            num(cfg.delta),
            num(cfg.s0),
            num(cfg.epsilon),
        ]
    });
    write_csv(
        &dir.join(&phases_name),
        &["label", "seed", "t1", "t1_prime", "t2", "predicted_t2", "delta", "s0", "epsilon"],
        rows,
    )?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        experiment_id: cfg.experiment_id.clone(),
        figure_target: cfg.figure_target,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        sweep_size: points.len(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        started_unix_s: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
        phases_csv: phases_name,
        runs,
    };
    let manifest_path = dir.join(format!("{}_manifest.json", cfg.experiment_id));
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentOutput {
        manifest_path,
        manifest,
    })
}

/// Canned configuration for a figure target, with its free choices listed in `notes`.
pub fn canned_config(target: FigureTarget) -> Result<ExperimentConfig> {
    let base = |id: &str| ExperimentConfig {
        experiment_id: id.into(),
        figure_target: target,
        ..Default::default()
    };
    let sgd = |a: Vec<f64>, id: &str| {
        let mut c = base(id);
        c.run = RunConfig {
            d: 1000,
            eta: 1e-2,
            n_steps: 1_000_000,
            mode: Mode::Sgd,
            sgd_noise_sigma: 0.05,
            ..Default::default()
        };
        c.sweep.a = a;
        c.notes = vec![
            "online SGD with T = 1e6 steps".into(),
            "noise N(0, 0.05) read as standard deviation 0.05".into(),
        ];
        c
    };
    Ok(match target {
        FigureTarget::Fig1 => {
            let mut c = sgd(vec![1.5, 2.0, 3.0], "fig1");
            c.notes.push("a-sweep {1.5, 2, 3}".into());
            c
        }
        FigureTarget::Fig3 => {
            let mut c = base("fig3");
            c.run = RunConfig {
                d: 1000,
                a: 2.0,
                eta: 1e-2,
                n_steps: 10_000_000,
                ..Default::default()
            };
            c
        }
        FigureTarget::Fig4 => {
            let mut c = base("fig4");
            c.run = RunConfig {
                d: 1000,
                eta: 1e-3,
                n_steps: 100_000,
                ..Default::default()
            };
            c.sweep.a = vec![1.5, 2.0, 4.0];
            c.notes = vec!["a-sweep {1.5, 2, 4} and horizon t = 100 chosen".into()];
            c
        }
        FigureTarget::Fig6 => {
            let mut c = base("fig6");
            c.run = RunConfig {
                d: 300,
                a: 2.0,
                eta: 1e-3,
                n_steps: 20_000_000,
                keep_weights: true,
                ..Default::default()
            };
            c.notes = vec![
                "a = 2 and horizon t = 2e4 chosen".into(),
                format!("T2 taken at the first record with u >= {PHASE3_U_LEVEL}"),
            ];
            c
        }
        FigureTarget::Fig7 => sgd(vec![0.5, 1.0, 1.5], "fig7"),
        FigureTarget::Fig8 => {
            let mut c = base("fig8");
            c.run = RunConfig {
                eta: 1e-2,
                n_steps: 1_000_000,
                ..Default::default()
            };
            c.sweep.a = vec![1.5, 2.0, 4.0];
            c.sweep.d = vec![500, 2000, 5000];
            c.notes = vec!["eta = 1e-2 and horizon t = 1e4 chosen".into()];
            c
        }
        FigureTarget::None => return Err(invalid("reproduce needs a figure target")),
    })
}

/// Runs the canned configuration for `target` into `output_dir`.
pub fn reproduce(target: FigureTarget, output_dir: &Path, seed: Option<u64>) -> Result<ExperimentOutput> {
    let mut cfg = canned_config(target)?;
    cfg.output_dir = output_dir.to_path_buf();
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    run_experiment(&cfg)
}
