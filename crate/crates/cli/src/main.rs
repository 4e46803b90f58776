use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use phaselab::dynamics::{simulate_population, Mode, Problem, RecordSchedule};
use phaselab::experiment::{reproduce, run_experiment, ExperimentConfig, ExperimentOutput, FigureTarget};
use phaselab::phases::{detect_phases, predicted_t2};
use phaselab::scaling::{spectral_mix_asymptotic, spectral_mix_exact};
use phaselab::volterra::{moment_envelope_check, solve_dispersion, solve_volterra_u, PHASE_ONE_CLOCK};
use phaselab::{Error, Spectrum};
use serde_json::json;

/// Anisotropic phase retrieval: gradient flow, online SGD and scaling-law diagnostics.
#[derive(Parser)]
#[command(name = "phaselab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Population gradient descent; writes trajectory CSVs, a phases CSV and a manifest.
    Simulate(Common),
    /// Online SGD with one fresh sample per step.
    Sgd(Common),
    /// Escape rate from the dispersion relation `1 = 8 K^(rho)`.
    Dispersion {
        #[command(flatten)]
        common: Common,
        /// Clock constant `b` of the kernel.
        #[arg(long, default_value_t = PHASE_ONE_CLOCK)]
        b: f64,
    },
    /// Numerical solution of the escape-phase Volterra equation for `u(t)`.
    Volterra {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        #[arg(long = "t_max", default_value_t = 1.0)]
        t_max: f64,
    },
    /// Detected stopping times, the predicted `T2` and the moment-envelope check.
    Phases(Common),
    /// Spectral mixing curve `S_d(tau)` and its asymptotic regimes on a log grid.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long = "tau_min", default_value_t = 1e-3)]
        tau_min: f64,
        #[arg(long = "tau_max", default_value_t = 1e6)]
        tau_max: f64,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Canned configuration of a figure (FIG1, FIG3, FIG4, FIG6, FIG7, FIG8).
    Reproduce {
        target: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "experiment_id")]
    experiment_id: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "n_steps")]
    n_steps: Option<u64>,
    #[arg(long = "record_points")]
    record_points: Option<usize>,
    #[arg(long = "sgd_noise_sigma")]
    sgd_noise_sigma: Option<f64>,
    #[arg(long = "K")]
    k: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let r = &mut cfg.run;
        if let Some(v) = self.seed {
            r.seed = v;
        }
        if let Some(v) = self.d {
            r.d = v;
        }
        if let Some(v) = self.a {
            r.a = v;
        }
        if let Some(v) = self.eta {
            r.eta = v;
        }
        if let Some(v) = self.n_steps {
            r.n_steps = v;
        }
        if let Some(v) = self.record_points {
            r.record_schedule = RecordSchedule::LogSpaced(v);
        }
        if let Some(v) = self.sgd_noise_sigma {
            r.sgd_noise_sigma = v;
        }
        if let Some(v) = self.k {
            r.k = v;
        }
        if let Some(v) = &self.experiment_id {
            cfg.experiment_id = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug)]
struct RunsDiverged;

impl std::fmt::Display for RunsDiverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("at least one run diverged; partial CSVs are listed in the manifest")
    }
}

impl std::error::Error for RunsDiverged {}

fn report(out: &ExperimentOutput) {
    let m = &out.manifest;
    eprintln!("{} run(s) written; manifest {}", m.sweep_size, out.manifest_path.display());
    for r in &m.runs {
        for w in &r.warnings {
            eprintln!("warning [{}]: {w}", r.label);
        }
    }
}

fn run_with_mode(common: &Common, mode: Mode) -> Result<ExperimentOutput> {
    let mut cfg = common.load()?;
    cfg.run.mode = mode;
    eprintln!("sweep size: {}", cfg.sweep_points()?.len());
    let out = run_experiment(&cfg)?;
    report(&out);
    if out.any_diverged() {
        return Err(RunsDiverged.into());
    }
    Ok(out)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => run_with_mode(&c, Mode::Population).map(drop),
        Command::Sgd(c) => run_with_mode(&c, Mode::Sgd).map(drop),
        Command::Dispersion { common, b } => {
            let cfg = common.load()?;
            let p = Problem::from_config(&cfg.run)?;
            let res = solve_dispersion(&p.teacher, &p.spec, b, Some(&p.w0))?;
            let gap = res.gap(&p.spec);
            let v = json!({ "dispersion": res, "gap": gap, "lambda_1": p.spec.lambda_max() });
            print_json(&v)?;
            Ok(())
        }
        Command::Volterra { common, h, t_max } => {
            let cfg = common.load()?;
            let p = Problem::from_config(&cfg.run)?;
            let sol = solve_volterra_u(&p.w0, &p.teacher, &p.spec, h, t_max)?;
            fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join(format!("{}_volterra.csv", cfg.experiment_id));
            let body: String = sol
                .u
                .iter()
                .enumerate()
                .map(|(n, u)| format!("{:.16e},{:.16e}\n", sol.t(n), u))
                .collect();
            fs::write(&path, format!("t,u\n{body}"))?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Phases(common) => {
            let mut cfg = common.load()?;
            cfg.run.keep_weights = true;
            let p = Problem::from_config(&cfg.run)?;
            let traj = simulate_population(&p, &cfg.run)?;
            let rep = detect_phases(&traj, cfg.delta, cfg.s0, cfg.epsilon)?;
            let pred = predicted_t2(&p.teacher, &p.spec, &traj, cfg.epsilon, cfg.s0);
            let env = rep
                .t1()
                .map(|t1| moment_envelope_check(&traj, &p.teacher, &p.spec, t1, 1.0));
            let v = json!({
                "phases": rep,
                "predicted_t2": pred.as_ref().ok(),
                "predicted_t2_error": pred.as_ref().err().map(|e| e.to_string()),
                "moment_envelope": env,
            });
            print_json(&v)?;
            write_json(&cfg.output_dir, &format!("{}_phases.json", cfg.experiment_id), &v)
        }
        Command::Scaling {
            common,
            tau_min,
            tau_max,
            points,
        } => {
            let cfg = common.load()?;
            anyhow::ensure!(
                tau_min > 0.0 && tau_max > tau_min && points >= 2,
                Error::InvalidArgument("need 0 < tau_min < tau_max and points >= 2".into())
            );
            let spec = Spectrum::power_law(cfg.run.d, cfg.run.a)?;
            let mut body = String::from("tau,s_exact,regime,s_asymptotic\n");
            for k in 0..points {
                let tau = tau_min * (tau_max / tau_min).powf(k as f64 / (points - 1) as f64);
                let exact = spectral_mix_exact(&spec, tau)?;
                let (regime, approx) = match spectral_mix_asymptotic(&spec, tau) {
                    Ok((r, v)) => (format!("{r:?}").to_uppercase(), format!("{v:.16e}")),
                    Err(Error::UnsupportedExponent(_)) => ("UNSUPPORTED".into(), String::new()),
                    Err(e) => return Err(e.into()),
                };
                body.push_str(&format!("{tau:.16e},{exact:.16e},{regime},{approx}\n"));
            }
            fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join(format!("{}_scaling.csv", cfg.experiment_id));
            fs::write(&path, body)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Reproduce { target, seed, out } => {
            let target: FigureTarget = target.parse()?;
            let dir = out.unwrap_or_else(|| PathBuf::from("out").join(target.to_string().to_lowercase()));
            let res = reproduce(target, &dir, seed)?;
            report(&res);
            anyhow::ensure!(!res.any_diverged(), RunsDiverged);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<RunsDiverged>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Divergence { .. } => 3,
                Error::InvalidArgument(_) | Error::Json(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
