//! Command line front end: run configuration, the `kernels`, `simulate`
//! and `verify` commands, and their CSV/JSON outputs.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::characteristics::{trace_f_curve, trace_g_curve, ConstantSpeeds, FnSpeeds};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, TriField};
use crate::kernelsolve::{
    kernel_pde_residual, solve_backstepping_kernels, toy_kernel_error, GoursatOptions,
    KernelResidual, KernelSolution, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::model::{
    builtin_model, toy_analytic_kernels, ModelScales, PlantModel, SampledCoefficients,
};
use crate::simulator::{
    forward_transform, inverse_transform, simulate, v_norm, EnsembleState, InitialCondition, Mode,
    SimulationRecord, TargetSystem,
};
use crate::volterra::resolvent;

/// Exit code for a failed `verify` run.
pub const EXIT_VERIFY_FAILED: i32 = 5;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::NonConvergence { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ensemble-backstep",
    version,
    about = "Backstepping kernels and closed-loop simulation for ensemble transport PDEs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the kernel equations and write kernels.csv / kernels.json.
    Kernels(Overrides),
    /// Simulate and write timeseries.csv, snapshots and summary.json.
    Simulate(Overrides),
    /// Run the numerical self-checks and write verify.json.
    Verify(Overrides),
}

/// Command line settings; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub ny: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long = "t-final")]
    pub t_final: Option<f64>,
    /// open, closed, target or verify.
    #[arg(long)]
    pub mode: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Snapshot times, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "kernel-tol")]
    pub kernel_tol: Option<f64>,
    /// solved or analytic (toy model only).
    #[arg(long = "kernel-source")]
    pub kernel_source: Option<String>,
    /// default, mode-half, gaussian or zero.
    #[arg(long = "initial-condition")]
    pub initial_condition: Option<String>,
    /// Extra `key=value` settings, as in the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Open,
    Closed,
    Target,
    Verify,
}

impl FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verify" => Ok(Self::Verify),
            other => Ok(match Mode::from_str(other)? {
                Mode::Open => Self::Open,
                Mode::Closed => Self::Closed,
                Mode::Target => Self::Target,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSource {
    Solved,
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model_name: String,
    pub scales: ModelScales,
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub t_final: f64,
    pub mode: RunMode,
    pub kernel_tol: f64,
    pub max_iter: usize,
    pub kernel_source: KernelSource,
    pub snapshot_times: Vec<f64>,
    pub output_dir: PathBuf,
    pub initial_condition: String,
    pub ic_amp: f64,
    pub ic_center: f64,
    pub ic_width: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_name: "toy".into(),
            scales: ModelScales::default(),
            nx: 200,
            ny: 120,
            dt: 0.004,
            t_final: 5.0,
            mode: RunMode::Closed,
            kernel_tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            kernel_source: KernelSource::Solved,
            snapshot_times: vec![0.0, 0.16, 1.36, 1.82, 3.12],
            output_dir: PathBuf::from("out"),
            initial_condition: "default".into(),
            ic_amp: 1.0,
            ic_center: 0.5,
            ic_width: 0.1,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "model" | "model_name" => self.model_name = value.to_string(),
            "nx" => self.nx = parse(&key, value)?,
            "ny" => self.ny = parse(&key, value)?,
            "dt" => self.dt = parse(&key, value)?,
            "t_final" => self.t_final = parse(&key, value)?,
            "mode" => self.mode = value.parse()?,
            "kernel_tol" => self.kernel_tol = parse(&key, value)?,
            "max_iter" => self.max_iter = parse(&key, value)?,
            "kernel_source" => {
                self.kernel_source = match value {
                    "solved" => KernelSource::Solved,
                    "analytic" => KernelSource::Analytic,
                    _ => return Err(Error::Config(format!("unknown kernel source '{value}'"))),
                }
            }
            "snapshots" | "snapshot_times" => {
                self.snapshot_times = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(&key, s))
                    .collect::<Result<_>>()?
            }
            "out" | "output_dir" => self.output_dir = PathBuf::from(value),
            "initial_condition" => self.initial_condition = value.to_string(),
            "ic_amp" => self.ic_amp = parse(&key, value)?,
            "ic_center" => self.ic_center = parse(&key, value)?,
            "ic_width" => self.ic_width = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "scale_lambda" => self.scales.lambda = parse(&key, value)?,
            "scale_mu" => self.scales.mu = parse(&key, value)?,
            "scale_theta" => self.scales.theta = parse(&key, value)?,
            "scale_w" => self.scales.w = parse(&key, value)?,
            "scale_xi" => self.scales.xi = parse(&key, value)?,
            "scale_q" => self.scales.q = parse(&key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a flat config file. Blank lines and `#` comments are ignored.
    pub fn parse_file(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Config file (if any) followed by command line overrides.
    pub fn from_overrides(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::parse_file(
                &fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            )?,
            None => Self::default(),
        };
        if let Some(v) = &o.model {
            cfg.model_name = v.clone();
        }
        if let Some(v) = o.nx {
            cfg.nx = v;
        }
        if let Some(v) = o.ny {
            cfg.ny = v;
        }
        if let Some(v) = o.dt {
            cfg.dt = v;
        }
        if let Some(v) = o.t_final {
            cfg.t_final = v;
        }
        if let Some(v) = &o.mode {
            cfg.mode = v.parse()?;
        }
        if let Some(v) = &o.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &o.snapshots {
            cfg.snapshot_times = v.clone();
        }
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.kernel_tol {
            cfg.kernel_tol = v;
        }
        if let Some(v) = &o.kernel_source {
            cfg.set("kernel_source", v)?;
        }
        if let Some(v) = &o.initial_condition {
            cfg.initial_condition = v.clone();
        }
        for kv in &o.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.nx, self.ny, self.dt, self.t_final)
    }

    pub fn model(&self) -> Result<PlantModel> {
        let m = builtin_model(&self.model_name)?;
        if self.scales.is_identity() {
            Ok(m)
        } else {
            m.scaled(&self.scales)
        }
    }

    pub fn initial_condition(&self) -> Result<InitialCondition> {
        Ok(match self.initial_condition.as_str() {
            "default" => InitialCondition::Default { amp: self.ic_amp },
            "mode-half" => InitialCondition::HalfMode { amp: self.ic_amp },
            "gaussian" => InitialCondition::Gaussian {
                amp: self.ic_amp,
                center: self.ic_center,
                width: self.ic_width,
            },
            "zero" => InitialCondition::Zero,
            other => {
                return Err(Error::Config(format!(
                    "unknown initial condition '{other}' (default, mode-half, gaussian, zero)"
                )))
            }
        })
    }

    fn is_plain_toy(&self) -> bool {
        self.model_name == "toy" && self.scales.is_identity()
    }
}

/// `dt · max speed · nx`.
pub fn cfl_number(coeff: &SampledCoefficients) -> f64 {
    coeff.grid.dt * coeff.max_speed() * coeff.grid.nx as f64
}

fn cfl_precheck(coeff: &SampledCoefficients) -> Result<()> {
    let c = cfl_number(coeff);
    if c > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "CFL number {c:.4} exceeds 1 (reduce dt or nx)"
        )));
    }
    Ok(())
}

/// Kernels from the configured source.
pub fn obtain_kernels(
    cfg: &RunConfig,
    model: &PlantModel,
    grid: &GridSpec,
) -> Result<KernelSolution> {
    match cfg.kernel_source {
        KernelSource::Solved => {
            let opts = GoursatOptions {
                tol: cfg.kernel_tol,
                max_iter: cfg.max_iter,
                step: None,
            };
            solve_backstepping_kernels(model, grid, &opts)
        }
        KernelSource::Analytic if cfg.is_plain_toy() => {
            let (k, kt) = toy_analytic_kernels(grid);
            KernelSolution::from_kernels(*grid, k, kt)
        }
        KernelSource::Analytic => Err(Error::Config(
            "analytic kernels exist only for the unscaled toy model".into(),
        )),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Full precision, round-trippable float.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `x,xi,y,k,ktilde` rows, one per triangle node and ensemble point.
pub fn write_kernels_csv(
    path: &Path,
    grid: &GridSpec,
    k: &TriField,
    ktilde: &TriField,
) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "x,xi,y,k,ktilde")?;
    let ys = grid.y_nodes();
    let mut line = String::new();
    for (i, j) in grid.tri().nodes() {
        let kt = num(ktilde.get(i, j, 0));
        let (x, xi) = (num(grid.x(i)), num(grid.x(j)));
        for (l, y) in ys.iter().enumerate() {
            line.clear();
            let _ = writeln!(line, "{x},{xi},{},{},{kt}", num(*y), num(k.get(i, j, l)));
            f.write_all(line.as_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct KernelsReport {
    pub model: String,
    pub nx: usize,
    pub ny: usize,
    pub kernel_source: KernelSource,
    pub iterations: usize,
    pub final_delta: f64,
    pub residuals: KernelResidual,
    pub analytic_max_rel_error: Option<f64>,
    pub analytic_edge_abs_error: Option<f64>,
}

pub fn cmd_kernels(cfg: &RunConfig) -> Result<KernelsReport> {
    let grid = cfg.grid()?;
    let model = cfg.model()?;
    let coeff = model.sample(&grid)?;
    cfl_precheck(&coeff)?;
    let sol = obtain_kernels(cfg, &model, &grid)?;
    let residuals = kernel_pde_residual(&model, &coeff, &sol.k, &sol.ktilde)?;
    let (rel, edge) = if cfg.is_plain_toy() {
        let (r, e) = toy_kernel_error(&sol);
        (Some(r), Some(e))
    } else {
        (None, None)
    };
    let report = KernelsReport {
        model: cfg.model_name.clone(),
        nx: grid.nx,
        ny: grid.ny,
        kernel_source: cfg.kernel_source,
        iterations: sol.iterations,
        final_delta: sol.final_delta,
        residuals,
        analytic_max_rel_error: rel,
        analytic_edge_abs_error: edge,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    write_kernels_csv(
        &cfg.output_dir.join("kernels.csv"),
        &grid,
        &sol.k,
        &sol.ktilde,
    )?;
    write_json(&cfg.output_dir, "kernels.json", &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct SimulationSummary {
    pub mode: Mode,
    pub model: String,
    pub initial_norm: f64,
    pub decay_rate: Option<f64>,
    pub max_norm: f64,
    pub final_norm: f64,
    #[serde(rename = "max_abs_U")]
    pub max_abs_u: f64,
}

/// File name of the snapshot taken at time `t`.
pub fn snapshot_name(t: f64) -> String {
    format!("snap_{t}.csv")
}

fn write_timeseries(path: &Path, rec: &SimulationRecord) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "t,norm_joint,norm_u,norm_v,U,V_lyapunov")?;
    for n in 0..rec.times.len() {
        let v = rec.lyapunov.as_ref().map(|v| num(v[n])).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{v}",
            num(rec.times[n]),
            num(rec.joint_norms[n]),
            num(rec.u_norms[n]),
            num(rec.v_norms[n]),
            num(rec.control[n])
        )?;
    }
    f.flush()?;
    Ok(())
}

fn write_snapshot(path: &Path, grid: &GridSpec, s: &EnsembleState) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "x,y,u,v")?;
    let ys = grid.y_nodes();
    for i in 0..=grid.nx {
        let (x, v) = (num(grid.x(i)), num(s.v[i]));
        for (l, y) in ys.iter().enumerate() {
            writeln!(f, "{x},{},{},{v}", num(*y), num(s.u[[i, l]]))?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Runs the configured simulation and writes its outputs.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulationSummary> {
    let mode = match cfg.mode {
        RunMode::Open => Mode::Open,
        RunMode::Closed => Mode::Closed,
        RunMode::Target => Mode::Target,
        RunMode::Verify => {
            return Err(Error::Config(
                "mode 'verify' belongs to the verify command".into(),
            ))
        }
    };
    let grid = cfg.grid()?;
    let model = cfg.model()?;
    let coeff = model.sample(&grid)?;
    cfl_precheck(&coeff)?;
    let initial = cfg.initial_condition()?.build(&grid);
    let kernels = match mode {
        Mode::Open => None,
        _ => Some(obtain_kernels(cfg, &model, &grid)?),
    };
    let rec = simulate(
        &coeff,
        kernels.as_ref(),
        mode,
        &initial,
        &cfg.snapshot_times,
    )?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_timeseries(&dir.join("timeseries.csv"), &rec)?;
    for s in &rec.snapshots {
        write_snapshot(&dir.join(snapshot_name(s.requested)), &grid, &s.state)?;
    }
    let summary = SimulationSummary {
        mode,
        model: cfg.model_name.clone(),
        initial_norm: rec.joint_norms[0],
        decay_rate: rec.decay_rate,
        max_norm: rec.max_norm(),
        final_norm: rec.final_norm(),
        max_abs_u: rec.max_abs_control(),
    };
    write_json(dir, "summary.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub skipped: bool,
    pub value: Option<f64>,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            skipped: false,
            value: Some(value),
            threshold,
            detail: detail.into(),
        }
    }

    fn skipped(name: &str, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: true,
            skipped: true,
            value: None,
            threshold,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check_characteristics(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let speeds = ConstantSpeeds {
        lambda: 1.3,
        mu: 0.8,
    };
    let step = 1e-2;
    let (mut ef, mut eg) = (0.0_f64, 0.0_f64);
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(0.0..=1.0);
        let xi = rng.gen_range(0.0..=x);
        let y = rng.gen_range(0.0..=1.0);
        let f = trace_f_curve(&speeds, x, xi, y, step)?;
        ef = ef.max((f.s_end - (x - xi) / (speeds.lambda + speeds.mu)).abs());
        let g = trace_g_curve(&speeds, x, xi, step)?;
        eg = eg.max((g.s_end - xi / speeds.mu).abs());
    }
    let varying = FnSpeeds {
        lambda: |_: f64, _: f64| 1.0,
        mu: |x: f64| 1.0 + x,
        lambda_floor: 1.0,
        mu_floor: 1.0,
    };
    let s = trace_g_curve(&varying, 1.0, 0.5, step)?.s_end;
    Ok(vec![
        Check::at_most(
            "characteristic_f_constant_speeds",
            ef,
            1e-8,
            "max |s_f - (x - xi)/(lambda + mu)|",
        ),
        Check::at_most(
            "characteristic_g_constant_speeds",
            eg,
            1e-8,
            "max |s_F - xi/mu|",
        ),
        Check::at_most(
            "characteristic_g_varying_speed",
            (s - 1.5f64.ln()).abs(),
            1e-8,
            "mu = 1 + x, s_F(1, 0.5) vs ln 1.5",
        ),
    ])
}

fn check_resolvent() -> Result<Check> {
    let nx = 200;
    let one = TriField::from_fn(nx, 1, |_, _, _| 1.0);
    let r = resolvent(&one, 1e-14)?;
    let h = 1.0 / nx as f64;
    let err = r
        .values
        .tri()
        .nodes()
        .map(|(i, j)| (r.values.get(i, j, 0) - ((i - j) as f64 * h).exp()).abs())
        .fold(0.0, f64::max);
    Ok(Check::at_most(
        "volterra_resolvent_constant_kernel",
        err,
        1e-6,
        "kernel 1, nx = 200, vs e^(x - xi)",
    ))
}

/// Smooth random state built from a few low Fourier modes.
pub fn random_smooth_state(grid: &GridSpec, rng: &mut ChaCha8Rng) -> EnsembleState {
    let mut s = EnsembleState::zeros(grid);
    let pi = std::f64::consts::PI;
    let ys = grid.y_nodes();
    for m in 0..3 {
        for n in 0..3 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            for ((i, l), u) in s.u.indexed_iter_mut() {
                *u += a * (m as f64 * pi * grid.x(i) + 0.3).cos() * (n as f64 * pi * ys[l]).cos();
            }
        }
        let b: f64 = rng.gen_range(-1.0..1.0);
        for (i, v) in s.v.iter_mut().enumerate() {
            *v += b * ((m + 1) as f64 * pi * grid.x(i)).sin() + 0.2 * b;
        }
    }
    s
}

/// Largest relative error in `v` of inverse∘forward over random states.
pub fn round_trip_error(
    grid: &GridSpec,
    kernels: &KernelSolution,
    tl: &TargetSystem,
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..count {
        let s = random_smooth_state(grid, rng);
        let back = inverse_transform(
            &forward_transform(&s, &kernels.k, &kernels.ktilde)?,
            &tl.l,
            &tl.ltilde,
        )?;
        let diff: Vec<f64> = back.v.iter().zip(&s.v).map(|(a, b)| a - b).collect();
        worst = worst.max(v_norm(grid, &diff) / v_norm(grid, &s.v));
    }
    Ok(worst)
}

/// Worst one-step growth of V after the first step, and the worst
/// violation of the norm sandwich, along a target system run.
pub fn lyapunov_checks(rec: &SimulationRecord, tl: &TargetSystem) -> (f64, f64) {
    let v = rec.lyapunov.as_deref().unwrap_or(&[]);
    let growth = v
        .windows(2)
        .skip(1)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0] - 1.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let (lo, hi) = (tl.lyapunov.lower, tl.lyapunov.upper);
    let sandwich = v
        .iter()
        .zip(&rec.joint_norms)
        .map(|(v, n)| {
            let n2 = n * n;
            let slack = 1e-12 * (v.abs() + n2);
            (lo * n2 - v - slack).max(v - hi * n2 - slack).max(0.0)
        })
        .fold(0.0, f64::max);
    (growth, sandwich)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let grid = cfg.grid()?;
    let model = cfg.model()?;
    let coeff = model.sample(&grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();

    let cfl = cfl_number(&coeff);
    let cfl_ok = cfl <= 1.0 + 1e-12;
    checks.push(Check::at_most("cfl", cfl, 1.0, "dt * max speed * nx"));

    let kernels = obtain_kernels(cfg, &model, &grid)?;
    let diag = (0..=grid.nx)
        .flat_map(|i| (0..grid.ny).map(move |l| (i, l)))
        .map(|(i, l)| {
            let (x, y) = (grid.x(i), grid.y(l));
            let f = -model.xi(x, y) / (model.lambda(x, y) + model.mu(x));
            (kernels.k.get(i, i, l) - f).abs()
        })
        .fold(0.0, f64::max);
    checks.push(Check::at_most(
        "kernel_diagonal_condition",
        diag,
        1e-12,
        "max |k(x, x, y) - f(x, y)|",
    ));
    let g: Vec<f64> = (0..grid.ny)
        .map(|l| coeff.lambda[[0, l]] * coeff.q[l] / coeff.mu[0])
        .collect();
    let edge = (0..=grid.nx)
        .map(|i| {
            let phi = crate::grid::weighted_dot(&coeff.y_weights, &g, kernels.k.at(i, 0));
            (kernels.ktilde.get(i, 0, 0) - phi).abs()
        })
        .fold(0.0, f64::max);
    checks.push(Check::at_most(
        "kernel_edge_condition",
        edge,
        1e-6,
        "max |ktilde(x, 0) - <g, k(x, 0)>|",
    ));
    let res = kernel_pde_residual(&model, &coeff, &kernels.k, &kernels.ktilde)?;
    let bound = 10.0 / grid.nx as f64;
    checks.push(Check::at_most(
        "kernel_residual_k",
        res.k_rel,
        bound,
        "relative residual, bound 10/nx",
    ));
    checks.push(Check::at_most(
        "kernel_residual_ktilde",
        res.ktilde_rel,
        bound,
        "relative residual, bound 10/nx",
    ));
    if cfg.is_plain_toy() && cfg.kernel_source == KernelSource::Solved {
        let (rel, _) = toy_kernel_error(&kernels);
        checks.push(Check::at_most(
            "kernel_analytic_oracle",
            rel,
            0.02,
            "max relative error vs closed form",
        ));
    }

    checks.extend(check_characteristics(&mut rng)?);
    checks.push(check_resolvent()?);

    let target = TargetSystem::new(&coeff, &kernels)?;
    let rt = round_trip_error(&grid, &kernels, &target, &mut rng, 20)?;
    checks.push(Check::at_most(
        "transform_round_trip",
        rt,
        1e-3,
        "relative L2 error of v over 20 random states",
    ));

    if cfl_ok {
        let initial = cfg.initial_condition()?.build(&grid);
        let rec = simulate(&coeff, Some(&kernels), Mode::Target, &initial, &[])?;
        let (growth, sandwich) = lyapunov_checks(&rec, &target);
        checks.push(Check::at_most(
            "lyapunov_monotone",
            growth,
            1e-3,
            "max V(t+dt)/V(t) - 1 after the first step",
        ));
        checks.push(Check::at_most(
            "lyapunov_sandwich",
            sandwich,
            0.0,
            "violation of m|x|^2 <= V <= M|x|^2",
        ));
    } else {
        checks.push(Check::skipped(
            "lyapunov_monotone",
            1e-3,
            "skipped: CFL violated",
        ));
        checks.push(Check::skipped(
            "lyapunov_sandwich",
            0.0,
            "skipped: CFL violated",
        ));
    }

    let report = VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    write_json(&cfg.output_dir, "verify.json", &report)?;
    Ok(report)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Kernels(o) => {
            let r = cmd_kernels(&RunConfig::from_overrides(o)?)?;
            println!(
                "kernels: {} iterations, final delta {:.3e}, relative residual {:.3e}",
                r.iterations, r.final_delta, r.residuals.k_rel
            );
            if let Some(e) = r.analytic_max_rel_error {
                println!("max relative error vs closed form: {e:.3e}");
            }
            Ok(0)
        }
        Command::Simulate(o) => {
            let cfg = RunConfig::from_overrides(o)?;
            if cfg.mode == RunMode::Verify {
                return run_verify(&cfg);
            }
            let s = cmd_simulate(&cfg)?;
            println!(
                "{:?}: initial norm {:.4e}, max {:.4e}, final {:.4e}, decay rate {}",
                s.mode,
                s.initial_norm,
                s.max_norm,
                s.final_norm,
                s.decay_rate
                    .map(|r| format!("{r:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            Ok(0)
        }
        Command::Verify(o) => run_verify(&RunConfig::from_overrides(o)?),
    }
}

fn run_verify(cfg: &RunConfig) -> Result<i32> {
    let r = cmd_verify(cfg)?;
    for c in &r.checks {
        let status = if c.skipped {
            "SKIP"
        } else if c.passed {
            "PASS"
        } else {
            "FAIL"
        };
        let value = c
            .value
            .map(|v| format!("{v:.3e}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{status} {:<36} {value} (limit {:.1e})",
            c.name, c.threshold
        );
    }
    Ok(if r.passed { 0 } else { EXIT_VERIFY_FAILED })
}
