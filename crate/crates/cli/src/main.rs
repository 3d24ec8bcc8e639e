use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ilt_core::bounds::{bounds_report, BoundsError};
use ilt_core::ground_state::{kappa_from_ground_state, rate_constants, solve_ground_state, SolverError, SolverOptions};
use ilt_core::lab::{
    self, emit, rate_constants_for, run_lil_trace, run_mc_moments, run_simulation, run_tail_curve, ExperimentConfig,
    LabError, Table,
};
use ilt_core::moments::{
    expected_in, moment_bruteforce, moment_exact, Arithmetic, Budget, Method, MomentEntry, MomentError, MomentKey,
    MomentTable, MomentValue,
};
use serde::Serialize;
use serde_json::json;

/// Intersection local times of lattice random walks.
#[derive(Parser, Debug)]
#[command(name = "ilt", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Lattice dimension (selects srw<d> when --law is absent)
    #[arg(long, global = true)]
    d: Option<u32>,
    /// Number of independent walks
    #[arg(long, global = true)]
    p: Option<u32>,
    /// Built-in law name or path to a TOML law file
    #[arg(long, global = true)]
    law: Option<String>,
    /// Horizon
    #[arg(long, global = true)]
    n: Option<u64>,
    #[arg(long, global = true)]
    replicas: Option<u64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (stdout when absent)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<OutFormat>,
    /// TOML experiment file; its values override the flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for lab::Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => lab::Format::Csv,
            OutFormat::Json => lab::Format::Json,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum MomentMethod {
    Exact,
    Float,
    Brute,
    Mc,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-replica I_n, J_n and optional smoothed intersection
    Simulate {
        /// Smoothing radius factor ε
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Moments E I_n^m by exact formula, enumeration or Monte Carlo
    Moments {
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        m: Vec<u32>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "exact")]
        method: Vec<MomentMethod>,
    },
    /// Ground state, κ(d,p) and the rate constants (JSON)
    Kappa {
        /// Residual tolerance
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        rmax: Option<f64>,
        /// Grid step
        #[arg(long)]
        grid: Option<f64>,
        /// Skip the independent fixed-point solve
        #[arg(long)]
        no_cross_check: bool,
    },
    /// Resolvent integral and the κ / γ bounds (JSON)
    Bounds {
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Exceedance frequencies over a λ grid
    Tail {
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// LIL statistic along a geometric schedule
    Lil {
        #[arg(long)]
        start: Option<u64>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        max_n: Option<u64>,
    },
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    use std::io::ErrorKind::BrokenPipe;
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return e.kind() == BrokenPipe;
        }
        match cause.downcast_ref::<LabError>() {
            Some(LabError::Io(e)) => e.kind() == BrokenPipe,
            Some(LabError::Csv(e)) => matches!(e.kind(), csv::ErrorKind::Io(io) if io.kind() == BrokenPipe),
            Some(LabError::Json(e)) => e.io_error_kind() == Some(BrokenPipe),
            _ => false,
        }
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<LabError>() {
            return match e {
                LabError::Solver(s) => solver_code(s),
                LabError::Config(_) | LabError::Walk(_) | LabError::Budget(_) => 2,
                _ => 1,
            };
        }
        if let Some(s) = cause.downcast_ref::<SolverError>() {
            return solver_code(s);
        }
        if let Some(b) = cause.downcast_ref::<BoundsError>() {
            return match b {
                BoundsError::NoConvergence(_) => 3,
                _ => 2,
            };
        }
        if let Some(m) = cause.downcast_ref::<MomentError>() {
            return match m {
                MomentError::MissingMoment { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
    }
    1
}

fn solver_code(e: &SolverError) -> u8 {
    match e {
        SolverError::NoConvergence(_) | SolverError::ResidualTooLarge { .. } => 3,
        SolverError::ConditionViolated { .. } | SolverError::InvalidOption(_) => 2,
    }
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Flags first, then every key present in the config file on top.
fn experiment(common: &Common, tweak: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(d) = common.d {
        cfg.d = Some(d as usize);
        cfg.law = format!("srw{d}");
    }
    if let Some(law) = &common.law {
        cfg.law = law.clone();
    }
    if let Some(p) = common.p {
        cfg.p = p;
    }
    if let Some(n) = common.n {
        cfg.n = n;
    }
    if let Some(r) = common.replicas {
        cfg.replicas = r;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.out = common.out.clone();
    if let Some(f) = common.format {
        cfg.format = f.into();
    }
    tweak(&mut cfg);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let mut base = toml::Table::try_from(&cfg).map_err(|e| config_error(e.to_string()))?;
        merge_tables(&mut base, file);
        cfg = base.try_into().map_err(|e: toml::de::Error| config_error(format!("{}: {e}", path.display())))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_table(table: &dyn Table, cfg: &ExperimentConfig) -> Result<()> {
    match &cfg.out {
        Some(path) => lab::emit_to_path(table, cfg.format, path)?,
        None => emit(table, cfg.format, std::io::stdout().lock())?,
    }
    Ok(())
}

fn write_json_value<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

fn moments(common: &Common, ms: &[u32], methods: &[MomentMethod]) -> Result<()> {
    let cfg = experiment(common, |c| c.moments = ms.to_vec())?;
    let law = cfg.law()?;
    let budget = Budget::default();
    let mut table = MomentTable::new();
    let key = |m: u32| MomentKey { law: law.name().to_string(), p: cfg.p, n: cfg.n, m };
    for &method in methods {
        match method {
            MomentMethod::Exact | MomentMethod::Float => {
                let mode = if method == MomentMethod::Exact { Arithmetic::Exact } else { Arithmetic::Float };
                for &m in &cfg.moments {
                    let value = if m == 1 {
                        expected_in(&law, cfg.n, cfg.p, mode, &budget)?
                    } else {
                        moment_exact(&law, cfg.n, m, cfg.p, mode, &budget)?
                    };
                    table.insert(MomentEntry { key: key(m), value, method: Method::ExactFormula(mode) });
                }
            }
            MomentMethod::Brute => {
                for &m in &cfg.moments {
                    let value = moment_bruteforce(&law, cfg.n, m, cfg.p, &budget)?;
                    table.insert(MomentEntry {
                        key: key(m),
                        value: MomentValue::Exact(value),
                        method: Method::BruteForce,
                    });
                }
            }
            MomentMethod::Mc => {
                for e in run_mc_moments(&cfg)? {
                    table.insert(e);
                }
            }
        }
    }
    write_table(&table, &cfg)
}

fn kappa(common: &Common, tol: Option<f64>, rmax: Option<f64>, grid: Option<f64>, no_cross_check: bool) -> Result<()> {
    let d = common.d.unwrap_or(2);
    let p = common.p.unwrap_or(2);
    let mut opts = SolverOptions { cross_check: !no_cross_check, ..SolverOptions::default() };
    if let Some(t) = tol {
        opts.residual_tol = t;
    }
    if let Some(r) = rmax {
        opts.r_max = r;
    }
    if let Some(h) = grid {
        opts.h = h;
    }
    let gs = solve_ground_state(d, p, &opts)?;
    let k = kappa_from_ground_state(&gs);
    let law_name = common.law.clone().unwrap_or_else(|| format!("srw{d}"));
    let det = match lab::resolve_law(&law_name) {
        Ok(law) if law.dimension() == d as usize => law.covariance_det_f64(),
        Ok(_) => bail!(config_error(format!("law {law_name} does not live in d = {d}"))),
        Err(_) if common.law.is_none() => 1.0,
        Err(e) => return Err(e.into()),
    };
    let rc = rate_constants(d, p, k, det)?;
    let out = json!({
        "d": d,
        "p": p,
        "kappa": k,
        "M": rc.m,
        "gamma_alpha": rc.gamma_alpha,
        "lil_brownian": rc.lil_brownian,
        "moderate_coeff": rc.moderate_coeff,
        "lil_walk": rc.lil_walk,
        "det_gamma": det,
        "norms": { "mass": gs.mass, "gradient": gs.gradient, "potential": gs.potential },
        "residual": gs.residual,
        "solver_diagnostics": {
            "amplitude": gs.amplitude,
            "cutoff_radius": gs.r_max,
            "grid_step": gs.h,
            "identity_gap": gs.identity_gap(),
            "gn_ratio": gs.gn_ratio(),
            "details": gs.diagnostics,
        },
    });
    write_json_value(&out, common.out.as_deref())
}

fn bounds(common: &Common, tol: f64) -> Result<()> {
    let d = common.d.unwrap_or(2);
    let p = common.p.unwrap_or(2);
    let r = bounds_report(d, p, tol)?;
    write_json_value(&r, common.out.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Simulate { epsilon } => {
            let cfg = experiment(common, |c| {
                if epsilon.is_some() {
                    c.epsilon = epsilon;
                }
            })?;
            write_table(&run_simulation(&cfg)?, &cfg)
        }
        Command::Moments { m, method } => moments(common, &m, &method),
        Command::Kappa { tol, rmax, grid, no_cross_check } => kappa(common, tol, rmax, grid, no_cross_check),
        Command::Bounds { tol } => bounds(common, tol),
        Command::Tail { lambdas } => {
            let cfg = experiment(common, |c| {
                if let Some(l) = lambdas {
                    c.lambdas = l;
                }
            })?;
            let law = cfg.law()?;
            let rates = rate_constants_for(&law, cfg.p)?;
            write_table(&run_tail_curve(&cfg, &rates)?, &cfg)
        }
        Command::Lil { start, ratio, max_n } => {
            let cfg = experiment(common, |c| {
                let mut s = c.schedule.unwrap_or_default();
                if let Some(v) = start {
                    s.start = v;
                }
                if let Some(v) = ratio {
                    s.ratio = v;
                }
                if let Some(v) = max_n {
                    s.max_n = v;
                }
                c.schedule = Some(s);
            })?;
            let law = cfg.law()?;
            let rates = rate_constants_for(&law, cfg.p)?;
            write_table(&run_lil_trace(&cfg, rates.lil_walk)?, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("ILT_THREADS") {
        match v.parse::<usize>() {
            Ok(k) if k > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => {
                eprintln!("error: ILT_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
