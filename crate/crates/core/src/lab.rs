//! Monte Carlo experiments: moments of `I_n`, exceedance curves, LIL
//! traces and the `I_n / n` scaling check, with CSV and JSON emitters.
//!
//! Replica `i` drives walk `j` with stream `i * p + j` of the configured
//! seed, and all pooled statistics are exact integer sums, so results do
//! not depend on thread count or on how replicas are batched.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ground_state::{
    kappa_from_ground_state, rate_constants, solve_ground_state, RateConstants, SolverError, SolverOptions,
};
use crate::intersection::{smoothed_intersection, IntersectionAccumulator};
use crate::moments::{Method, MomentEntry, MomentKey, MomentTable, MomentValue};
use crate::walk::{
    local_time_field, sample_path, smoothed_local_time, SmoothConfig, StepLaw, StreamId, WalkError, WalkSampler,
};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("work budget exceeded: {0}")]
    Budget(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed table: {0}")]
    Parse(String),
}

fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

/// Scale `b_n` of the moderate-deviation thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BnRule {
    /// `max(1, ln ln n)`
    #[default]
    LogLog,
    Constant(f64),
    /// `n^a`
    Power(f64),
}

impl BnRule {
    pub fn eval(&self, n: u64) -> f64 {
        let x = n as f64;
        match *self {
            BnRule::LogLog => loglog(n),
            BnRule::Constant(c) => c,
            BnRule::Power(a) => x.powf(a),
        }
    }
}

/// `max(1, ln ln n)`.
pub fn loglog(n: u64) -> f64 {
    let x = n as f64;
    if x <= 1.0 {
        1.0
    } else {
        x.ln().ln().max(1.0)
    }
}

/// Geometric checkpoints `n_{k+1} = ⌈ρ n_k⌉` from `start` through `max_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub start: u64,
    pub ratio: f64,
    pub max_n: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { start: 16, ratio: 1.5, max_n: 1_000_000 }
    }
}

impl Schedule {
    pub fn checkpoints(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut n = self.start.max(1);
        while n < self.max_n {
            out.push(n);
            n = ((n as f64 * self.ratio).ceil() as u64).max(n + 1);
        }
        out.push(self.max_n);
        out
    }

    fn validate(&self) -> Result<(), LabError> {
        if self.start == 0 || self.start > self.max_n {
            return Err(config_err("schedule needs 1 <= start <= max_n"));
        }
        if !(self.ratio > 1.0 && self.ratio.is_finite()) {
            return Err(config_err("schedule ratio must exceed 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Built-in law name (`srw2`, `srw3`, ...) or path to a TOML law file.
    pub law: String,
    /// Optional dimension check against the law.
    pub d: Option<usize>,
    pub p: u32,
    pub n: u64,
    pub replicas: u64,
    pub seed: u64,
    pub b_n: BnRule,
    pub lambdas: Vec<f64>,
    pub epsilon: Option<f64>,
    pub schedule: Option<Schedule>,
    pub moments: Vec<u32>,
    /// Cap on `replicas * p * n` sampled steps.
    pub max_steps: u64,
    pub out: Option<std::path::PathBuf>,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            law: "srw2".into(),
            d: None,
            p: 2,
            n: 64,
            replicas: 1000,
            seed: 1,
            b_n: BnRule::LogLog,
            lambdas: vec![0.05, 0.1, 0.2, 0.4, 0.8],
            epsilon: None,
            schedule: None,
            moments: vec![1, 2],
            max_steps: 50_000_000_000,
            out: None,
            format: Format::Csv,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, LabError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn law(&self) -> Result<StepLaw, LabError> {
        resolve_law(&self.law)
    }

    /// Checks everything that does not need the law itself.
    pub fn validate(&self) -> Result<(), LabError> {
        if self.replicas == 0 {
            return Err(config_err("replicas must be at least 1"));
        }
        if self.p == 0 {
            return Err(config_err("p must be at least 1"));
        }
        if self.n == 0 && self.schedule.is_none() {
            return Err(config_err("n must be at least 1"));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(config_err("λ values must be positive"));
        }
        if self.lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("λ grid must be strictly increasing"));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(config_err("ε must be positive"));
            }
        }
        if self.moments.contains(&0) {
            return Err(config_err("moment orders start at 1"));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        let (lo, hi) = self.probed_range();
        let (b_lo, b_hi) = (self.b_n.eval(lo), self.b_n.eval(hi));
        if !(b_lo > 0.0 && b_hi.is_finite()) {
            return Err(config_err("b_n must be positive and finite"));
        }
        if b_hi < b_lo || b_hi / hi as f64 > b_lo / lo as f64 {
            return Err(config_err(format!(
                "b_n must grow while b_n / n shrinks on [{lo}, {hi}]: b = {b_lo} .. {b_hi}"
            )));
        }
        Ok(())
    }

    fn probed_range(&self) -> (u64, u64) {
        match &self.schedule {
            Some(s) => (s.start, s.max_n),
            None => (self.n, self.n),
        }
    }

    fn check_budget(&self, horizon: u64, replicas: u64) -> Result<(), LabError> {
        let steps = (replicas as u128) * (self.p as u128) * (horizon as u128);
        if steps > self.max_steps as u128 {
            return Err(LabError::Budget(format!("{steps} steps > cap {}", self.max_steps)));
        }
        Ok(())
    }
}

/// A built-in law name, or a path to a TOML law description.
pub fn resolve_law(spec: &str) -> Result<StepLaw, LabError> {
    match StepLaw::builtin(spec) {
        Ok(law) => Ok(law),
        Err(WalkError::UnknownLaw(_)) => {
            let path = Path::new(spec);
            if !path.exists() {
                return Err(config_err(format!("unknown law {spec:?}: not a built-in name or a file")));
            }
            let text = std::fs::read_to_string(path)?;
            Ok(StepLaw::from_toml_str(&text)?)
        }
        Err(e) => Err(e.into()),
    }
}

fn checked_law(cfg: &ExperimentConfig) -> Result<StepLaw, LabError> {
    cfg.validate()?;
    let law = cfg.law()?;
    if let Some(d) = cfg.d {
        if d != law.dimension() {
            return Err(config_err(format!("d = {d} but law {} lives in d = {}", law.name(), law.dimension())));
        }
    }
    Ok(law)
}

/// One replica: `I` and `J` at the horizon plus `I` at each checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaOutcome {
    pub replica: u64,
    pub intersection: u128,
    pub range: u64,
    pub checkpoints: Vec<u128>,
}

/// Runs replica `replica` to `checkpoints.last()` (or `n`).
pub fn run_replica(
    law: &StepLaw,
    p: u32,
    n: u64,
    seed: u64,
    replica: u64,
    checkpoints: &[u64],
) -> Result<ReplicaOutcome, LabError> {
    let p_us = p as usize;
    let mut samplers = (0..p_us)
        .map(|j| WalkSampler::new(law, n, StreamId::new(seed, replica * p as u64 + j as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut acc = IntersectionAccumulator::new(p_us);
    let mut round = vec![0u64; p_us];
    let mut marks = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    for k in 1..=n {
        for (slot, s) in round.iter_mut().zip(samplers.iter_mut()) {
            *slot = s.step().1;
        }
        acc.advance(&round);
        while next.peek().is_some_and(|&&c| c == k) {
            marks.push(acc.intersection());
            next.next();
        }
    }
    Ok(ReplicaOutcome { replica, intersection: acc.intersection(), range: acc.range(), checkpoints: marks })
}

fn run_replicas(
    law: &StepLaw,
    p: u32,
    n: u64,
    seed: u64,
    replicas: Range<u64>,
    checkpoints: &[u64],
) -> Result<Vec<ReplicaOutcome>, LabError> {
    replicas.into_par_iter().map(|i| run_replica(law, p, n, seed, i, checkpoints)).collect()
}

/// Exact running sums of `I^m` and `I^{2m}` over replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentAccumulator {
    orders: Vec<u32>,
    count: u64,
    sums: Vec<BigUint>,
    sums_sq: Vec<BigUint>,
}

impl MomentAccumulator {
    pub fn new(orders: &[u32]) -> Self {
        Self {
            orders: orders.to_vec(),
            count: 0,
            sums: vec![BigUint::zero(); orders.len()],
            sums_sq: vec![BigUint::zero(); orders.len()],
        }
    }

    pub fn push(&mut self, value: u128) {
        let v = BigUint::from(value);
        for (k, &m) in self.orders.iter().enumerate() {
            let power = v.pow(m);
            self.sums_sq[k] += &power * &power;
            self.sums[k] += power;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), LabError> {
        if self.orders != other.orders {
            return Err(config_err("cannot merge accumulators over different moment orders"));
        }
        self.count += other.count;
        for k in 0..self.orders.len() {
            self.sums[k] += &other.sums[k];
            self.sums_sq[k] += &other.sums_sq[k];
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `(m, mean, stderr)`; the standard error is `None` for one replica.
    pub fn estimates(&self) -> Vec<(u32, f64, Option<f64>)> {
        let n = BigInt::from(self.count);
        self.orders
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                if self.count == 0 {
                    return (m, f64::NAN, None);
                }
                let s1 = BigInt::from(self.sums[k].clone());
                let s2 = BigInt::from(self.sums_sq[k].clone());
                let mean = BigRational::new(s1.clone(), n.clone()).to_f64().unwrap_or(f64::NAN);
                let se = (self.count > 1).then(|| {
                    // jackknife variance of the mean: (N S2 − S1²) / (N² (N − 1))
                    let num = &n * &s2 - &s1 * &s1;
                    let den = &n * &n * (&n - 1);
                    BigRational::new(num, den).to_f64().unwrap_or(f64::NAN).max(0.0).sqrt()
                });
                (m, mean, se)
            })
            .collect()
    }
}

/// Monte Carlo estimates of `E I_n^m` for every configured `m`.
pub fn run_mc_moments(cfg: &ExperimentConfig) -> Result<Vec<MomentEntry>, LabError> {
    let acc = mc_moment_batch(cfg, 0..cfg.replicas)?;
    let law = cfg.law()?;
    Ok(moment_entries(cfg, law.name(), &acc))
}

/// Accumulator for a replica range; batches merge exactly.
pub fn mc_moment_batch(cfg: &ExperimentConfig, replicas: Range<u64>) -> Result<MomentAccumulator, LabError> {
    let law = checked_law(cfg)?;
    cfg.check_budget(cfg.n, replicas.end - replicas.start)?;
    let outcomes = run_replicas(&law, cfg.p, cfg.n, cfg.seed, replicas, &[])?;
    let mut acc = MomentAccumulator::new(&cfg.moments);
    for o in &outcomes {
        acc.push(o.intersection);
    }
    Ok(acc)
}

pub fn moment_entries(cfg: &ExperimentConfig, law: &str, acc: &MomentAccumulator) -> Vec<MomentEntry> {
    acc.estimates()
        .into_iter()
        .map(|(m, mean, se)| MomentEntry {
            key: MomentKey { law: law.to_string(), p: cfg.p, n: cfg.n, m },
            value: MomentValue::Approx(mean),
            method: Method::MonteCarlo { stderr: se, replicas: acc.count() },
        })
        .collect()
}

/// Normalising exponent `(2p − d(p−1))/2` of `I_n`.
fn growth_exponent(d: usize, p: u32) -> f64 {
    (2.0 * p as f64 - (d as f64) * (p as f64 - 1.0)) / 2.0
}

/// Exceedance threshold `λ n^{(2p−d(p−1))/2} b_n^{d(p−1)/2}`.
pub fn tail_threshold(d: usize, p: u32, n: u64, b_n: f64, lambda: f64) -> f64 {
    let dp = d as f64 * (p as f64 - 1.0);
    lambda * (n as f64).powf(growth_exponent(d, p)) * b_n.powf(dp / 2.0)
}

/// Exact hit counts `#{I >= threshold_k}` over replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct TailAccumulator {
    thresholds: Vec<f64>,
    hits: Vec<u64>,
    trials: u64,
}

impl TailAccumulator {
    pub fn new(thresholds: Vec<f64>) -> Self {
        let k = thresholds.len();
        Self { thresholds, hits: vec![0; k], trials: 0 }
    }

    pub fn push(&mut self, value: u128) {
        let v = value as f64;
        for (h, &t) in self.hits.iter_mut().zip(&self.thresholds) {
            if v >= t {
                *h += 1;
            }
        }
        self.trials += 1;
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), LabError> {
        if self.thresholds != other.thresholds {
            return Err(config_err("cannot merge tail counts over different thresholds"));
        }
        self.trials += other.trials;
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        Ok(())
    }

    pub fn hits(&self) -> &[u64] {
        &self.hits
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub lambda: f64,
    pub n: u64,
    pub b_n: f64,
    pub threshold: f64,
    pub hits: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub log_p_hat_over_b_n: Option<f64>,
    pub theory: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TailCurve {
    pub rows: Vec<TailRow>,
}

fn tail_thresholds(cfg: &ExperimentConfig, d: usize) -> Vec<f64> {
    let b = cfg.b_n.eval(cfg.n);
    cfg.lambdas.iter().map(|&l| tail_threshold(d, cfg.p, cfg.n, b, l)).collect()
}

pub fn tail_batch(cfg: &ExperimentConfig, replicas: Range<u64>) -> Result<TailAccumulator, LabError> {
    let law = checked_law(cfg)?;
    cfg.check_budget(cfg.n, replicas.end - replicas.start)?;
    let outcomes = run_replicas(&law, cfg.p, cfg.n, cfg.seed, replicas, &[])?;
    let mut acc = TailAccumulator::new(tail_thresholds(cfg, law.dimension()));
    for o in &outcomes {
        acc.push(o.intersection);
    }
    Ok(acc)
}

/// Builds the curve from pooled counts; `moderate_coeff` sets the
/// theory column `−c λ^{2/(d(p−1))}`.
pub fn tail_curve_from(cfg: &ExperimentConfig, d: usize, moderate_coeff: f64, acc: &TailAccumulator) -> TailCurve {
    let b = cfg.b_n.eval(cfg.n);
    let dp = d as f64 * (cfg.p as f64 - 1.0);
    let rows = cfg
        .lambdas
        .iter()
        .zip(acc.thresholds.iter().zip(&acc.hits))
        .map(|(&lambda, (&threshold, &hits))| {
            let p_hat = hits as f64 / acc.trials as f64;
            TailRow {
                lambda,
                n: cfg.n,
                b_n: b,
                threshold,
                hits,
                trials: acc.trials,
                p_hat,
                log_p_hat_over_b_n: (hits > 0).then(|| p_hat.ln() / b),
                theory: -moderate_coeff * lambda.powf(2.0 / dp),
            }
        })
        .collect();
    TailCurve { rows }
}

pub fn run_tail_curve(cfg: &ExperimentConfig, rates: &RateConstants) -> Result<TailCurve, LabError> {
    let law = checked_law(cfg)?;
    if rates.d as usize != law.dimension() || rates.p != cfg.p {
        return Err(config_err("rate constants were computed for a different (d, p)"));
    }
    let acc = tail_batch(cfg, 0..cfg.replicas)?;
    Ok(tail_curve_from(cfg, law.dimension(), rates.moderate_coeff, &acc))
}

/// Solves the ground state for `(d, p)` and returns the constants for `law`.
pub fn rate_constants_for(law: &StepLaw, p: u32) -> Result<RateConstants, LabError> {
    let d = law.dimension() as u32;
    let opts = SolverOptions { cross_check: false, ..SolverOptions::default() };
    let gs = solve_ground_state(d, p, &opts)?;
    Ok(rate_constants(d, p, kappa_from_ground_state(&gs), law.covariance_det_f64())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LilRow {
    pub replica: u64,
    pub k: u64,
    pub n_k: u64,
    pub intersection: u128,
    pub statistic: f64,
    pub running_max: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LilTrace {
    pub rows: Vec<LilRow>,
    pub reference: f64,
}

impl LilTrace {
    /// Final running maximum of each replica, in replica order.
    pub fn final_maxima(&self) -> Vec<f64> {
        let mut out: Vec<(u64, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((rep, m)) if *rep == r.replica => *m = r.running_max,
                _ => out.push((r.replica, r.running_max)),
            }
        }
        out.into_iter().map(|(_, m)| m).collect()
    }

    /// Concatenates partial traces and restores replica order.
    pub fn merge(parts: impl IntoIterator<Item = LilTrace>) -> LilTrace {
        let mut reference = 0.0;
        let mut rows = Vec::new();
        for part in parts {
            reference = part.reference;
            rows.extend(part.rows);
        }
        rows.sort_by_key(|r| (r.replica, r.k));
        LilTrace { rows, reference }
    }
}

/// `I_n / (n^{(2p−d(p−1))/2} (ln ln n)^{d(p−1)/2})`, with `ln ln n`
/// floored at 1.
pub fn lil_statistic(d: usize, p: u32, n: u64, intersection: u128) -> f64 {
    let dp = d as f64 * (p as f64 - 1.0);
    intersection as f64 / ((n as f64).powf(growth_exponent(d, p)) * loglog(n).powf(dp / 2.0))
}

pub fn lil_batch(cfg: &ExperimentConfig, reference: f64, replicas: Range<u64>) -> Result<LilTrace, LabError> {
    let law = checked_law(cfg)?;
    let schedule = cfg.schedule.unwrap_or_default();
    let checkpoints = schedule.checkpoints();
    cfg.check_budget(schedule.max_n, replicas.end - replicas.start)?;
    let d = law.dimension();
    let outcomes = run_replicas(&law, cfg.p, schedule.max_n, cfg.seed, replicas, &checkpoints)?;
    let mut rows = Vec::with_capacity(outcomes.len() * checkpoints.len());
    for o in &outcomes {
        let mut running = 0.0f64;
        for (k, (&n_k, &i)) in checkpoints.iter().zip(&o.checkpoints).enumerate() {
            let statistic = lil_statistic(d, cfg.p, n_k, i);
            running = running.max(statistic);
            rows.push(LilRow {
                replica: o.replica,
                k: k as u64,
                n_k,
                intersection: i,
                statistic,
                running_max: running,
                reference,
            });
        }
    }
    Ok(LilTrace { rows, reference })
}

/// Trace over all replicas; `reference` is the walk LIL constant.
pub fn run_lil_trace(cfg: &ExperimentConfig, reference: f64) -> Result<LilTrace, LabError> {
    lil_batch(cfg, reference, 0..cfg.replicas)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingCheck {
    pub n: u64,
    pub replicas: u64,
    pub mean_small: f64,
    pub stderr_small: f64,
    pub mean_large: f64,
    pub stderr_large: f64,
    pub relative_gap: f64,
}

/// Means of `I_n / n^{(2p−d(p−1))/2}` at `n` and `4n`, read from the same
/// replicas.
pub fn run_scaling_check(cfg: &ExperimentConfig) -> Result<ScalingCheck, LabError> {
    let law = checked_law(cfg)?;
    let n = cfg.n;
    cfg.check_budget(4 * n, cfg.replicas)?;
    let outcomes = run_replicas(&law, cfg.p, 4 * n, cfg.seed, 0..cfg.replicas, &[n, 4 * n])?;
    let mut small = MomentAccumulator::new(&[1]);
    let mut large = MomentAccumulator::new(&[1]);
    for o in &outcomes {
        small.push(o.checkpoints[0]);
        large.push(o.checkpoints[1]);
    }
    let e = growth_exponent(law.dimension(), cfg.p);
    let (s, l) = ((n as f64).powf(e), ((4 * n) as f64).powf(e));
    let (_, ms, ss) = small.estimates()[0];
    let (_, ml, sl) = large.estimates()[0];
    let (mean_small, mean_large) = (ms / s, ml / l);
    Ok(ScalingCheck {
        n,
        replicas: cfg.replicas,
        mean_small,
        stderr_small: ss.unwrap_or(f64::NAN) / s,
        mean_large,
        stderr_large: sl.unwrap_or(f64::NAN) / l,
        relative_gap: (mean_large - mean_small).abs() / mean_small,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub replica: u64,
    pub n: u64,
    pub p: u32,
    pub intersection: u128,
    pub range: u64,
    pub smoothed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SimulationTable {
    pub rows: Vec<SimulationRow>,
}

/// Per-replica `I_n`, `J_n` and, when `ε` is set, the smoothed intersection.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimulationTable, LabError> {
    let law = checked_law(cfg)?;
    cfg.check_budget(cfg.n, cfg.replicas)?;
    let smooth = match cfg.epsilon {
        Some(eps) => Some(SmoothConfig::new(law.dimension(), eps, cfg.b_n.eval(cfg.n), cfg.n)?),
        None => None,
    };
    let p = cfg.p;
    let rows = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| -> Result<SimulationRow, LabError> {
            let o = run_replica(&law, p, cfg.n, cfg.seed, i, &[])?;
            let smoothed = match &smooth {
                None => None,
                Some(sc) => {
                    let fields = (0..p as u64)
                        .map(|j| {
                            let path = sample_path(&law, cfg.n as usize, StreamId::new(cfg.seed, i * p as u64 + j))?;
                            Ok(smoothed_local_time(&local_time_field(&path), sc)?)
                        })
                        .collect::<Result<Vec<_>, LabError>>()?;
                    let refs: Vec<_> = fields.iter().collect();
                    let value = smoothed_intersection(&refs).map_err(|e| config_err(e.to_string()))?;
                    Some(value.to_f64().unwrap_or(f64::NAN))
                }
            };
            Ok(SimulationRow { replica: i, n: cfg.n, p, intersection: o.intersection, range: o.range, smoothed })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimulationTable { rows })
}

/// One cell of an emitted table.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i128),
    Float(f64),
    Text(String),
    Missing,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => float_text(*v),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::Int(v) => match i64::try_from(*v) {
                Ok(x) => serde_json::Value::from(x),
                Err(_) => serde_json::Value::from(v.to_string()),
            },
            Cell::Float(v) => {
                serde_json::Number::from_f64(*v).map(serde_json::Value::Number).unwrap_or(serde_json::Value::Null)
            }
            Cell::Text(s) => serde_json::Value::from(s.clone()),
            Cell::Missing => serde_json::Value::Null,
        }
    }
}

fn float_text(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Anything that can be written as a header plus rows.
pub trait Table {
    fn columns(&self) -> Vec<&'static str>;
    fn cells(&self) -> Vec<Vec<Cell>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

pub fn write_csv<W: Write>(table: &dyn Table, out: W) -> Result<(), LabError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(table.columns())?;
    for row in table.cells() {
        w.write_record(row.iter().map(Cell::csv))?;
    }
    w.flush()?;
    Ok(())
}

/// JSON array with one object per row.
pub fn write_json<W: Write>(table: &dyn Table, mut out: W) -> Result<(), LabError> {
    let cols = table.columns();
    let rows: Vec<serde_json::Value> = table
        .cells()
        .iter()
        .map(|row| {
            let obj: serde_json::Map<String, serde_json::Value> =
                cols.iter().zip(row).map(|(c, v)| (c.to_string(), v.json())).collect();
            serde_json::Value::Object(obj)
        })
        .collect();
    serde_json::to_writer_pretty(&mut out, &rows)?;
    writeln!(out)?;
    Ok(())
}

pub fn emit<W: Write>(table: &dyn Table, format: Format, out: W) -> Result<(), LabError> {
    match format {
        Format::Csv => write_csv(table, out),
        Format::Json => write_json(table, out),
    }
}

pub fn emit_to_path(table: &dyn Table, format: Format, path: &Path) -> Result<(), LabError> {
    let file = std::fs::File::create(path)?;
    emit(table, format, std::io::BufWriter::new(file))
}

/// Header and raw string records of a CSV table.
pub fn read_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<Vec<String>>), LabError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn expect_header(header: &[String], cols: &[&str]) -> Result<(), LabError> {
    if header.len() != cols.len() || header.iter().zip(cols).any(|(a, b)| a != b) {
        return Err(LabError::Parse(format!("expected columns {cols:?}, found {header:?}")));
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, LabError> {
    s.parse().map_err(|_| LabError::Parse(format!("bad {what}: {s:?}")))
}

fn parse_float(s: &str, what: &str) -> Result<f64, LabError> {
    match s {
        "NaN" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => parse(s, what),
    }
}

fn parse_opt_float(s: &str, what: &str) -> Result<Option<f64>, LabError> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_float(s, what).map(Some)
    }
}

fn opt_cell(v: Option<f64>) -> Cell {
    v.map(Cell::Float).unwrap_or(Cell::Missing)
}

const TAIL_COLUMNS: [&str; 9] =
    ["lambda", "n", "b_n", "threshold", "hits", "trials", "p_hat", "log_p_hat_over_b_n", "theory"];

impl Table for TailCurve {
    fn columns(&self) -> Vec<&'static str> {
        TAIL_COLUMNS.to_vec()
    }

    fn cells(&self) -> Vec<Vec<Cell>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Float(r.lambda),
                    Cell::Int(r.n as i128),
                    Cell::Float(r.b_n),
                    Cell::Float(r.threshold),
                    Cell::Int(r.hits as i128),
                    Cell::Int(r.trials as i128),
                    Cell::Float(r.p_hat),
                    opt_cell(r.log_p_hat_over_b_n),
                    Cell::Float(r.theory),
                ]
            })
            .collect()
    }
}

impl TailCurve {
    pub fn from_csv<R: Read>(input: R) -> Result<Self, LabError> {
        let (header, records) = read_csv(input)?;
        expect_header(&header, &TAIL_COLUMNS)?;
        let rows = records
            .iter()
            .map(|r| {
                Ok(TailRow {
                    lambda: parse_float(&r[0], "lambda")?,
                    n: parse(&r[1], "n")?,
                    b_n: parse_float(&r[2], "b_n")?,
                    threshold: parse_float(&r[3], "threshold")?,
                    hits: parse(&r[4], "hits")?,
                    trials: parse(&r[5], "trials")?,
                    p_hat: parse_float(&r[6], "p_hat")?,
                    log_p_hat_over_b_n: parse_opt_float(&r[7], "log_p_hat_over_b_n")?,
                    theory: parse_float(&r[8], "theory")?,
                })
            })
            .collect::<Result<_, LabError>>()?;
        Ok(Self { rows })
    }

    /// `p̂` never increases along the λ grid.
    pub fn is_nonincreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].p_hat <= w[0].p_hat)
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].p_hat < w[0].p_hat)
    }
}

const LIL_COLUMNS: [&str; 7] = ["replica", "k", "n_k", "intersection", "statistic", "running_max", "reference"];

impl Table for LilTrace {
    fn columns(&self) -> Vec<&'static str> {
        LIL_COLUMNS.to_vec()
    }

    fn cells(&self) -> Vec<Vec<Cell>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Int(r.replica as i128),
                    Cell::Int(r.k as i128),
                    Cell::Int(r.n_k as i128),
                    Cell::Int(r.intersection as i128),
                    Cell::Float(r.statistic),
                    Cell::Float(r.running_max),
                    Cell::Float(r.reference),
                ]
            })
            .collect()
    }
}

impl LilTrace {
    pub fn from_csv<R: Read>(input: R) -> Result<Self, LabError> {
        let (header, records) = read_csv(input)?;
        expect_header(&header, &LIL_COLUMNS)?;
        let rows: Vec<LilRow> = records
            .iter()
            .map(|r| {
                Ok(LilRow {
                    replica: parse(&r[0], "replica")?,
                    k: parse(&r[1], "k")?,
                    n_k: parse(&r[2], "n_k")?,
                    intersection: parse(&r[3], "intersection")?,
                    statistic: parse_float(&r[4], "statistic")?,
                    running_max: parse_float(&r[5], "running_max")?,
                    reference: parse_float(&r[6], "reference")?,
                })
            })
            .collect::<Result<_, LabError>>()?;
        let reference = rows.first().map(|r| r.reference).unwrap_or(0.0);
        Ok(Self { rows, reference })
    }
}

const SIM_COLUMNS: [&str; 6] = ["replica", "n", "p", "intersection", "range", "smoothed"];

impl Table for SimulationTable {
    fn columns(&self) -> Vec<&'static str> {
        SIM_COLUMNS.to_vec()
    }

    fn cells(&self) -> Vec<Vec<Cell>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Int(r.replica as i128),
                    Cell::Int(r.n as i128),
                    Cell::Int(r.p as i128),
                    Cell::Int(r.intersection as i128),
                    Cell::Int(r.range as i128),
                    opt_cell(r.smoothed),
                ]
            })
            .collect()
    }
}

impl Table for MomentTable {
    fn columns(&self) -> Vec<&'static str> {
        vec!["n", "m", "p", "law", "method", "value", "stderr"]
    }

    fn cells(&self) -> Vec<Vec<Cell>> {
        self.entries()
            .map(|e| {
                let value = match &e.value {
                    MomentValue::Exact(q) => Cell::Text(q.to_string()),
                    MomentValue::Approx(v) => Cell::Float(*v),
                };
                vec![
                    Cell::Int(e.key.n as i128),
                    Cell::Int(e.key.m as i128),
                    Cell::Int(e.key.p as i128),
                    Cell::Text(e.key.law.clone()),
                    Cell::Text(e.method.label().to_string()),
                    value,
                    opt_cell(e.method.stderr()),
                ]
            })
            .collect()
    }
}

/// Rows of `(key, value)` pairs, e.g. a single result object.
pub struct KeyValueTable(pub Vec<(&'static str, Cell)>);

impl Table for KeyValueTable {
    fn columns(&self) -> Vec<&'static str> {
        self.0.iter().map(|(k, _)| *k).collect()
    }

    fn cells(&self) -> Vec<Vec<Cell>> {
        vec![self.0.iter().map(|(_, v)| v.clone()).collect()]
    }
}
