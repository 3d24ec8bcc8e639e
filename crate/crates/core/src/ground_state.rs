//! Radial ground state of `a Δf − b f + f^{2p−1} = 0` with
//! `a = d(p−1)/2`, `b = (2p − d(p−1))/2`, the Gagliardo–Nirenberg constant
//! `κ(d, p)` it determines, and the large-deviation / LIL constants built
//! from `κ`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("(d, p) = ({d}, {p}) violates p(d-2) < d with d >= 2, p >= 2")]
    ConditionViolated { d: u32, p: u32 },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("ODE residual {residual:e} exceeds tolerance {tolerance:e}")]
    ResidualTooLarge { residual: f64, tolerance: f64 },
    #[error("invalid solver option: {0}")]
    InvalidOption(String),
}

/// True when `p(d − 2) < d`, `d >= 2`, `p >= 2`.
pub fn condition_holds(d: u32, p: u32) -> bool {
    d >= 2 && p >= 2 && p * (d - 2) < d
}

fn check_condition(d: u32, p: u32) -> Result<(), SolverError> {
    if condition_holds(d, p) {
        Ok(())
    } else {
        Err(SolverError::ConditionViolated { d, p })
    }
}

/// `(a, b)`: diffusion and mass coefficients of the ground-state equation.
pub fn equation_coefficients(d: u32, p: u32) -> (f64, f64) {
    let dp = (d * (p - 1)) as f64;
    (dp / 2.0, (2.0 * p as f64 - dp) / 2.0)
}

/// Area of the unit sphere in `R^d`.
pub fn sphere_area(d: u32) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverOptions {
    pub r_max: f64,
    /// Output grid spacing.
    pub h: f64,
    pub residual_tol: f64,
    /// Largest accepted relative gap in the virial identity.
    pub identity_tol: f64,
    pub tail_threshold: f64,
    pub amplitude_bracket: (f64, f64),
    pub max_bisections: u32,
    pub ode_rtol: f64,
    pub cross_check: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            r_max: 20.0,
            h: 0.01,
            residual_tol: 5e-2,
            identity_tol: 1e-4,
            tail_threshold: 1e-8,
            amplitude_bracket: (0.1, 10.0),
            max_bisections: 200,
            ode_rtol: 1e-12,
            cross_check: true,
        }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<(), SolverError> {
        let bad = |what: &str| Err(SolverError::InvalidOption(what.to_string()));
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad("grid spacing must be positive");
        }
        if !(self.r_max > 4.0 * self.h) {
            return bad("r_max must exceed a few grid steps");
        }
        if !(self.residual_tol > 0.0 && self.identity_tol > 0.0 && self.tail_threshold > 0.0 && self.ode_rtol > 0.0) {
            return bad("tolerances must be positive");
        }
        let (lo, hi) = self.amplitude_bracket;
        if !(lo > 0.0 && hi > lo) {
            return bad("amplitude bracket must satisfy 0 < lo < hi");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutoffReason {
    TailThreshold,
    TrajectoriesSeparated,
    RadiusLimit,
}

/// Norm contributions beyond the last grid point, from
/// `f ~ c r^{-(d-1)/2} e^{-μ r}`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TailClosure {
    pub radius: f64,
    pub decay_rate: f64,
    pub mass: f64,
    pub gradient: f64,
    pub potential: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossCheck {
    pub mass: f64,
    pub relative_gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub bisections: u32,
    pub amplitude_bracket: (f64, f64),
    pub cutoff_reason: CutoffReason,
    pub identity_gap: f64,
    pub cross_check: Option<CrossCheck>,
}

/// Radial ground-state profile with its norms.
#[derive(Debug, Clone, Serialize)]
pub struct GroundState {
    pub d: u32,
    pub p: u32,
    pub h: f64,
    /// Last grid radius; the norms beyond it come from the tail closure.
    pub r_max: f64,
    #[serde(skip)]
    pub r: Vec<f64>,
    #[serde(skip)]
    pub f: Vec<f64>,
    #[serde(skip)]
    pub df: Vec<f64>,
    pub amplitude: f64,
    /// `‖f‖_2^2`
    pub mass: f64,
    /// `‖∇f‖_2^2`
    pub gradient: f64,
    /// `‖f‖_{2p}^{2p}`
    pub potential: f64,
    pub residual: f64,
    pub tail: TailClosure,
    pub diagnostics: Diagnostics,
}

impl GroundState {
    /// `|a‖∇f‖² + b‖f‖² − ‖f‖_{2p}^{2p}| / ‖f‖_{2p}^{2p}`.
    pub fn identity_gap(&self) -> f64 {
        self.diagnostics.identity_gap
    }

    /// GN quotient `‖f‖_{2p} / (‖∇f‖^θ ‖f‖^{1−θ})` of the profile itself.
    pub fn gn_ratio(&self) -> f64 {
        let theta = gn_theta(self.d, self.p);
        self.potential.powf(1.0 / (2.0 * self.p as f64))
            / (self.gradient.powf(theta / 2.0) * self.mass.powf((1.0 - theta) / 2.0))
    }
}

/// `θ = d(p−1)/(2p)`.
pub fn gn_theta(d: u32, p: u32) -> f64 {
    (d * (p - 1)) as f64 / (2.0 * p as f64)
}

struct Equation {
    d: f64,
    a: f64,
    b: f64,
    q: i32,
}

impl Equation {
    fn new(d: u32, p: u32) -> Self {
        let (a, b) = equation_coefficients(d, p);
        Self { d: d as f64, a, b, q: 2 * p as i32 - 1 }
    }

    fn source(&self, f: f64) -> f64 {
        (self.b * f - f.powi(self.q)) / self.a
    }

    fn source_slope(&self, f: f64) -> f64 {
        (self.b - self.q as f64 * f.powi(self.q - 1)) / self.a
    }

    fn rhs(&self, r: f64, y: [f64; 2]) -> [f64; 2] {
        [y[1], self.source(y[0]) - (self.d - 1.0) / r * y[1]]
    }

    /// `(f, f')` at small `r` from `f = A + c2 r^2 + c4 r^4`.
    fn series(&self, amp: f64, r: f64) -> [f64; 2] {
        let c2 = self.source(amp) / (2.0 * self.d);
        let c4 = self.source_slope(amp) * c2 / (4.0 * (self.d + 2.0));
        let r2 = r * r;
        [amp + c2 * r2 + c4 * r2 * r2, 2.0 * c2 * r + 4.0 * c4 * r2 * r]
    }

    fn decay_rate(&self) -> f64 {
        (self.b / self.a).sqrt()
    }
}

// Dormand–Prince 5(4) tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Crossed,
    TurnedUp,
    Undecided,
}

struct Integrator<'a> {
    eq: &'a Equation,
    rtol: f64,
    atol: f64,
    step: f64,
}

impl Integrator<'_> {
    /// Advances `y` from `r0` to `r1`; stops early with an outcome when an
    /// accepted step ends with `f < 0` or `f' > 0`.
    fn advance(&mut self, r0: f64, r1: f64, y: &mut [f64; 2]) -> Result<Option<Outcome>, SolverError> {
        let mut r = r0;
        let mut guard = 0u32;
        while r < r1 {
            guard += 1;
            if guard > 1_000_000 {
                return Err(SolverError::NoConvergence("ODE step size collapsed".into()));
            }
            let last = r + self.step >= r1;
            let h = if last { r1 - r } else { self.step };
            let mut k = [[0.0; 2]; 7];
            for s in 0..7 {
                let mut ys = *y;
                for (j, kj) in k.iter().enumerate().take(s) {
                    ys[0] += h * A[s][j] * kj[0];
                    ys[1] += h * A[s][j] * kj[1];
                }
                k[s] = self.eq.rhs(r + C[s] * h, ys);
            }
            let mut y5 = *y;
            let mut err = [0.0; 2];
            for s in 0..7 {
                for i in 0..2 {
                    y5[i] += h * B5[s] * k[s][i];
                    err[i] += h * (B5[s] - B4[s]) * k[s][i];
                }
            }
            let mut norm: f64 = 0.0;
            for i in 0..2 {
                let scale = self.atol + self.rtol * y[i].abs().max(y5[i].abs());
                norm = norm.max(err[i].abs() / scale);
            }
            if !norm.is_finite() {
                return Err(SolverError::NoConvergence("non-finite ODE state".into()));
            }
            if norm <= 1.0 {
                r = if last { r1 } else { r + h };
                *y = y5;
                if y[0] < 0.0 {
                    return Ok(Some(Outcome::Crossed));
                }
                if y[1] > 0.0 {
                    return Ok(Some(Outcome::TurnedUp));
                }
            }
            let factor = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0) };
            if norm <= 1.0 && last {
                // keep the unclipped step for the next segment
                self.step = self.step.max(h * factor);
            } else {
                self.step = h * factor;
            }
        }
        Ok(None)
    }
}

struct Shot {
    outcome: Outcome,
    f: Vec<f64>,
    df: Vec<f64>,
}

struct Shooter<'a> {
    eq: Equation,
    opts: &'a SolverOptions,
    grid_len: usize,
    r_cap: f64,
}

impl<'a> Shooter<'a> {
    fn new(d: u32, p: u32, opts: &'a SolverOptions) -> Self {
        let eq = Equation::new(d, p);
        let grid_len = (opts.r_max / opts.h).round() as usize;
        let r_cap = opts.r_max.max(80.0 / eq.decay_rate());
        Self { eq, opts, grid_len, r_cap }
    }

    /// Integrates from the origin; records grid values when `record`.
    fn shoot(&self, amp: f64, record: bool) -> Result<Shot, SolverError> {
        let h = self.opts.h;
        let mut shot = Shot { outcome: Outcome::Undecided, f: Vec::new(), df: Vec::new() };
        if record {
            shot.f.push(amp);
            shot.df.push(0.0);
        }
        let r_start = (1e-3f64).min(h / 4.0);
        let mut y = self.eq.series(amp, r_start);
        if y[1] > 0.0 {
            shot.outcome = Outcome::TurnedUp;
            return Ok(shot);
        }
        let mut integ = Integrator { eq: &self.eq, rtol: self.opts.ode_rtol, atol: 1e-300, step: h / 4.0 };
        let mut r = r_start;
        for i in 1..=self.grid_len {
            let target = i as f64 * h;
            if let Some(o) = integ.advance(r, target, &mut y)? {
                shot.outcome = o;
                return Ok(shot);
            }
            r = target;
            if record {
                shot.f.push(y[0]);
                shot.df.push(y[1]);
            }
        }
        if let Some(o) = integ.advance(r, self.r_cap, &mut y)? {
            shot.outcome = o;
        }
        Ok(shot)
    }

    fn classify(&self, amp: f64) -> Result<Outcome, SolverError> {
        Ok(self.shoot(amp, false)?.outcome)
    }

    /// Smallest amplitude bracket `[lo, hi]` with `lo` turning up and `hi`
    /// crossing zero, narrowed by bisection.
    fn bracket(&self) -> Result<(f64, f64, u32), SolverError> {
        let (mut lo, top) = self.opts.amplitude_bracket;
        if self.classify(lo)? != Outcome::TurnedUp {
            return Err(SolverError::NoConvergence(format!("lower amplitude {lo} does not turn upward")));
        }
        let mut hi = None;
        let mut a = lo;
        while a < top {
            let next = (a * 1.1).min(top);
            match self.classify(next)? {
                Outcome::TurnedUp => lo = next,
                Outcome::Crossed | Outcome::Undecided => {
                    hi = Some(next);
                    break;
                }
            }
            a = next;
        }
        let mut hi = hi.ok_or_else(|| SolverError::NoConvergence(format!("no zero-crossing amplitude below {top}")))?;
        let mut steps = 0;
        while steps < self.opts.max_bisections {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            steps += 1;
            match self.classify(mid)? {
                Outcome::TurnedUp => lo = mid,
                Outcome::Crossed => hi = mid,
                Outcome::Undecided => {
                    lo = mid;
                    hi = mid;
                    break;
                }
            }
        }
        Ok((lo, hi, steps))
    }
}

fn simpson(h: f64, values: &[f64]) -> f64 {
    let n = values.len() - 1;
    debug_assert!(n % 2 == 0 && n >= 2);
    let mut s = values[0] + values[n];
    for (i, v) in values.iter().enumerate().take(n).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * h / 3.0
}

/// Solves the radial ground-state problem by bisection shooting.
pub fn solve_ground_state(d: u32, p: u32, opts: &SolverOptions) -> Result<GroundState, SolverError> {
    check_condition(d, p)?;
    opts.validate()?;
    let shooter = Shooter::new(d, p, opts);
    let eq = &shooter.eq;
    let (lo, hi, bisections) = shooter.bracket()?;
    let low = shooter.shoot(lo, true)?;
    let high = shooter.shoot(hi, true)?;

    // the profile is trusted until the bracketing trajectories separate
    let usable = low.f.len().min(high.f.len());
    let mut cutoff = usable - 1;
    let mut reason = CutoffReason::RadiusLimit;
    for i in 1..usable {
        if low.f[i] < opts.tail_threshold {
            cutoff = i;
            reason = CutoffReason::TailThreshold;
            break;
        }
        if (high.f[i] - low.f[i]).abs() > 1e-6 * low.f[i] {
            cutoff = i;
            reason = CutoffReason::TrajectoriesSeparated;
            break;
        }
    }
    if cutoff % 2 == 1 {
        cutoff -= 1;
    }
    if cutoff < 4 {
        return Err(SolverError::NoConvergence("profile too short for quadrature".into()));
    }
    let h = opts.h;
    let f: Vec<f64> = low.f[..=cutoff].to_vec();
    let df: Vec<f64> = low.df[..=cutoff].to_vec();
    let r: Vec<f64> = (0..=cutoff).map(|i| i as f64 * h).collect();
    if f.windows(2).any(|w| w[1] >= w[0]) || f.iter().any(|&v| v <= 0.0) {
        return Err(SolverError::NoConvergence("profile is not positive and decreasing".into()));
    }

    let dm1 = d as i32 - 1;
    let area = sphere_area(d);
    let weight = |i: usize| r[i].powi(dm1);
    let two_p = 2 * p as i32;
    let mass_v: Vec<f64> = (0..=cutoff).map(|i| f[i] * f[i] * weight(i)).collect();
    let grad_v: Vec<f64> = (0..=cutoff).map(|i| df[i] * df[i] * weight(i)).collect();
    let pot_v: Vec<f64> = (0..=cutoff).map(|i| f[i].powi(two_p) * weight(i)).collect();

    let mu = eq.decay_rate();
    let big_r = r[cutoff];
    let f_r = f[cutoff];
    let slope = df[cutoff] / f_r;
    let tail_mass = area * f_r * f_r * big_r.powi(dm1) / (2.0 * mu);
    let tail = TailClosure {
        radius: big_r,
        decay_rate: mu,
        mass: tail_mass,
        gradient: slope * slope * tail_mass,
        potential: area * f_r.powi(two_p) * big_r.powi(dm1) / (two_p as f64 * mu),
    };
    let mass = area * simpson(h, &mass_v) + tail.mass;
    let gradient = area * simpson(h, &grad_v) + tail.gradient;
    let potential = area * simpson(h, &pot_v) + tail.potential;

    let mut residual: f64 = 0.0;
    for i in 1..cutoff {
        let lap =
            (f[i + 1] - 2.0 * f[i] + f[i - 1]) / (h * h) + (d as f64 - 1.0) / r[i] * (f[i + 1] - f[i - 1]) / (2.0 * h);
        residual = residual.max((lap - eq.source(f[i])).abs());
    }
    if residual > opts.residual_tol {
        return Err(SolverError::ResidualTooLarge { residual, tolerance: opts.residual_tol });
    }
    let identity_gap = (eq.a * gradient + eq.b * mass - potential).abs() / potential;
    if !(identity_gap <= opts.identity_tol) {
        return Err(SolverError::NoConvergence(format!(
            "integral identity off by {identity_gap:e} (limit {:e}); try a larger r_max",
            opts.identity_tol
        )));
    }

    let cross_check = if opts.cross_check {
        let pv = petviashvili_mass(d, p, opts.h, opts.r_max)?;
        Some(CrossCheck { mass: pv.mass, relative_gap: (pv.mass - mass).abs() / mass, iterations: pv.iterations })
    } else {
        None
    };

    Ok(GroundState {
        d,
        p,
        h,
        r_max: big_r,
        r,
        f,
        df,
        amplitude: 0.5 * (lo + hi),
        mass,
        gradient,
        potential,
        residual,
        tail,
        diagnostics: Diagnostics {
            bisections,
            amplitude_bracket: (lo, hi),
            cutoff_reason: reason,
            identity_gap,
            cross_check,
        },
    })
}

/// `κ = (p ‖f₀‖₂^{−2(p−1)})^{1/(2p)}`.
pub fn kappa_from_ground_state(gs: &GroundState) -> f64 {
    let p = gs.p as f64;
    (p * gs.mass.powf(-(p - 1.0))).powf(1.0 / (2.0 * p))
}

/// Ground-state mass from an independent fixed-point solve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PetviashviliMass {
    /// Richardson-extrapolated mass.
    pub mass: f64,
    pub coarse: f64,
    pub fine: f64,
    pub iterations: usize,
}

/// Petviashvili iteration for `(−aΔ + b) u = u^{2p−1}` on a cell-centred
/// radial grid with spacings `2h` and `h`, extrapolated in `h²`.
pub fn petviashvili_mass(d: u32, p: u32, h: f64, r_max: f64) -> Result<PetviashviliMass, SolverError> {
    check_condition(d, p)?;
    let eq = Equation::new(d, p);
    let radius = r_max.max(16.0 / eq.decay_rate());
    let (coarse, it_c) = petviashvili_single(&eq, d, p, 2.0 * h, radius)?;
    let (fine, it_f) = petviashvili_single(&eq, d, p, h, radius)?;
    Ok(PetviashviliMass { mass: (4.0 * fine - coarse) / 3.0, coarse, fine, iterations: it_c + it_f })
}

fn petviashvili_single(eq: &Equation, d: u32, p: u32, h: f64, radius: f64) -> Result<(f64, usize), SolverError> {
    let n = (radius / h).round() as usize;
    let dm1 = d as i32 - 1;
    let r: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
    let w: Vec<f64> = r.iter().map(|x| x.powi(dm1)).collect();
    let face = |x: f64| x.powi(dm1);
    let k = eq.a / (h * h);
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        let wl = if i == 0 { 0.0 } else { face(r[i] - 0.5 * h) };
        let wr = face(r[i] + 0.5 * h);
        lower[i] = -k * wl / w[i];
        upper[i] = -k * wr / w[i];
        diag[i] = k * (wl + wr) / w[i] + eq.b;
    }
    let apply = |u: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mut v = diag[i] * u[i];
                if i > 0 {
                    v += lower[i] * u[i - 1];
                }
                if i + 1 < n {
                    v += upper[i] * u[i + 1];
                }
                v
            })
            .collect()
    };
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        let mut x = vec![0.0; n];
        c[0] = upper[0] / diag[0];
        x[0] = rhs[0] / diag[0];
        for i in 1..n {
            let m = diag[i] - lower[i] * c[i - 1];
            c[i] = upper[i] / m;
            x[i] = (rhs[i] - lower[i] * x[i - 1]) / m;
        }
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    };
    let dot = |u: &[f64], v: &[f64]| -> f64 { (0..n).map(|i| u[i] * v[i] * w[i]).sum() };
    let q = 2 * p as i32 - 1;
    let gamma_exp = (2 * p - 1) as f64 / (2 * p - 2) as f64;
    let mu = eq.decay_rate();
    let mut u: Vec<f64> = r.iter().map(|&x| 2.0 / (mu * x).cosh()).collect();
    for it in 1..=5000 {
        let nl: Vec<f64> = u.iter().map(|&x| x.abs().powi(q - 1) * x).collect();
        let stab = dot(&apply(&u), &u) / dot(&nl, &u);
        let v = solve(&nl);
        let factor = stab.powf(gamma_exp);
        let next: Vec<f64> = v.iter().map(|x| factor * x).collect();
        let scale = next.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let change = next.iter().zip(&u).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        u = next;
        if !scale.is_finite() || scale == 0.0 {
            return Err(SolverError::NoConvergence("fixed-point iteration collapsed".into()));
        }
        if change <= 1e-13 * scale && (stab - 1.0).abs() < 1e-10 {
            let mass = sphere_area(d) * h * (0..n).map(|i| u[i] * u[i] * w[i]).sum::<f64>();
            return Ok((mass, it));
        }
    }
    Err(SolverError::NoConvergence("fixed-point iteration did not settle".into()))
}

fn a6_exponents(d: u32, p: u32) -> (f64, f64, f64) {
    let dp = (d * (p - 1)) as f64;
    let pf = p as f64;
    let gap = 2.0 * pf - dp;
    let prefactor = (gap / (2.0 * pf)) * (dp / pf).powf(dp / gap);
    (prefactor, 4.0 * pf / gap, gap)
}

/// Variational value `M` as a function of `κ`.
pub fn variational_m(d: u32, p: u32, kappa: f64) -> Result<f64, SolverError> {
    check_condition(d, p)?;
    let (pre, exp, _) = a6_exponents(d, p);
    Ok(pre * kappa.powf(exp))
}

/// Inverse of [`variational_m`].
pub fn kappa_from_m(d: u32, p: u32, m: f64) -> Result<f64, SolverError> {
    check_condition(d, p)?;
    let (pre, exp, _) = a6_exponents(d, p);
    Ok((m / pre).powf(1.0 / exp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateConstants {
    pub d: u32,
    pub p: u32,
    pub kappa: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub gamma_alpha: f64,
    pub det_gamma: f64,
    pub moderate_coeff: f64,
    pub lil_brownian: f64,
    pub lil_walk: f64,
}

/// Tail and LIL constants for walks with covariance determinant `det_gamma`.
pub fn rate_constants(d: u32, p: u32, kappa: f64, det_gamma: f64) -> Result<RateConstants, SolverError> {
    check_condition(d, p)?;
    if !(kappa > 0.0 && det_gamma > 0.0) {
        return Err(SolverError::InvalidOption("kappa and det(Γ) must be positive".into()));
    }
    let pf = p as f64;
    let dp = (d * (p - 1)) as f64;
    let gamma_alpha = pf / 2.0 * kappa.powf(-4.0 * pf / dp);
    let lil_brownian = (2.0 / pf).powf(dp / 2.0) * kappa.powf(2.0 * pf);
    Ok(RateConstants {
        d,
        p,
        kappa,
        m: variational_m(d, p, kappa)?,
        gamma_alpha,
        det_gamma,
        moderate_coeff: gamma_alpha * det_gamma.powf(1.0 / d as f64),
        lil_brownian,
        lil_walk: lil_brownian * det_gamma.powf(-(pf - 1.0) / 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BumpKind {
    Gaussian,
    Sech,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bump {
    pub kind: BumpKind,
    pub center: Vec<f64>,
    pub width: f64,
    pub weight: f64,
}

/// Positive combination of radial bumps in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFunction {
    pub d: u32,
    pub bumps: Vec<Bump>,
}

impl TrialFunction {
    pub fn gaussian(d: u32) -> Self {
        Self {
            d,
            bumps: vec![Bump { kind: BumpKind::Gaussian, center: vec![0.0; d as usize], width: 1.0, weight: 1.0 }],
        }
    }

    /// `x -> f(λ x)`.
    pub fn rescaled(&self, lambda: f64) -> Self {
        Self {
            d: self.d,
            bumps: self
                .bumps
                .iter()
                .map(|b| Bump {
                    kind: b.kind,
                    center: b.center.iter().map(|c| c / lambda).collect(),
                    width: b.width / lambda,
                    weight: b.weight,
                })
                .collect(),
        }
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for b in &self.bumps {
            let r2: f64 = x.iter().zip(&b.center).map(|(a, c)| (a - c) * (a - c)).sum();
            match b.kind {
                BumpKind::Gaussian => {
                    let w2 = b.width * b.width;
                    let v = b.weight * (-r2 / (2.0 * w2)).exp();
                    value += v;
                    for (g, (a, c)) in grad.iter_mut().zip(x.iter().zip(&b.center)) {
                        *g -= v * (a - c) / w2;
                    }
                }
                BumpKind::Sech => {
                    let rho = r2.sqrt();
                    let s = 1.0 / (rho / b.width).cosh();
                    value += b.weight * s;
                    let t_over_rho = if rho < 1e-12 { 1.0 / b.width } else { (rho / b.width).tanh() / rho };
                    let coef = b.weight * s * t_over_rho / b.width;
                    for (g, (a, c)) in grad.iter_mut().zip(x.iter().zip(&b.center)) {
                        *g -= coef * (a - c);
                    }
                }
            }
        }
        value
    }

    fn margin(&self) -> f64 {
        if self.bumps.iter().any(|b| b.kind == BumpKind::Sech) {
            15.0
        } else {
            9.0
        }
    }

    /// `(‖f‖₂², ‖∇f‖₂², ‖f‖_{2p}^{2p})` by the trapezoidal rule on a uniform
    /// grid scaled to the narrowest bump.
    pub fn grid_norms(&self, p: u32) -> (f64, f64, f64) {
        let d = self.d as usize;
        let w_min = self.bumps.iter().map(|b| b.width).fold(f64::INFINITY, f64::min);
        let w_max = self.bumps.iter().map(|b| b.width).fold(0.0, f64::max);
        let h = w_min / 2.5;
        let pad = self.margin() * w_max;
        let mut lo = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for k in 0..d {
            let cmin = self.bumps.iter().map(|b| b.center[k]).fold(f64::INFINITY, f64::min);
            let cmax = self.bumps.iter().map(|b| b.center[k]).fold(f64::NEG_INFINITY, f64::max);
            lo[k] = cmin - pad;
            counts[k] = ((cmax - cmin + 2.0 * pad) / h).ceil() as usize + 1;
        }
        let two_p = 2 * p as i32;
        let mut idx = vec![0usize; d];
        let mut x = vec![0.0; d];
        let mut grad = vec![0.0; d];
        let (mut m, mut g, mut q) = (0.0, 0.0, 0.0);
        loop {
            for k in 0..d {
                x[k] = lo[k] + idx[k] as f64 * h;
            }
            let v = self.value_and_gradient(&x, &mut grad);
            m += v * v;
            g += grad.iter().map(|t| t * t).sum::<f64>();
            q += v.powi(two_p);
            let mut k = 0;
            loop {
                if k == d {
                    let cell = h.powi(d as i32);
                    return (m * cell, g * cell, q * cell);
                }
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    /// `‖f‖_{2p} / (‖∇f‖₂^θ ‖f‖₂^{1−θ})` on the grid.
    pub fn gn_ratio(&self, p: u32) -> f64 {
        let (m, g, q) = self.grid_norms(p);
        let theta = gn_theta(self.d, p);
        q.powf(1.0 / (2.0 * p as f64)) / (g.powf(theta / 2.0) * m.powf((1.0 - theta) / 2.0))
    }
}

/// Closed-form GN quotient of `e^{−|x|²/2}`.
pub fn gaussian_gn_ratio(d: u32, p: u32) -> f64 {
    let df = d as f64;
    let pf = p as f64;
    let theta = gn_theta(d, p);
    let mass = PI.powf(df / 2.0);
    let grad = df / 2.0 * mass;
    let pot = (PI / pf).powf(df / 2.0);
    pot.powf(1.0 / (2.0 * pf)) / (grad.powf(theta / 2.0) * mass.powf((1.0 - theta) / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialFamily {
    Gaussian,
    Sech,
    Mixture,
}

#[derive(Debug, Clone, Serialize)]
pub struct GnSearchReport {
    pub d: u32,
    pub p: u32,
    pub kappa: f64,
    pub trials: usize,
    pub worst_ratio: f64,
    pub worst_trial: Option<TrialFunction>,
    /// Trials whose ratio exceeded `κ (1 + tolerance)`.
    pub violations: usize,
    pub tolerance: f64,
}

/// Random trial function: 1 to 3 bumps, widths in `[0.5, 1.5]`, centres in
/// `[−2, 2]^d`, weights in `[0.2, 1]`.
pub fn random_trial(d: u32, family: TrialFamily, rng: &mut impl Rng) -> TrialFunction {
    let count = rng.random_range(1..=3);
    let bumps = (0..count)
        .map(|_| {
            let kind = match family {
                TrialFamily::Gaussian => BumpKind::Gaussian,
                TrialFamily::Sech => BumpKind::Sech,
                TrialFamily::Mixture => {
                    if rng.random_bool(0.5) {
                        BumpKind::Gaussian
                    } else {
                        BumpKind::Sech
                    }
                }
            };
            Bump {
                kind,
                center: (0..d).map(|_| rng.random_range(-2.0..=2.0)).collect(),
                width: rng.random_range(0.5..=1.5),
                weight: rng.random_range(0.2..=1.0),
            }
        })
        .collect();
    TrialFunction { d, bumps }
}

/// Largest GN quotient over `count` random trial functions.
pub fn gn_violation_search(
    d: u32,
    p: u32,
    kappa: f64,
    family: TrialFamily,
    count: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GnSearchReport, SolverError> {
    check_condition(d, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials: Vec<TrialFunction> = (0..count).map(|_| random_trial(d, family, &mut rng)).collect();
    let ratios: Vec<f64> = trials.par_iter().map(|t| t.gn_ratio(p)).collect();
    let limit = kappa * (1.0 + tolerance);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_trial = None;
    for (t, &r) in trials.iter().zip(&ratios) {
        if r > worst {
            worst = r;
            worst_trial = Some(t.clone());
        }
    }
    Ok(GnSearchReport {
        d,
        p,
        kappa,
        trials: count,
        worst_ratio: worst,
        worst_trial,
        violations: ratios.iter().filter(|&&r| r > limit).count(),
        tolerance,
    })
}
