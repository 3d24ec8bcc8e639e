//! Exact moments of `I_n` for small horizons.
//!
//! Transition kernels `P^i(x)` are built by lattice convolution on the box
//! the walk can reach. In exact mode every `P^i(x)` is stored as the
//! integer `P^i(x) * D^i`, where `D` is the common denominator of the step
//! law, so sums and products stay in integer arithmetic until the final
//! division.
//!
//! By independence of the walks,
//! `E I_n^m = Σ_{x_1..x_m} φ(x_1..x_m)^p` with
//! `φ(x_1..x_m) = E Π_k l(n, x_k)` for a single walk. `φ` is evaluated by
//! ordering the visit times: a permutation `σ` fixes the visiting order
//! and equal times are only allowed along increasing labels, so every
//! time tuple is counted exactly once.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{AddAssign, Mul};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::walk::StepLaw;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MomentError {
    #[error("reachable box has {cells} cells x {layers} layers, above the cap of {cap}")]
    BoxTooLarge { cells: usize, layers: usize, cap: usize },
    #[error("evaluation needs about {needed} terms, above the budget of {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("moment E I_{n}^{m} (p={p}, law {law}) is not in the table")]
    MissingMoment { law: String, p: u32, n: u64, m: u32 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arithmetic {
    /// Exact integers over a common power of the step denominator.
    Exact,
    /// IEEE double precision, for boxes too large for exact arithmetic.
    Float,
}

/// Cost limits for the exact routines.
#[derive(Debug, Clone, Copy)]
pub struct Budget {
    /// Maximum number of stored kernel cells (box cells times layers).
    pub max_cells: usize,
    /// Maximum number of elementary terms for `moment_exact`.
    pub max_terms: u128,
    /// Maximum number of joint paths for `moment_bruteforce`.
    pub max_paths: u128,
}

impl Default for Budget {
    fn default() -> Self {
        Self { max_cells: 20_000_000, max_terms: 50_000_000_000, max_paths: 10_000_000 }
    }
}

trait Weight:
    Clone + Zero + One + Send + Sync + for<'a> AddAssign<&'a Self> + for<'a> Mul<&'a Self, Output = Self>
{
    fn from_u64(x: u64) -> Self;
}

impl Weight for BigInt {
    fn from_u64(x: u64) -> Self {
        BigInt::from(x)
    }
}

impl Weight for u128 {
    fn from_u64(x: u64) -> Self {
        x as u128
    }
}

impl Weight for f64 {
    fn from_u64(x: u64) -> Self {
        x as f64
    }
}

fn pow<T: Weight>(x: &T, e: u32) -> T {
    let mut out = T::one();
    for _ in 0..e {
        out = out * x;
    }
    out
}

/// Dense box `[-R, R]^d` with `R = N * max_step`.
#[derive(Debug, Clone)]
struct LatticeBox {
    d: usize,
    radius: i64,
    side: usize,
}

impl LatticeBox {
    fn new(d: usize, radius: i64) -> Self {
        Self { d, radius, side: (2 * radius + 1) as usize }
    }

    fn cells(&self) -> usize {
        self.side.pow(self.d as u32)
    }

    fn index(&self, x: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for &c in x.iter().rev() {
            if c.abs() > self.radius {
                return None;
            }
            idx = idx * self.side + (c + self.radius) as usize;
        }
        Some(idx)
    }

    fn point(&self, mut idx: usize) -> Vec<i64> {
        let mut x = Vec::with_capacity(self.d);
        for _ in 0..self.d {
            x.push((idx % self.side) as i64 - self.radius);
            idx /= self.side;
        }
        x
    }

    /// Flat-index offset of a lattice vector (valid only for in-box targets).
    fn stride_offset(&self, s: &[i64]) -> isize {
        let mut off = 0isize;
        let mut stride = 1isize;
        for &c in s {
            off += c as isize * stride;
            stride *= self.side as isize;
        }
        off
    }
}

fn convolve_layers<T: Weight>(law: &StepLaw, bx: &LatticeBox, horizon: usize, w: &[T]) -> Vec<Vec<T>> {
    let offsets: Vec<isize> = law.points().iter().map(|s| bx.stride_offset(s)).collect();
    let mut layers = Vec::with_capacity(horizon + 1);
    let mut cur = vec![T::zero(); bx.cells()];
    cur[bx.index(&vec![0; bx.d]).unwrap()] = T::one();
    layers.push(cur);
    for _ in 0..horizon {
        let prev = layers.last().unwrap();
        let mut next = vec![T::zero(); bx.cells()];
        for (idx, v) in prev.iter().enumerate() {
            if v.is_zero() {
                continue;
            }
            for (off, ws) in offsets.iter().zip(w) {
                let j = (idx as isize + off) as usize;
                next[j] += &(v.clone() * ws);
            }
        }
        layers.push(next);
    }
    layers
}

#[derive(Debug, Clone)]
enum KernelData {
    Exact { denom: BigInt, layers: Vec<Vec<BigInt>> },
    Float(Vec<Vec<f64>>),
}

/// `P^i(x)` for `i = 0..=N` on the reachable box.
#[derive(Debug, Clone)]
pub struct KernelPowerTable {
    law_name: String,
    bx: LatticeBox,
    horizon: usize,
    data: KernelData,
}

/// Builds `P^0 .. P^N`. Fails with `BoxTooLarge` when the dense storage
/// would exceed `budget.max_cells`.
pub fn kernel_powers(
    law: &StepLaw,
    horizon: usize,
    mode: Arithmetic,
    budget: &Budget,
) -> Result<KernelPowerTable, MomentError> {
    let bx = LatticeBox::new(law.dimension(), horizon as i64 * law.max_step());
    let layers = horizon + 1;
    if bx.cells().saturating_mul(layers) > budget.max_cells {
        return Err(MomentError::BoxTooLarge { cells: bx.cells(), layers, cap: budget.max_cells });
    }
    let data = match mode {
        Arithmetic::Exact => {
            let w: Vec<BigInt> = law.integer_weights().iter().map(|&x| BigInt::from(x)).collect();
            KernelData::Exact { denom: BigInt::from(law.denominator()), layers: convolve_layers(law, &bx, horizon, &w) }
        }
        Arithmetic::Float => {
            let w: Vec<f64> = law.support().map(|(_, q)| q.to_f64().unwrap()).collect();
            KernelData::Float(convolve_layers(law, &bx, horizon, &w))
        }
    };
    Ok(KernelPowerTable { law_name: law.name().to_string(), bx, horizon, data })
}

impl KernelPowerTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mode(&self) -> Arithmetic {
        match self.data {
            KernelData::Exact { .. } => Arithmetic::Exact,
            KernelData::Float(_) => Arithmetic::Float,
        }
    }

    pub fn law_name(&self) -> &str {
        &self.law_name
    }

    pub fn radius(&self) -> i64 {
        self.bx.radius
    }

    /// Exact `P^i(x)`; `None` in float mode.
    pub fn prob_exact(&self, i: usize, x: &[i64]) -> Option<BigRational> {
        let KernelData::Exact { denom, layers } = &self.data else {
            return None;
        };
        let v = self.bx.index(x).map(|j| layers[i][j].clone()).unwrap_or_default();
        Some(BigRational::new(v, denom.pow(i as u32)))
    }

    pub fn prob(&self, i: usize, x: &[i64]) -> f64 {
        match &self.data {
            KernelData::Exact { .. } => self.prob_exact(i, x).unwrap().to_f64().unwrap(),
            KernelData::Float(layers) => self.bx.index(x).map(|j| layers[i][j]).unwrap_or(0.0),
        }
    }

    /// Exact `Σ_x P^i(x)`.
    pub fn layer_mass_exact(&self, i: usize) -> Option<BigRational> {
        let KernelData::Exact { denom, layers } = &self.data else {
            return None;
        };
        let s: BigInt = layers[i].iter().sum();
        Some(BigRational::new(s, denom.pow(i as u32)))
    }

    /// Sites with `P^i(x) > 0`.
    pub fn support(&self, i: usize) -> Vec<Vec<i64>> {
        let nonzero: Vec<usize> = match &self.data {
            KernelData::Exact { layers, .. } => {
                layers[i].iter().enumerate().filter(|(_, v)| !v.is_zero()).map(|(j, _)| j).collect()
            }
            KernelData::Float(layers) => {
                layers[i].iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect()
            }
        };
        nonzero.into_iter().map(|j| self.bx.point(j)).collect()
    }
}

/// A moment value: exact rational or a float (float kernels or Monte Carlo).
#[derive(Debug, Clone, PartialEq)]
pub enum MomentValue {
    Exact(BigRational),
    Approx(f64),
}

impl MomentValue {
    pub fn to_f64(&self) -> f64 {
        match self {
            MomentValue::Exact(q) => q.to_f64().unwrap_or(f64::NAN),
            MomentValue::Approx(x) => *x,
        }
    }

    pub fn as_exact(&self) -> Option<&BigRational> {
        match self {
            MomentValue::Exact(q) => Some(q),
            MomentValue::Approx(_) => None,
        }
    }
}

impl fmt::Display for MomentValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentValue::Exact(q) => write!(f, "{q}"),
            MomentValue::Approx(x) => write!(f, "{x}"),
        }
    }
}

/// Shared state for the formula evaluations at horizon `n`.
struct Prepared<T> {
    bx: LatticeBox,
    n: usize,
    /// `K_i(x) = P^i(x) * scale^i`.
    layers: Vec<Vec<T>>,
    scale: T,
}

impl<T: Weight> Prepared<T> {
    fn kernel(&self, g: usize, from: &[i64], to: &[i64]) -> T {
        let diff: Vec<i64> = to.iter().zip(from).map(|(b, a)| b - a).collect();
        self.bx.index(&diff).map(|j| self.layers[g][j].clone()).unwrap_or_else(T::zero)
    }

    /// `G(x) = Σ_{i=1}^n K_i(x) * scale^{n-i}`, i.e. `scale^n Σ_i P^i(x)`.
    fn green(&self) -> Vec<T> {
        let mut g = vec![T::zero(); self.bx.cells()];
        let mut factor = T::one();
        for i in (1..=self.n).rev() {
            for (gx, k) in g.iter_mut().zip(&self.layers[i]) {
                if !k.is_zero() {
                    *gx += &(k.clone() * &factor);
                }
            }
            factor = factor * &self.scale;
        }
        g
    }
}

fn prepare_exact(law: &StepLaw, n: usize, budget: &Budget) -> Result<Prepared<BigInt>, MomentError> {
    let table = kernel_powers(law, n, Arithmetic::Exact, budget)?;
    let KernelData::Exact { denom, layers } = table.data else { unreachable!() };
    Ok(Prepared { bx: table.bx, n, layers, scale: denom })
}

fn prepare_float(law: &StepLaw, n: usize, budget: &Budget) -> Result<Prepared<f64>, MomentError> {
    let table = kernel_powers(law, n, Arithmetic::Float, budget)?;
    let KernelData::Float(layers) = table.data else { unreachable!() };
    Ok(Prepared { bx: table.bx, n, layers, scale: 1.0 })
}

fn to_u128(p: &Prepared<BigInt>) -> Prepared<u128> {
    Prepared {
        bx: p.bx.clone(),
        n: p.n,
        layers: p.layers.iter().map(|l| l.iter().map(|v| v.to_u128().unwrap()).collect()).collect(),
        scale: p.scale.to_u128().unwrap(),
    }
}

fn check_args(n: u64, p: u32) -> Result<(), MomentError> {
    if p == 0 {
        return Err(MomentError::Invalid("p must be at least 1".into()));
    }
    if n > u32::MAX as u64 {
        return Err(MomentError::Invalid(format!("horizon {n} too large")));
    }
    Ok(())
}

/// `E I_n = Σ_x (Σ_{i=1}^n P^i(x))^p`.
pub fn expected_in(
    law: &StepLaw,
    n: u64,
    p: u32,
    mode: Arithmetic,
    budget: &Budget,
) -> Result<MomentValue, MomentError> {
    check_args(n, p)?;
    let n = n as usize;
    match mode {
        Arithmetic::Exact => {
            let prep = prepare_exact(law, n, budget)?;
            let total: BigInt = prep.green().iter().filter(|g| !g.is_zero()).map(|g| pow(g, p)).sum();
            let denom = prep.scale.pow(n as u32 * p);
            Ok(MomentValue::Exact(BigRational::new(total, denom)))
        }
        Arithmetic::Float => {
            let prep = prepare_float(law, n, budget)?;
            let total: f64 = prep.green().iter().map(|g| g.powi(p as i32)).sum();
            Ok(MomentValue::Approx(total))
        }
    }
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; m], &mut out);
    out
}

/// `φ(x̄) * scale^n` for one tuple of sites.
fn joint_occupation<T: Weight>(prep: &Prepared<T>, sites: &[&[i64]], perms: &[Vec<usize>]) -> T {
    let n = prep.n;
    let m = sites.len();
    let origin = vec![0i64; prep.bx.d];
    let mut total = T::zero();
    // scale powers for closing the chain at time t: scale^{n - t}
    let mut closing = vec![T::one(); n + 1];
    for t in (0..n).rev() {
        closing[t] = closing[t + 1].clone() * &prep.scale;
    }
    let mut cur = vec![T::zero(); n + 1];
    let mut next = vec![T::zero(); n + 1];
    'perm: for sigma in perms {
        // first visit at time t >= 1
        let first = sites[sigma[0]];
        let mut any = false;
        for t in 0..=n {
            cur[t] = if t == 0 { T::zero() } else { prep.kernel(t, &origin, first) };
            any |= !cur[t].is_zero();
        }
        if !any {
            continue;
        }
        for k in 1..m {
            let (a, b) = (sigma[k - 1], sigma[k]);
            let allow_tie = b > a;
            let gaps: Vec<T> = (0..=n).map(|g| prep.kernel(g, sites[a], sites[b])).collect();
            let mut any = false;
            for t in 0..=n {
                let mut acc = T::zero();
                for (tp, c) in cur.iter().enumerate().take(t + 1) {
                    if c.is_zero() || (tp == t && !allow_tie) {
                        continue;
                    }
                    let g = &gaps[t - tp];
                    if !g.is_zero() {
                        acc += &(c.clone() * g);
                    }
                }
                any |= !acc.is_zero();
                next[t] = acc;
            }
            if !any {
                continue 'perm;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        for (c, s) in cur.iter().zip(&closing) {
            if !c.is_zero() {
                total += &(c.clone() * s);
            }
        }
    }
    total
}

/// Multisets of size `m` over `0..len` with their multinomial multiplicities.
fn multisets(len: usize, m: usize) -> Vec<(Vec<usize>, u64)> {
    fn go(start: usize, len: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..len {
            cur.push(i);
            go(i, len, m, cur, out);
            cur.pop();
        }
    }
    let mut raw = Vec::new();
    go(0, len, m, &mut Vec::new(), &mut raw);
    let fact = |k: usize| (1..=k as u64).product::<u64>();
    raw.into_iter()
        .map(|ms| {
            let mut mult = fact(m);
            let mut i = 0;
            while i < ms.len() {
                let j = ms[i..].iter().take_while(|&&v| v == ms[i]).count();
                mult /= fact(j);
                i += j;
            }
            (ms, mult)
        })
        .collect()
}

fn moment_sum<T: Weight>(prep: &Prepared<T>, m: u32, p: u32) -> T {
    let reachable: Vec<Vec<i64>> =
        prep.green().iter().enumerate().filter(|(_, g)| !g.is_zero()).map(|(j, _)| prep.bx.point(j)).collect();
    let perms = permutations(m as usize);
    let tuples = multisets(reachable.len(), m as usize);
    let partial: Vec<T> = tuples
        .par_chunks(256)
        .map(|chunk| {
            let mut acc = T::zero();
            let mut sites: Vec<&[i64]> = Vec::with_capacity(m as usize);
            for (idx, mult) in chunk {
                sites.clear();
                sites.extend(idx.iter().map(|&i| reachable[i].as_slice()));
                let phi = joint_occupation(prep, &sites, &perms);
                if !phi.is_zero() {
                    acc += &(pow(&phi, p) * &T::from_u64(*mult));
                }
            }
            acc
        })
        .collect();
    // fixed-order reduction keeps float mode deterministic
    let mut total = T::zero();
    for x in &partial {
        total += x;
    }
    total
}

fn log2_big(x: &BigInt) -> f64 {
    x.bits() as f64
}

/// `E I_n^m` by the ordered-visit formula. `m = 0` gives 1.
pub fn moment_exact(
    law: &StepLaw,
    n: u64,
    m: u32,
    p: u32,
    mode: Arithmetic,
    budget: &Budget,
) -> Result<MomentValue, MomentError> {
    check_args(n, p)?;
    if m == 0 {
        return Ok(match mode {
            Arithmetic::Exact => MomentValue::Exact(BigRational::one()),
            Arithmetic::Float => MomentValue::Approx(1.0),
        });
    }
    if n == 0 {
        return Ok(match mode {
            Arithmetic::Exact => MomentValue::Exact(BigRational::zero()),
            Arithmetic::Float => MomentValue::Approx(0.0),
        });
    }
    let nn = n as usize;
    // rough count of reachable sites: the box itself
    let bx = LatticeBox::new(law.dimension(), n as i64 * law.max_step());
    let sites = bx.cells() as u128;
    let needed = sites.saturating_pow(m).saturating_mul((nn * nn) as u128);
    if needed > budget.max_terms {
        return Err(MomentError::BudgetExceeded { needed, budget: budget.max_terms });
    }
    match mode {
        Arithmetic::Exact => {
            let prep = prepare_exact(law, nn, budget)?;
            // φ * D^n <= n^m D^n; the p-th powers summed over the box must fit
            let bits = p as f64 * (m as f64 * (nn as f64).log2() + nn as f64 * log2_big(&prep.scale))
                + m as f64 * (sites as f64).log2()
                + 4.0;
            let numer =
                if bits < 126.0 { BigInt::from(moment_sum(&to_u128(&prep), m, p)) } else { moment_sum(&prep, m, p) };
            let denom = prep.scale.pow(nn as u32 * p);
            Ok(MomentValue::Exact(BigRational::new(numer, denom)))
        }
        Arithmetic::Float => {
            let prep = prepare_float(law, nn, budget)?;
            Ok(MomentValue::Approx(moment_sum(&prep, m, p)))
        }
    }
}

/// All single-walk paths of length `n` with their weights `Π w(step)`
/// (scaled by `D^n`) and sparse local-time fields.
fn enumerate_paths(law: &StepLaw, n: usize) -> Vec<(BigInt, Vec<(Vec<i64>, u64)>)> {
    let k = law.support_len();
    let points = law.points();
    let weights = law.integer_weights();
    let total = k.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    let mut digits = vec![0usize; n];
    for _ in 0..total {
        let mut pos = vec![0i64; law.dimension()];
        let mut w = BigInt::one();
        let mut field: Vec<(Vec<i64>, u64)> = Vec::new();
        for &i in &digits {
            w *= weights[i];
            for (c, s) in pos.iter_mut().zip(&points[i]) {
                *c += s;
            }
            match field.iter_mut().find(|(x, _)| *x == pos) {
                Some((_, c)) => *c += 1,
                None => field.push((pos.clone(), 1)),
            }
        }
        out.push((w, field));
        for d in digits.iter_mut() {
            *d += 1;
            if *d < k {
                break;
            }
            *d = 0;
        }
    }
    out
}

fn joint_intersection(fields: &[&Vec<(Vec<i64>, u64)>]) -> u64 {
    let (first, rest) = fields.split_first().unwrap();
    first
        .iter()
        .map(|(x, c)| rest.iter().fold(*c, |acc, f| acc * f.iter().find(|(y, _)| y == x).map(|(_, c)| *c).unwrap_or(0)))
        .sum()
}

/// `E I_n^m` for every `m` in `ms`, by enumerating all `|support|^{pn}`
/// joint paths with exact weights.
pub fn moments_bruteforce(
    law: &StepLaw,
    n: u64,
    ms: &[u32],
    p: u32,
    budget: &Budget,
) -> Result<Vec<BigRational>, MomentError> {
    check_args(n, p)?;
    let k = law.support_len() as u128;
    let needed = k.checked_pow(n as u32 * p).unwrap_or(u128::MAX);
    if needed > budget.max_paths {
        return Err(MomentError::BudgetExceeded { needed, budget: budget.max_paths });
    }
    let n = n as usize;
    let paths = enumerate_paths(law, n);
    let count = paths.len();
    let mut sums = vec![BigInt::zero(); ms.len()];
    let mut idx = vec![0usize; p as usize];
    let joint = count.pow(p);
    for _ in 0..joint {
        let fields: Vec<&Vec<(Vec<i64>, u64)>> = idx.iter().map(|&i| &paths[i].1).collect();
        let i_n = joint_intersection(&fields);
        let mut w = BigInt::one();
        for &i in &idx {
            w *= &paths[i].0;
        }
        for (s, &m) in sums.iter_mut().zip(ms) {
            *s += &w * BigInt::from(i_n).pow(m);
        }
        for d in idx.iter_mut() {
            *d += 1;
            if *d < count {
                break;
            }
            *d = 0;
        }
    }
    let denom = BigInt::from(law.denominator()).pow(n as u32 * p);
    Ok(sums.into_iter().map(|s| BigRational::new(s, denom.clone())).collect())
}

pub fn moment_bruteforce(law: &StepLaw, n: u64, m: u32, p: u32, budget: &Budget) -> Result<BigRational, MomentError> {
    Ok(moments_bruteforce(law, n, &[m], p, budget)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct MomentKey {
    pub law: String,
    pub p: u32,
    pub n: u64,
    pub m: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExactFormula(Arithmetic),
    BruteForce,
    MonteCarlo { stderr: Option<f64>, replicas: u64 },
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::ExactFormula(Arithmetic::Exact) => "exact-formula",
            Method::ExactFormula(Arithmetic::Float) => "exact-formula-float",
            Method::BruteForce => "brute-force",
            Method::MonteCarlo { .. } => "monte-carlo",
        }
    }

    pub fn stderr(&self) -> Option<f64> {
        match self {
            Method::MonteCarlo { stderr, .. } => *stderr,
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Method::ExactFormula(Arithmetic::Exact) => 0,
            Method::BruteForce => 1,
            Method::ExactFormula(Arithmetic::Float) => 2,
            Method::MonteCarlo { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEntry {
    pub key: MomentKey,
    pub value: MomentValue,
    pub method: Method,
}

/// `(law, p, n, m) -> E I_n^m` under one or more methods.
#[derive(Debug, Clone, Default)]
pub struct MomentTable {
    entries: BTreeMap<MomentKey, Vec<MomentEntry>>,
}

impl MomentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: MomentEntry) {
        self.entries.entry(entry.key.clone()).or_default().push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MomentEntry> {
        self.entries.values().flatten()
    }

    /// Most reliable entry for the key (exact before float before MC).
    pub fn best(&self, key: &MomentKey) -> Option<&MomentEntry> {
        self.entries.get(key)?.iter().min_by_key(|e| e.method.rank())
    }

    /// `(value, stderr)` with `E I^0 = 1` built in.
    pub fn lookup(&self, law: &str, p: u32, n: u64, m: u32) -> Result<(f64, f64), MomentError> {
        if m == 0 {
            return Ok((1.0, 0.0));
        }
        let key = MomentKey { law: law.to_string(), p, n, m };
        let e = self.best(&key).ok_or(MomentError::MissingMoment { law: law.to_string(), p, n, m })?;
        Ok((e.value.to_f64(), e.method.stderr().unwrap_or(0.0)))
    }

    /// Adds exact-formula entries for every `(n, m)` pair.
    pub fn fill_exact(
        &mut self,
        law: &StepLaw,
        p: u32,
        ns: &[u64],
        ms: &[u32],
        budget: &Budget,
    ) -> Result<(), MomentError> {
        for &n in ns {
            for &m in ms {
                let key = MomentKey { law: law.name().to_string(), p, n, m };
                if self
                    .entries
                    .get(&key)
                    .is_some_and(|v| v.iter().any(|e| e.method == Method::ExactFormula(Arithmetic::Exact)))
                {
                    continue;
                }
                let value = moment_exact(law, n, m, p, Arithmetic::Exact, budget)?;
                self.insert(MomentEntry { key, value, method: Method::ExactFormula(Arithmetic::Exact) });
            }
        }
        Ok(())
    }

    /// Keys where two methods disagree: exact values must be equal, MC
    /// values within `4 * stderr` of the best exact value.
    pub fn inconsistencies(&self) -> Vec<MomentKey> {
        let mut bad = Vec::new();
        for (key, list) in &self.entries {
            let exact: Vec<&BigRational> = list.iter().filter_map(|e| e.value.as_exact()).collect();
            if exact.windows(2).any(|w| w[0] != w[1]) {
                bad.push(key.clone());
                continue;
            }
            if let Some(reference) = exact.first().map(|q| q.to_f64().unwrap()) {
                let mc_off = list.iter().any(|e| match e.method {
                    Method::MonteCarlo { stderr: Some(se), .. } => (e.value.to_f64() - reference).abs() > 4.0 * se,
                    _ => false,
                });
                if mc_off {
                    bad.push(key.clone());
                }
            }
        }
        bad
    }
}

/// Both sides of the block moment inequality
/// `(E I_{n_1+..+n_a}^m)^{1/p} <= Σ_{k_1+..+k_a=m} m!/(k_1!..k_a!) Π (E I_{n_i}^{k_i})^{1/p}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockInequalityReport {
    pub blocks: Vec<u64>,
    pub m: u32,
    pub p: u32,
    pub lhs: f64,
    pub rhs: f64,
    /// Allowance added to `rhs`: rounding for exact inputs, `4σ` for MC inputs.
    pub slack: f64,
    pub holds: bool,
}

/// Compositions of `m` into `a` nonnegative parts.
pub fn compositions(m: u32, a: usize) -> Vec<Vec<u32>> {
    fn go(left: u32, parts: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if parts == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            go(left - k, parts - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if a > 0 {
        go(m, a, &mut Vec::new(), &mut out);
    }
    out
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// `x^{1/p}` with delta-method error `σ/(p x^{1-1/p})`.
fn root_with_error(x: f64, se: f64, p: u32) -> (f64, f64) {
    let inv = 1.0 / p as f64;
    let r = x.max(0.0).powf(inv);
    let e = if se > 0.0 && x > 0.0 { inv * r / x * se } else { 0.0 };
    (r, e)
}

const ROUNDING_SLACK: f64 = 1e-12;

pub fn check_block_inequality(
    table: &MomentTable,
    law: &str,
    p: u32,
    blocks: &[u64],
    m: u32,
) -> Result<BlockInequalityReport, MomentError> {
    if blocks.is_empty() || blocks.contains(&0) {
        return Err(MomentError::Invalid("blocks must be positive and non-empty".into()));
    }
    let total: u64 = blocks.iter().sum();
    let (x, se) = table.lookup(law, p, total, m)?;
    let (lhs, lhs_err) = root_with_error(x, se, p);
    let mut rhs = 0.0;
    let mut rhs_err = 0.0;
    for ks in compositions(m, blocks.len()) {
        let coeff = factorial(m) / ks.iter().map(|&k| factorial(k)).product::<f64>();
        let mut prod = coeff;
        let mut rel = 0.0;
        for (&n, &k) in blocks.iter().zip(&ks) {
            let (v, s) = table.lookup(law, p, n, k)?;
            let (r, e) = root_with_error(v, s, p);
            prod *= r;
            if r > 0.0 {
                rel += e / r;
            }
        }
        rhs += prod;
        rhs_err += prod * rel;
    }
    let slack = ROUNDING_SLACK * rhs.abs() + 4.0 * (lhs_err + rhs_err);
    Ok(BlockInequalityReport { blocks: blocks.to_vec(), m, p, lhs, rhs, slack, holds: lhs <= rhs + slack })
}

/// Truncated exponential-series form:
/// `Σ_{m<=M} λ^m/m! (E I_{Σn}^m)^{1/p} <= Π_i Σ_{m<=M} λ^m/m! (E I_{n_i}^m)^{1/p}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesInequalityReport {
    pub blocks: Vec<u64>,
    pub lambda: f64,
    pub truncation: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

pub fn check_series_inequality(
    table: &MomentTable,
    law: &str,
    p: u32,
    blocks: &[u64],
    lambda: f64,
    truncation: u32,
) -> Result<SeriesInequalityReport, MomentError> {
    if blocks.is_empty() || blocks.contains(&0) || !(lambda >= 0.0) {
        return Err(MomentError::Invalid("blocks must be positive, lambda >= 0".into()));
    }
    let series = |n: u64| -> Result<(f64, f64), MomentError> {
        let mut s = 0.0;
        let mut e = 0.0;
        for m in 0..=truncation {
            let (v, se) = table.lookup(law, p, n, m)?;
            let (r, re) = root_with_error(v, se, p);
            let c = lambda.powi(m as i32) / factorial(m);
            s += c * r;
            e += c * re;
        }
        Ok((s, e))
    };
    let (lhs, lhs_err) = series(blocks.iter().sum())?;
    let mut rhs = 1.0;
    let mut rel = 0.0;
    for &n in blocks {
        let (s, e) = series(n)?;
        rhs *= s;
        if s > 0.0 {
            rel += e / s;
        }
    }
    let slack = ROUNDING_SLACK * rhs.abs() + 4.0 * (lhs_err + rhs * rel);
    Ok(SeriesInequalityReport {
        blocks: blocks.to_vec(),
        lambda,
        truncation,
        lhs,
        rhs,
        slack,
        holds: lhs <= rhs + slack,
    })
}
