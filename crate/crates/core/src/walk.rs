//! Lattice step laws, path sampling and local-time fields.
//!
//! A [`StepLaw`] is a finitely supported, symmetric distribution on `Z^d`
//! with exact rational probabilities. Paths are drawn through an integer
//! alias table, so the sampler's law is exactly the rational law used by
//! the exact-moment code.

use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::{BigRational, Rational64};
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported lattice dimension. Site keys pack `64 / d` bits per
/// coordinate, so higher dimensions leave too little room per axis.
pub const MAX_DIMENSION: usize = 16;

/// Depth used when probing return times for the aperiodicity hint.
pub const APERIODIC_PROBE_DEPTH: usize = 64;

const APERIODIC_PROBE_BUDGET: usize = 4_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WalkError {
    #[error("step law support is empty")]
    EmptySupport,
    #[error("lattice dimension must be between 1 and {MAX_DIMENSION}, got {0}")]
    BadDimension(usize),
    #[error("support point {index} has {got} coordinates, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("probability of support point {0} is not positive")]
    NonPositiveProbability(usize),
    #[error("support point {0} appears more than once")]
    DuplicatePoint(usize),
    #[error("probabilities sum to {0}, expected exactly 1")]
    ProbabilitiesNotNormalized(String),
    #[error("step law is not symmetric: {0} has no mirror with equal probability")]
    NotSymmetric(String),
    #[error("support spans a rank-{rank} sublattice, expected rank {d}")]
    DegenerateSupport { rank: usize, d: usize },
    #[error("unknown built-in step law {0:?}")]
    UnknownLaw(String),
    #[error("step law config: {0}")]
    Config(String),
    #[error("path of length {n} may leave the packable range |x| <= {limit}")]
    PathOutOfRange { n: u64, limit: i64 },
    #[error("local-time fields disagree on dimension")]
    DimensionDisagreement,
}

/// Tri-state hint for whether return times to the origin have gcd 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aperiodicity {
    Yes,
    No,
    Unknown,
}

/// Lossless packing of bounded lattice points into a `u64`.
///
/// Each coordinate gets `64 / d` bits stored with an offset, so any point
/// with `|x_i| <= max_coordinate()` packs and unpacks exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SitePacker {
    d: usize,
    bits: u32,
}

impl SitePacker {
    pub fn new(d: usize) -> Result<Self, WalkError> {
        if d == 0 || d > MAX_DIMENSION {
            return Err(WalkError::BadDimension(d));
        }
        Ok(Self { d, bits: (64 / d) as u32 })
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn max_coordinate(&self) -> i64 {
        ((1i128 << (self.bits - 1)) - 1) as i64
    }

    fn mask(&self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    fn offset(&self) -> i128 {
        1i128 << (self.bits - 1)
    }

    pub fn pack(&self, point: &[i64]) -> u64 {
        debug_assert_eq!(point.len(), self.d);
        let mask = self.mask();
        let mut key = 0u64;
        for (i, &x) in point.iter().enumerate() {
            debug_assert!(x.abs() <= self.max_coordinate());
            let field = ((x as i128 + self.offset()) as u64) & mask;
            key |= field.checked_shl(i as u32 * self.bits).unwrap_or(0);
        }
        key
    }

    pub fn unpack(&self, key: u64) -> Vec<i64> {
        let mask = self.mask();
        (0..self.d)
            .map(|i| {
                let field = key.checked_shr(i as u32 * self.bits).unwrap_or(0) & mask;
                (field as i128 - self.offset()) as i64
            })
            .collect()
    }
}

/// Exact alias table over integer weights summing to `denom`.
#[derive(Debug, Clone)]
struct AliasTable {
    threshold: Vec<u64>,
    alias: Vec<usize>,
    denom: u64,
}

impl AliasTable {
    /// `weights[i] / denom` are the target probabilities.
    fn new(weights: &[u64], denom: u64) -> Self {
        let k = weights.len();
        let cap = denom as u128;
        let mut scaled: Vec<u128> = weights.iter().map(|&w| w as u128 * k as u128).collect();
        let mut threshold = vec![denom; k];
        let mut alias: Vec<usize> = (0..k).collect();
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &s) in scaled.iter().enumerate() {
            if s < cap {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&l), Some(&g)) = (small.last(), large.last()) {
            small.pop();
            threshold[l] = scaled[l] as u64;
            alias[l] = g;
            scaled[g] -= cap - scaled[l];
            if scaled[g] < cap {
                large.pop();
                small.push(g);
            }
        }
        // whatever is left holds exactly `cap` in exact arithmetic
        for i in small.into_iter().chain(large) {
            threshold[i] = denom;
            alias[i] = i;
        }
        Self { threshold, alias, denom }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let col = rng.random_range(0..self.threshold.len());
        let u = rng.random_range(0..self.denom);
        if u < self.threshold[col] {
            col
        } else {
            self.alias[col]
        }
    }
}

/// Finite-support symmetric increment distribution on `Z^d`.
#[derive(Debug, Clone)]
pub struct StepLaw {
    name: String,
    d: usize,
    points: Vec<Vec<i64>>,
    probs: Vec<Rational64>,
    /// Common denominator of all probabilities and the matching numerators.
    denom: u64,
    weights: Vec<u64>,
    covariance: Vec<Vec<BigRational>>,
    aperiodic: Aperiodicity,
    alias: AliasTable,
}

impl PartialEq for StepLaw {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.points == other.points && self.probs == other.probs
    }
}

impl StepLaw {
    /// Validates the support and derives the covariance matrix.
    pub fn new(d: usize, support: Vec<(Vec<i64>, Rational64)>) -> Result<Self, WalkError> {
        Self::with_name("custom", d, support)
    }

    pub fn with_name(
        name: impl Into<String>,
        d: usize,
        support: Vec<(Vec<i64>, Rational64)>,
    ) -> Result<Self, WalkError> {
        if d == 0 || d > MAX_DIMENSION {
            return Err(WalkError::BadDimension(d));
        }
        if support.is_empty() {
            return Err(WalkError::EmptySupport);
        }
        let mut seen = FxHashMap::default();
        for (i, (x, q)) in support.iter().enumerate() {
            if x.len() != d {
                return Err(WalkError::DimensionMismatch { index: i, expected: d, got: x.len() });
            }
            if *q <= Rational64::zero() {
                return Err(WalkError::NonPositiveProbability(i));
            }
            if seen.insert(x.clone(), *q).is_some() {
                return Err(WalkError::DuplicatePoint(i));
            }
        }
        let total = support.iter().fold(BigRational::zero(), |acc, (_, q)| acc + to_big(*q));
        if !total.is_one() {
            return Err(WalkError::ProbabilitiesNotNormalized(total.to_string()));
        }
        for (x, q) in &support {
            let mirror: Vec<i64> = x.iter().map(|c| -c).collect();
            if seen.get(&mirror) != Some(q) {
                return Err(WalkError::NotSymmetric(format!("{x:?}")));
            }
        }
        let rank = integer_rank(support.iter().map(|(x, _)| x.as_slice()), d);
        if rank < d {
            return Err(WalkError::DegenerateSupport { rank, d });
        }

        let denom = support.iter().fold(1u64, |acc, (_, q)| acc.lcm(&(*q.denom() as u64)));
        let weights: Vec<u64> =
            support.iter().map(|(_, q)| (*q.numer() as u64) * (denom / *q.denom() as u64)).collect();

        let mut covariance = vec![vec![BigRational::zero(); d]; d];
        for (x, q) in &support {
            let q = to_big(*q);
            for i in 0..d {
                for j in 0..d {
                    covariance[i][j] += &q * BigRational::from_integer((x[i] * x[j]).into());
                }
            }
        }

        let alias = AliasTable::new(&weights, denom);
        let (points, probs): (Vec<_>, Vec<_>) = support.into_iter().unzip();
        let aperiodic = probe_aperiodicity(&points, d);
        Ok(Self { name: name.into(), d, points, probs, denom, weights, covariance, aperiodic, alias })
    }

    /// Nearest-neighbour walk with uniform weight `1/(2d)`.
    pub fn simple(d: usize) -> Result<Self, WalkError> {
        if d == 0 || d > MAX_DIMENSION {
            return Err(WalkError::BadDimension(d));
        }
        let q = Rational64::new(1, 2 * d as i64);
        let mut support = Vec::with_capacity(2 * d);
        for i in 0..d {
            for s in [1, -1] {
                let mut x = vec![0; d];
                x[i] = s;
                support.push((x, q));
            }
        }
        Self::with_name(format!("srw{d}"), d, support)
    }

    /// Built-in laws: `srw1` .. `srw16`.
    pub fn builtin(name: &str) -> Result<Self, WalkError> {
        name.strip_prefix("srw")
            .and_then(|rest| rest.parse::<usize>().ok())
            .filter(|d| (1..=MAX_DIMENSION).contains(d))
            .ok_or_else(|| WalkError::UnknownLaw(name.to_string()))
            .and_then(Self::simple)
    }

    /// Parses a TOML step-law description:
    ///
    /// ```toml
    /// name = "lazy2"
    /// d = 2
    /// support = [
    ///   { point = [1, 0], prob = "1/4" },
    ///   { point = [-1, 0], prob = "1/4" },
    /// ]
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self, WalkError> {
        let cfg: StepLawConfig = toml::from_str(text).map_err(|e| WalkError::Config(e.to_string()))?;
        cfg.build()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn support(&self) -> impl Iterator<Item = (&[i64], Rational64)> + '_ {
        self.points.iter().map(Vec::as_slice).zip(self.probs.iter().copied())
    }

    pub fn support_len(&self) -> usize {
        self.points.len()
    }

    pub(crate) fn points(&self) -> &[Vec<i64>] {
        &self.points
    }

    /// Common denominator `D` of the step probabilities.
    pub fn denominator(&self) -> u64 {
        self.denom
    }

    /// Numerators `q(x) * D`, aligned with [`StepLaw::support`].
    pub fn integer_weights(&self) -> &[u64] {
        &self.weights
    }

    /// Largest absolute coordinate over the support.
    pub fn max_step(&self) -> i64 {
        self.points.iter().flat_map(|x| x.iter().map(|c| c.abs())).max().unwrap_or(0)
    }

    pub fn covariance(&self) -> &[Vec<BigRational>] {
        &self.covariance
    }

    pub fn covariance_f64(&self) -> Vec<Vec<f64>> {
        self.covariance.iter().map(|row| row.iter().map(|q| q.to_f64().unwrap_or(f64::NAN)).collect()).collect()
    }

    /// Exact `det(Γ)`.
    pub fn covariance_det(&self) -> BigRational {
        rational_det(self.covariance.clone())
    }

    pub fn covariance_det_f64(&self) -> f64 {
        self.covariance_det().to_f64().unwrap_or(f64::NAN)
    }

    pub fn aperiodic_hint(&self) -> Aperiodicity {
        self.aperiodic
    }

    /// Index into the support of one sampled increment.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.alias.sample(rng)
    }
}

#[derive(Debug, Deserialize)]
struct StepLawConfig {
    #[serde(default)]
    name: Option<String>,
    d: usize,
    support: Vec<SupportEntry>,
}

#[derive(Debug, Deserialize)]
struct SupportEntry {
    point: Vec<i64>,
    prob: String,
}

impl StepLawConfig {
    fn build(self) -> Result<StepLaw, WalkError> {
        let support = self
            .support
            .into_iter()
            .map(|e| {
                let q = parse_rational(&e.prob)?;
                Ok((e.point, q))
            })
            .collect::<Result<Vec<_>, WalkError>>()?;
        StepLaw::with_name(self.name.unwrap_or_else(|| "custom".into()), self.d, support)
    }
}

fn parse_rational(s: &str) -> Result<Rational64, WalkError> {
    let s = s.trim();
    let bad = || WalkError::Config(format!("cannot parse probability {s:?}"));
    match s.split_once('/') {
        Some((n, d)) => {
            let n: i64 = n.trim().parse().map_err(|_| bad())?;
            let d: i64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0 {
                return Err(bad());
            }
            Ok(Rational64::new(n, d))
        }
        None => Ok(Rational64::from_integer(s.parse().map_err(|_| bad())?)),
    }
}

pub(crate) fn to_big(q: Rational64) -> BigRational {
    BigRational::new(BigInt::from(*q.numer()), BigInt::from(*q.denom()))
}

/// Rank of a set of integer vectors, by fraction-free elimination.
fn integer_rank<'a>(rows: impl Iterator<Item = &'a [i64]>, d: usize) -> usize {
    let mut m: Vec<Vec<BigInt>> = rows.map(|r| r.iter().map(|&x| BigInt::from(x)).collect()).collect();
    let mut rank = 0;
    for col in 0..d {
        let Some(pivot) = (rank..m.len()).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(rank, pivot);
        for r in 0..m.len() {
            if r != rank && !m[r][col].is_zero() {
                let (a, b) = (m[rank][col].clone(), m[r][col].clone());
                for c in 0..d {
                    m[r][c] = &m[r][c] * &a - &m[rank][c] * &b;
                }
            }
        }
        rank += 1;
    }
    rank
}

fn rational_det(mut m: Vec<Vec<BigRational>>) -> BigRational {
    let n = m.len();
    let mut det = BigRational::one();
    for col in 0..n {
        let Some(pivot) = (col..n).find(|&r| !m[r][col].is_zero()) else {
            return BigRational::zero();
        };
        if pivot != col {
            m.swap(pivot, col);
            det = -det;
        }
        let p = m[col][col].clone();
        det *= &p;
        for r in col + 1..n {
            if m[r][col].is_zero() {
                continue;
            }
            let f = &m[r][col] / &p;
            for c in col..n {
                let v = &f * &m[col][c];
                m[r][c] -= v;
            }
        }
    }
    det
}

/// gcd of `{k <= 64 : P^k(0) > 0}`. Since the law is symmetric, 2 always
/// belongs to the set, so the gcd is 1 iff some odd return time exists.
fn probe_aperiodicity(points: &[Vec<i64>], d: usize) -> Aperiodicity {
    let Ok(packer) = SitePacker::new(d) else {
        return Aperiodicity::Unknown;
    };
    let max_step = points.iter().flat_map(|x| x.iter().map(|c| c.abs())).max().unwrap_or(0);
    if max_step.saturating_mul(APERIODIC_PROBE_DEPTH as i64) > packer.max_coordinate() {
        return Aperiodicity::Unknown;
    }
    let origin = packer.pack(&vec![0; d]);
    let steps: Vec<u64> = points.iter().map(|x| packer.pack(x)).collect();
    let offset = packer.pack(&vec![0; d]);
    let mut frontier: FxHashSet<u64> = FxHashSet::default();
    frontier.insert(origin);
    let mut work = 0usize;
    for k in 1..=APERIODIC_PROBE_DEPTH {
        let mut next = FxHashSet::default();
        for &site in &frontier {
            for &s in &steps {
                // per-field offsets cancel because no field over/underflows
                next.insert(site.wrapping_add(s).wrapping_sub(offset));
            }
        }
        work += next.len();
        if k % 2 == 1 && next.contains(&origin) {
            return Aperiodicity::Yes;
        }
        if work > APERIODIC_PROBE_BUDGET {
            return Aperiodicity::Unknown;
        }
        frontier = next;
    }
    Aperiodicity::No
}

/// Replica provenance: a seed plus a stream index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub seed: u64,
    pub stream: u64,
}

impl StreamId {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Streaming sampler of `S(1), S(2), ...` as packed site keys.
pub struct WalkSampler<'a> {
    law: &'a StepLaw,
    packer: SitePacker,
    step_keys: Vec<u64>,
    offset: u64,
    position: u64,
    rng: ChaCha8Rng,
}

impl<'a> WalkSampler<'a> {
    /// Fails when `n` steps could leave the packable coordinate range.
    pub fn new(law: &'a StepLaw, n: u64, stream: StreamId) -> Result<Self, WalkError> {
        let packer = SitePacker::new(law.d)?;
        let limit = packer.max_coordinate();
        if (law.max_step() as i128) * (n as i128) > limit as i128 {
            return Err(WalkError::PathOutOfRange { n, limit });
        }
        let origin = packer.pack(&vec![0; law.d]);
        Ok(Self {
            law,
            packer,
            step_keys: law.points.iter().map(|x| packer.pack(x)).collect(),
            offset: origin,
            position: origin,
            rng: stream.rng(),
        })
    }

    pub fn packer(&self) -> SitePacker {
        self.packer
    }

    /// Advances one step and returns `(support index, new site key)`.
    pub fn step(&mut self) -> (usize, u64) {
        let idx = self.law.sample_index(&mut self.rng);
        self.position = self.position.wrapping_add(self.step_keys[idx]).wrapping_sub(self.offset);
        (idx, self.position)
    }
}

/// A sampled path `S(1..n)`; `S(0)` is the origin and is not stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkPath {
    d: usize,
    /// Support indices of the increments, in order.
    increments: Vec<u32>,
    sites: Vec<u64>,
    packer: SitePacker,
    stream: Option<StreamId>,
}

impl WalkPath {
    /// Builds a path from explicit support indices (no randomness).
    pub fn from_increments(law: &StepLaw, increments: &[usize]) -> Result<Self, WalkError> {
        let packer = SitePacker::new(law.d)?;
        let n = increments.len() as u64;
        let limit = packer.max_coordinate();
        if (law.max_step() as i128) * (n as i128) > limit as i128 {
            return Err(WalkError::PathOutOfRange { n, limit });
        }
        let mut pos = vec![0i64; law.d];
        let mut sites = Vec::with_capacity(increments.len());
        for &i in increments {
            for (c, s) in pos.iter_mut().zip(&law.points[i]) {
                *c += s;
            }
            sites.push(packer.pack(&pos));
        }
        Ok(Self { d: law.d, increments: increments.iter().map(|&i| i as u32).collect(), sites, packer, stream: None })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn stream(&self) -> Option<StreamId> {
        self.stream
    }

    pub fn packer(&self) -> SitePacker {
        self.packer
    }

    pub fn site_keys(&self) -> &[u64] {
        &self.sites
    }

    pub fn increment_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.increments.iter().map(|&i| i as usize)
    }

    /// `S(k)` for `k = 1..=n`; `position(0)` is the origin.
    pub fn position(&self, k: usize) -> Vec<i64> {
        if k == 0 {
            vec![0; self.d]
        } else {
            self.packer.unpack(self.sites[k - 1])
        }
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            d: self.d,
            increments: self.increments[..k].to_vec(),
            sites: self.sites[..k].to_vec(),
            packer: self.packer,
            stream: self.stream,
        }
    }
}

/// Draws `n` i.i.d. increments; deterministic in `stream`.
pub fn sample_path(law: &StepLaw, n: usize, stream: StreamId) -> Result<WalkPath, WalkError> {
    let mut sampler = WalkSampler::new(law, n as u64, stream)?;
    let mut increments = Vec::with_capacity(n);
    let mut sites = Vec::with_capacity(n);
    for _ in 0..n {
        let (i, site) = sampler.step();
        increments.push(i as u32);
        sites.push(site);
    }
    Ok(WalkPath { d: law.d, increments, sites, packer: sampler.packer, stream: Some(stream) })
}

/// `l(n, x) = #{1 <= k <= n : S(k) = x}` as a sparse map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalTimeField {
    n: u64,
    packer: SitePacker,
    counts: FxHashMap<u64, u64>,
}

impl LocalTimeField {
    pub fn from_keys(packer: SitePacker, keys: impl IntoIterator<Item = u64>) -> Self {
        let mut counts = FxHashMap::default();
        let mut n = 0;
        for key in keys {
            *counts.entry(key).or_insert(0) += 1;
            n += 1;
        }
        Self { n, packer, counts }
    }

    /// Builds a field from explicit `(site, count)` pairs; zero counts are dropped.
    pub fn from_counts(d: usize, entries: impl IntoIterator<Item = (Vec<i64>, u64)>) -> Result<Self, WalkError> {
        let packer = SitePacker::new(d)?;
        let mut counts = FxHashMap::default();
        let mut n = 0;
        for (x, c) in entries {
            if x.len() != d {
                return Err(WalkError::DimensionMismatch { index: 0, expected: d, got: x.len() });
            }
            if c > 0 {
                *counts.entry(packer.pack(&x)).or_insert(0) += c;
                n += c;
            }
        }
        Ok(Self { n, packer, counts })
    }

    pub fn horizon(&self) -> u64 {
        self.n
    }

    pub fn dimension(&self) -> usize {
        self.packer.dimension()
    }

    pub fn packer(&self) -> SitePacker {
        self.packer
    }

    pub fn get(&self, x: &[i64]) -> u64 {
        if x.iter().any(|c| c.abs() > self.packer.max_coordinate()) {
            return 0;
        }
        self.counts.get(&self.packer.pack(x)).copied().unwrap_or(0)
    }

    pub fn get_key(&self, key: u64) -> u64 {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn support_len(&self) -> usize {
        self.counts.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (k, c))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<i64>, u64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (self.packer.unpack(k), c))
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

pub fn local_time_field(path: &WalkPath) -> LocalTimeField {
    LocalTimeField::from_keys(path.packer, path.sites.iter().copied())
}

/// Smoothing parameters for `l(n, x, ε)`: the lattice ball
/// `B_n = {y : |y| <= ε sqrt(n / b_n)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothConfig {
    pub epsilon: f64,
    pub b_n: f64,
    pub n: u64,
    d: usize,
    radius_sq: f64,
    ball: Vec<Vec<i64>>,
}

impl SmoothConfig {
    pub fn new(d: usize, epsilon: f64, b_n: f64, n: u64) -> Result<Self, WalkError> {
        if d == 0 || d > MAX_DIMENSION {
            return Err(WalkError::BadDimension(d));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) || !(b_n > 0.0 && b_n.is_finite()) || n == 0 {
            return Err(WalkError::Config(format!(
                "smoothing needs epsilon > 0, b_n > 0, n >= 1 (got {epsilon}, {b_n}, {n})"
            )));
        }
        let radius_sq = epsilon * epsilon * n as f64 / b_n;
        let ball = lattice_ball(d, radius_sq);
        Ok(Self { epsilon, b_n, n, d, radius_sq, ball })
    }

    /// Picks `epsilon` so that the ball radius is exactly `radius`.
    pub fn with_radius(d: usize, radius: f64, b_n: f64, n: u64) -> Result<Self, WalkError> {
        let epsilon = radius / (n as f64 / b_n).sqrt();
        let mut cfg = Self::new(d, epsilon, b_n, n)?;
        cfg.radius_sq = radius * radius;
        cfg.ball = lattice_ball(d, cfg.radius_sq);
        Ok(cfg)
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn ball_radius(&self) -> f64 {
        self.radius_sq.sqrt()
    }

    pub fn ball_size(&self) -> usize {
        self.ball.len()
    }

    pub fn ball(&self) -> &[Vec<i64>] {
        &self.ball
    }

    /// Volume `C_d` of the unit ball in `R^d`.
    pub fn unit_ball_volume(&self) -> f64 {
        unit_ball_volume(self.d)
    }
}

pub fn unit_ball_volume(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half + 1.0)
}

/// All `y in Z^d` with `|y|^2 <= radius_sq`.
pub fn lattice_ball(d: usize, radius_sq: f64) -> Vec<Vec<i64>> {
    let r = radius_sq.sqrt().floor() as i64;
    let mut out = Vec::new();
    let mut y = vec![-r; d];
    loop {
        let sq: i64 = y.iter().map(|c| c * c).sum();
        if (sq as f64) <= radius_sq {
            out.push(y.clone());
        }
        let mut i = 0;
        loop {
            if i == d {
                return out;
            }
            if y[i] < r {
                y[i] += 1;
                break;
            }
            y[i] = -r;
            i += 1;
        }
    }
}

/// `l(n, x, ε)` stored as integer ball-hit counts; the value at `x` is
/// `count(x) / #B_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedField {
    n: u64,
    ball_size: u64,
    radius_sq: f64,
    packer: SitePacker,
    counts: FxHashMap<u64, u64>,
}

impl SmoothedField {
    pub fn horizon(&self) -> u64 {
        self.n
    }

    pub fn ball_size(&self) -> u64 {
        self.ball_size
    }

    pub fn ball_radius(&self) -> f64 {
        self.radius_sq.sqrt()
    }

    pub(crate) fn radius_sq(&self) -> f64 {
        self.radius_sq
    }

    pub fn hits(&self, x: &[i64]) -> u64 {
        if x.iter().any(|c| c.abs() > self.packer.max_coordinate()) {
            return 0;
        }
        self.counts.get(&self.packer.pack(x)).copied().unwrap_or(0)
    }

    pub(crate) fn hits_key(&self, key: u64) -> u64 {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn value(&self, x: &[i64]) -> BigRational {
        BigRational::new(self.hits(x).into(), self.ball_size.into())
    }

    pub fn keys(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (k, c))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<i64>, BigRational)> + '_ {
        self.counts.iter().map(|(&k, &c)| (self.packer.unpack(k), BigRational::new(c.into(), self.ball_size.into())))
    }

    pub fn support_len(&self) -> usize {
        self.counts.len()
    }

    /// `Σ_x l(n, x, ε)`, which equals `n`.
    pub fn total(&self) -> BigRational {
        let hits: u128 = self.counts.values().map(|&c| c as u128).sum();
        BigRational::new(BigInt::from(hits), BigInt::from(self.ball_size))
    }
}

pub fn smoothed_local_time(field: &LocalTimeField, cfg: &SmoothConfig) -> Result<SmoothedField, WalkError> {
    if cfg.d != field.dimension() {
        return Err(WalkError::DimensionDisagreement);
    }
    let packer = field.packer;
    let r = cfg.ball_radius().floor() as i64;
    let mut counts: FxHashMap<u64, u64> = FxHashMap::default();
    let mut shifted = vec![0i64; cfg.d];
    for (x, c) in field.iter() {
        if x.iter().any(|v| v.abs() + r > packer.max_coordinate()) {
            return Err(WalkError::PathOutOfRange { n: field.n, limit: packer.max_coordinate() });
        }
        for y in &cfg.ball {
            for ((s, a), b) in shifted.iter_mut().zip(&x).zip(y) {
                *s = a + b;
            }
            *counts.entry(packer.pack(&shifted)).or_insert(0) += c;
        }
    }
    Ok(SmoothedField { n: field.n, ball_size: cfg.ball.len() as u64, radius_sq: cfg.radius_sq, packer, counts })
}

impl fmt::Display for StepLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (d={}, |support|={})", self.name, self.d, self.points.len())
    }
}

/// Convenience for probabilities in tests and configs.
pub fn ratio(n: i64, d: i64) -> Rational64 {
    Rational64::new(n, d)
}
