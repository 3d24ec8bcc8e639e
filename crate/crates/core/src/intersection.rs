//! Intersection local time `I_n = Σ_x Π_j l_j(n, x)`, intersection range
//! `J_n`, and their incremental profiles.

use num_bigint::BigInt;
use num_rational::BigRational;
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::walk::{LocalTimeField, SitePacker, SmoothedField, WalkPath};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntersectionError {
    #[error("need at least one walk")]
    NoWalks,
    #[error("walks have different horizons: {0:?}")]
    MismatchedHorizons(Vec<u64>),
    #[error("walks live in different dimensions")]
    MismatchedDimension,
    #[error("smoothed fields use different smoothing configurations")]
    MismatchedConfig,
}

/// `I_n`, `J_n` and optionally the per-round profile `I_1..I_n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionResult {
    pub intersection: u128,
    pub range: u64,
    pub n: u64,
    pub p: usize,
    pub profile: Option<Vec<u128>>,
}

fn check_fields(fields: &[&LocalTimeField]) -> Result<(), IntersectionError> {
    let first = fields.first().ok_or(IntersectionError::NoWalks)?;
    if fields.iter().any(|f| f.horizon() != first.horizon()) {
        return Err(IntersectionError::MismatchedHorizons(fields.iter().map(|f| f.horizon()).collect()));
    }
    if fields.iter().any(|f| f.packer() != first.packer()) {
        return Err(IntersectionError::MismatchedDimension);
    }
    Ok(())
}

/// Index of the field with the smallest support; iteration runs over it.
fn smallest<'a>(fields: &[&'a LocalTimeField]) -> &'a LocalTimeField {
    fields.iter().min_by_key(|f| f.support_len()).copied().unwrap()
}

pub fn intersection_count(fields: &[&LocalTimeField]) -> Result<u128, IntersectionError> {
    check_fields(fields)?;
    let base = smallest(fields);
    let mut total = 0u128;
    for (key, _) in base.keys() {
        let mut prod = 1u128;
        for f in fields {
            prod *= f.get_key(key) as u128;
            if prod == 0 {
                break;
            }
        }
        total += prod;
    }
    Ok(total)
}

/// `J_n`: number of sites visited by every walk during `1..=n`.
pub fn range_intersection(fields: &[&LocalTimeField]) -> Result<u64, IntersectionError> {
    check_fields(fields)?;
    let base = smallest(fields);
    Ok(base.keys().filter(|&(key, _)| fields.iter().all(|f| f.get_key(key) > 0)).count() as u64)
}

/// Running `I_k` and `J_k` for `p` walks advanced one round at a time.
///
/// Within a round walk 1 moves first, then walk 2, and so on; when walk
/// `j` lands on `x` the total grows by `Π_{j' != j} c_{j'}(x)`. Only values
/// at round boundaries are meaningful.
#[derive(Debug, Clone)]
pub struct IntersectionAccumulator {
    p: usize,
    slots: FxHashMap<u64, usize>,
    counts: Vec<u64>,
    total: u128,
    range: u64,
    rounds: u64,
}

impl IntersectionAccumulator {
    pub fn new(p: usize) -> Self {
        Self { p, slots: FxHashMap::default(), counts: Vec::new(), total: 0, range: 0, rounds: 0 }
    }

    pub fn walks(&self) -> usize {
        self.p
    }

    /// Applies one round; `sites[j]` is the new position of walk `j`.
    pub fn advance(&mut self, sites: &[u64]) {
        debug_assert_eq!(sites.len(), self.p);
        let p = self.p;
        for (j, &site) in sites.iter().enumerate() {
            let next = self.counts.len() / p;
            let slot = *self.slots.entry(site).or_insert(next);
            if slot == next {
                self.counts.resize(self.counts.len() + p, 0);
            }
            let row = &mut self.counts[slot * p..(slot + 1) * p];
            let mut others = 1u128;
            let mut all_others_positive = true;
            for (jj, &c) in row.iter().enumerate() {
                if jj != j {
                    others *= c as u128;
                    all_others_positive &= c > 0;
                }
            }
            if row[j] == 0 && all_others_positive {
                self.range += 1;
            }
            row[j] += 1;
            self.total += others;
        }
        self.rounds += 1;
    }

    pub fn intersection(&self) -> u128 {
        self.total
    }

    pub fn range(&self) -> u64 {
        self.range
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }
}

fn check_paths(paths: &[&WalkPath]) -> Result<(usize, SitePacker), IntersectionError> {
    let first = paths.first().ok_or(IntersectionError::NoWalks)?;
    if paths.iter().any(|w| w.len() != first.len()) {
        return Err(IntersectionError::MismatchedHorizons(paths.iter().map(|w| w.len() as u64).collect()));
    }
    if paths.iter().any(|w| w.packer() != first.packer()) {
        return Err(IntersectionError::MismatchedDimension);
    }
    Ok((first.len(), first.packer()))
}

/// `I_1, ..., I_n` for equal-length paths.
pub fn intersection_profile(paths: &[&WalkPath]) -> Result<Vec<u128>, IntersectionError> {
    Ok(intersect(paths, true)?.profile.unwrap_or_default())
}

/// Computes `I_n` and `J_n` in one pass, optionally keeping the profile.
pub fn intersect(paths: &[&WalkPath], keep_profile: bool) -> Result<IntersectionResult, IntersectionError> {
    let (n, _) = check_paths(paths)?;
    let p = paths.len();
    let mut acc = IntersectionAccumulator::new(p);
    let mut profile = keep_profile.then(|| Vec::with_capacity(n));
    let mut round = vec![0u64; p];
    for k in 0..n {
        for (slot, w) in round.iter_mut().zip(paths) {
            *slot = w.site_keys()[k];
        }
        acc.advance(&round);
        if let Some(prof) = profile.as_mut() {
            prof.push(acc.intersection());
        }
    }
    Ok(IntersectionResult { intersection: acc.intersection(), range: acc.range(), n: n as u64, p, profile })
}

/// `Σ_x Π_j l_j(n, x, ε)` as an exact rational.
pub fn smoothed_intersection(fields: &[&SmoothedField]) -> Result<BigRational, IntersectionError> {
    let first = fields.first().ok_or(IntersectionError::NoWalks)?;
    if fields.iter().any(|f| f.horizon() != first.horizon()) {
        return Err(IntersectionError::MismatchedHorizons(fields.iter().map(|f| f.horizon()).collect()));
    }
    if fields.iter().any(|f| f.ball_size() != first.ball_size() || f.radius_sq() != first.radius_sq()) {
        return Err(IntersectionError::MismatchedConfig);
    }
    let base = fields.iter().min_by_key(|f| f.support_len()).unwrap();
    let mut numer = BigInt::from(0);
    for (key, _) in base.keys() {
        let mut prod = BigInt::from(1);
        for f in fields {
            let c = f.hits_key(key);
            if c == 0 {
                prod = BigInt::from(0);
                break;
            }
            prod *= c;
        }
        numer += prod;
    }
    let denom = BigInt::from(first.ball_size()).pow(fields.len() as u32);
    Ok(BigRational::new(numer, denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::{local_time_field, sample_path, StepLaw, StreamId};

    fn field(entries: &[(i64, u64)]) -> LocalTimeField {
        LocalTimeField::from_counts(1, entries.iter().map(|&(x, c)| (vec![x], c))).unwrap()
    }

    #[test]
    fn product_sum_example() {
        // site 2 pads walk 1 to the common horizon 4 without touching walk 2
        let l1 = field(&[(0, 2), (1, 1), (2, 1)]);
        let l2 = field(&[(0, 1), (1, 3)]);
        assert_eq!(intersection_count(&[&l1, &l2]).unwrap(), 5);
        assert_eq!(range_intersection(&[&l1, &l2]).unwrap(), 2);
    }

    #[test]
    fn disjoint_supports() {
        let l1 = field(&[(0, 2), (1, 1)]);
        let l2 = field(&[(5, 1), (6, 2)]);
        assert_eq!(intersection_count(&[&l1, &l2]).unwrap(), 0);
        assert_eq!(range_intersection(&[&l1, &l2]).unwrap(), 0);
    }

    #[test]
    fn mismatched_horizons() {
        let l1 = field(&[(0, 2)]);
        let l2 = field(&[(0, 3)]);
        assert!(matches!(intersection_count(&[&l1, &l2]), Err(IntersectionError::MismatchedHorizons(_))));
        assert_eq!(intersection_count(&[]), Err(IntersectionError::NoWalks));
    }

    #[test]
    fn identical_walks_give_square_counts() {
        // A straight path visits distinct sites, so l(k, .) is 1 on k sites and
        // Σ_x l(k,x)^2 = k; a back-and-forth path revisits.
        let law = StepLaw::simple(2).unwrap();
        // indices: 0 = +e1, 1 = -e1
        let path = WalkPath::from_increments(&law, &[0, 1, 0]).unwrap();
        let prof = intersection_profile(&[&path, &path]).unwrap();
        // sites: e1, 0, e1 -> l(1)={e1:1}, l(2)={e1:1,0:1}, l(3)={e1:2,0:1}
        assert_eq!(prof, vec![1, 2, 5]);
    }

    #[test]
    fn profile_matches_recount() {
        let law = StepLaw::simple(2).unwrap();
        let a = sample_path(&law, 50, StreamId::new(3, 0)).unwrap();
        let b = sample_path(&law, 50, StreamId::new(3, 1)).unwrap();
        let res = intersect(&[&a, &b], true).unwrap();
        let fa = local_time_field(&a);
        let fb = local_time_field(&b);
        assert_eq!(res.intersection, intersection_count(&[&fa, &fb]).unwrap());
        assert_eq!(res.range, range_intersection(&[&fa, &fb]).unwrap());
        assert_eq!(*res.profile.unwrap().last().unwrap(), res.intersection);
    }
}
