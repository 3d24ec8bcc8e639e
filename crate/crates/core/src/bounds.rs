//! The `p`-fold resolvent integral `∫_{R^d} (∫_0^∞ e^{−t} p_t(x) dt)^p dx`,
//! the bounds on `κ(d, p)` and `γ_α` it yields, and the simplex
//! factorisation of exponentially weighted convolution integrals.

use std::cell::RefCell;
use std::f64::consts::PI;

use serde::Serialize;
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::ground_state::condition_holds;
use crate::quadrature::{integrate, integrate_to_infinity, QuadError, Tolerance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("(d, p) = ({d}, {p}) violates p(d-2) < d with d >= 2, p >= 2")]
    ConditionViolated { d: u32, p: u32 },
    #[error("quadrature failed: {0}")]
    NoConvergence(#[from] QuadError),
    #[error("invalid test function: {0}")]
    InvalidTestFunction(String),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
}

fn check(d: u32, p: u32, tol: f64) -> Result<(), BoundsError> {
    if !condition_holds(d, p) {
        return Err(BoundsError::ConditionViolated { d, p });
    }
    if !(tol > 0.0) {
        return Err(BoundsError::InvalidTolerance(tol));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolventIntegral {
    pub d: u32,
    pub p: u32,
    pub value: f64,
    pub error: f64,
    /// `∫_{simplex} e_{p−1}(w)^{−d/2} dw` over `w_1 + .. + w_p = 1`.
    pub simplex_integral: f64,
}

/// Elementary symmetric polynomial `Σ_j Π_{k≠j} w_k`.
fn leave_one_out_sum(w: &[f64]) -> f64 {
    (0..w.len()).map(|j| w.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, x)| x).product::<f64>()).sum()
}

/// Integrates over the simplex `w_1 + .. + w_p = 1`. The integrand is
/// symmetric, so only the chamber `w_1 <= .. <= w_p` is visited and the
/// result multiplied by `p!`; there the singular faces sit at the lower
/// limits and `w_p >= 1/p` never suffers cancellation.
fn simplex_integral(d: u32, p: usize, tol: f64) -> Result<(f64, f64), BoundsError> {
    if p == 1 {
        return Ok((1.0, 0.0));
    }
    let failure: RefCell<Option<QuadError>> = RefCell::new(None);
    let expo = -(d as f64) / 2.0;
    let inner = Tolerance::new(tol * 1e-3, tol * 1e-2).with_max_intervals(4000);
    let outer = Tolerance::new(tol * 1e-2, tol).with_max_intervals(4000);

    // `prefix` holds w_1..w_{k}; integrates w_{k+1} over [w_k, (1 − S)/(p − k)]
    fn level(
        p: usize,
        prefix: &mut Vec<f64>,
        used: f64,
        expo: f64,
        tol: Tolerance,
        failure: &RefCell<Option<QuadError>>,
    ) -> f64 {
        let k = prefix.len();
        if k + 1 == p {
            prefix.push(1.0 - used);
            let e = leave_one_out_sum(prefix);
            prefix.pop();
            return if e > 0.0 { e.powf(expo) } else { 0.0 };
        }
        let lo = prefix.last().copied().unwrap_or(0.0);
        let hi = (1.0 - used) / (p - k) as f64;
        if hi <= lo {
            return 0.0;
        }
        match integrate(
            |x| {
                prefix.push(x);
                let v = level(p, prefix, used + x, expo, tol, failure);
                prefix.pop();
                v
            },
            lo,
            hi,
            tol,
        ) {
            Ok(e) => e.value,
            Err(err) => {
                failure.borrow_mut().get_or_insert(err);
                f64::NAN
            }
        }
    }

    let mut prefix = Vec::with_capacity(p);
    let result = integrate(
        |x| {
            prefix.push(x);
            let v = level(p, &mut prefix, x, expo, inner, &failure);
            prefix.pop();
            v
        },
        0.0,
        1.0 / p as f64,
        outer,
    );
    if let Some(err) = failure.into_inner() {
        return Err(err.into());
    }
    let est = result?;
    let fact: f64 = (1..=p).map(|i| i as f64).product();
    // inner levels were solved to a relative tolerance `tol / 100`
    let inner_err = if p > 2 { 1e-2 * tol * est.value.abs() } else { 0.0 };
    Ok((fact * est.value, fact * (est.error + inner_err)))
}

/// Evaluates the resolvent integral through the time-integral form
/// `(2π)^{−d(p−1)/2} ∫_{(0,∞)^p} e^{−Σt} (Σ_j Π_{k≠j} t_k)^{−d/2} dt`,
/// with the radial time `s = Σ t` integrated in closed form as
/// `Γ(p − d(p−1)/2)` and the remaining simplex integral by nested
/// adaptive quadrature. `tol` is relative.
pub fn resolvent_p_integral(d: u32, p: u32, tol: f64) -> Result<ResolventIntegral, BoundsError> {
    check(d, p, tol)?;
    let dp = (d * (p - 1)) as f64;
    let (simplex, simplex_err) = simplex_integral(d, p as usize, tol)?;
    let factor = gamma(p as f64 - dp / 2.0) * (2.0 * PI).powf(-dp / 2.0);
    Ok(ResolventIntegral { d, p, value: factor * simplex, error: factor * simplex_err, simplex_integral: simplex })
}

/// Upper bound on `κ(d, p)` from a resolvent integral value.
pub fn kappa_upper_bound_from(d: u32, p: u32, resolvent: f64) -> f64 {
    let pf = p as f64;
    let dp = (d * (p - 1)) as f64;
    let gap = 2.0 * pf - dp;
    (pf / dp).powf(dp / (4.0 * pf)) * (2.0 * pf / gap).powf(gap / (4.0 * pf)) * resolvent.powf(1.0 / (2.0 * pf))
}

/// Lower bound on `γ_α` from a resolvent integral value.
pub fn gamma_lower_bound_from(d: u32, p: u32, resolvent: f64) -> f64 {
    let pf = p as f64;
    let dp = (d * (p - 1)) as f64;
    let gap = 2.0 * pf - dp;
    dp / 2.0 * (gap / (2.0 * pf)).powf(gap / dp) * resolvent.powf(-2.0 / dp)
}

pub fn kappa_upper_bound(d: u32, p: u32, tol: f64) -> Result<f64, BoundsError> {
    Ok(kappa_upper_bound_from(d, p, resolvent_p_integral(d, p, tol)?.value))
}

pub fn gamma_lower_bound(d: u32, p: u32, tol: f64) -> Result<f64, BoundsError> {
    Ok(gamma_lower_bound_from(d, p, resolvent_p_integral(d, p, tol)?.value))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorEstimates {
    pub resolvent_integral: f64,
    pub kappa_upper_bound: f64,
    pub gamma_lower_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsReport {
    pub d: u32,
    pub p: u32,
    pub resolvent_integral: f64,
    pub kappa_upper_bound: f64,
    pub gamma_lower_bound: f64,
    pub error_estimates: ErrorEstimates,
}

/// Resolvent integral and both bounds, with first-order error propagation.
pub fn bounds_report(d: u32, p: u32, tol: f64) -> Result<BoundsReport, BoundsError> {
    let r = resolvent_p_integral(d, p, tol)?;
    let rel = r.error / r.value;
    let kub = kappa_upper_bound_from(d, p, r.value);
    let glb = gamma_lower_bound_from(d, p, r.value);
    let dp = (d * (p - 1)) as f64;
    Ok(BoundsReport {
        d,
        p,
        resolvent_integral: r.value,
        kappa_upper_bound: kub,
        gamma_lower_bound: glb,
        error_estimates: ErrorEstimates {
            resolvent_integral: r.error,
            kappa_upper_bound: kub * rel / (2.0 * p as f64),
            gamma_lower_bound: glb * rel * 2.0 / dp,
        },
    })
}

/// `φ(t) = Σ c_i t^{k_i} e^{−β_i t}` with `c_i >= 0`, `β_i > −1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpPoly {
    pub terms: Vec<ExpTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpTerm {
    pub coef: f64,
    pub power: u32,
    pub rate: f64,
}

impl ExpPoly {
    pub fn new(terms: Vec<ExpTerm>) -> Result<Self, BoundsError> {
        if terms.is_empty() {
            return Err(BoundsError::InvalidTestFunction("no terms".into()));
        }
        for t in &terms {
            if !(t.coef >= 0.0 && t.coef.is_finite()) {
                return Err(BoundsError::InvalidTestFunction(format!("negative coefficient {}", t.coef)));
            }
            if !(t.rate > -1.0 && t.rate.is_finite()) {
                return Err(BoundsError::InvalidTestFunction(format!("rate {} makes e^-t φ non-integrable", t.rate)));
            }
        }
        Ok(Self { terms })
    }

    pub fn monomial(coef: f64, power: u32, rate: f64) -> Result<Self, BoundsError> {
        Self::new(vec![ExpTerm { coef, power, rate }])
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.terms.iter().map(|x| x.coef * t.powi(x.power as i32) * (-x.rate * t).exp()).sum()
    }

    /// `∫_0^∞ e^{−t} φ(t) dt = Σ c k! / (1 + β)^{k+1}`.
    pub fn laplace_at_one(&self) -> f64 {
        self.terms
            .iter()
            .map(|x| {
                let fact: f64 = (1..=x.power).map(f64::from).product();
                x.coef * fact / (1.0 + x.rate).powi(x.power as i32 + 1)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorizationReport {
    pub m: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub lhs_error: f64,
    pub rhs_error: f64,
}

/// Compares
/// `∫_0^∞ e^{−t} ∫_{0<=s_1<..<s_m<=t} φ_1(s_1) Π_{k>=2} φ_k(s_k − s_{k−1}) ds dt`
/// with `Π_k ∫_0^∞ e^{−t} φ_k(t) dt`.
///
/// The left side is evaluated in the original time variables: the inner
/// region is built by nested convolutions `A_k(s) = ∫_0^s A_{k−1}(u) φ_k(s−u) du`
/// and the outer time is integrated out against `e^{−t}` as `∫ e^{−s} A_m(s) ds`.
pub fn simplex_factorization_check(phis: &[&dyn Fn(f64) -> f64], tol: f64) -> Result<FactorizationReport, BoundsError> {
    if phis.is_empty() {
        return Err(BoundsError::InvalidTestFunction("need at least one function".into()));
    }
    if !(tol > 0.0) {
        return Err(BoundsError::InvalidTolerance(tol));
    }
    let failure: RefCell<Option<QuadError>> = RefCell::new(None);
    let inner = Tolerance::new(tol * 1e-4, tol * 1e-3).with_max_intervals(1000);

    fn conv(
        k: usize,
        s: f64,
        phis: &[&dyn Fn(f64) -> f64],
        tol: Tolerance,
        failure: &RefCell<Option<QuadError>>,
    ) -> f64 {
        if k == 0 {
            return phis[0](s);
        }
        if s == 0.0 {
            return 0.0;
        }
        match integrate(|u| conv(k - 1, u, phis, tol, failure) * phis[k](s - u), 0.0, s, tol) {
            Ok(e) => e.value,
            Err(err) => {
                failure.borrow_mut().get_or_insert(err);
                f64::NAN
            }
        }
    }

    let m = phis.len();
    let outer = Tolerance::new(tol * 1e-2, tol * 1e-2).with_max_intervals(4000);
    let lhs = integrate_to_infinity(
        |s| {
            let damp = (-s).exp();
            if damp == 0.0 {
                0.0
            } else {
                damp * conv(m - 1, s, phis, inner, &failure)
            }
        },
        0.0,
        outer,
    );
    if let Some(err) = failure.into_inner() {
        return Err(err.into());
    }
    let lhs = lhs?;
    let mut rhs = 1.0;
    let mut rhs_rel_err = 0.0;
    for phi in phis {
        let e = integrate_to_infinity(
            |t| {
                let damp = (-t).exp();
                if damp == 0.0 {
                    0.0
                } else {
                    damp * phi(t)
                }
            },
            0.0,
            outer,
        )?;
        rhs *= e.value;
        rhs_rel_err += e.error / e.value.abs().max(f64::MIN_POSITIVE);
    }
    let inner_err = if m > 1 { 1e-3 * tol * lhs.value.abs() } else { 0.0 };
    Ok(FactorizationReport {
        m,
        lhs: lhs.value,
        rhs,
        gap: (lhs.value - rhs).abs(),
        lhs_error: lhs.error + inner_err,
        rhs_error: rhs_rel_err * rhs.abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_resolvents() {
        let r = resolvent_p_integral(2, 2, 1e-12).unwrap();
        assert!((r.value - 1.0 / (2.0 * PI)).abs() < 1e-12);
        let r = resolvent_p_integral(3, 2, 1e-12).unwrap();
        assert!((r.value - PI.sqrt() * (2.0 * PI).powf(-1.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_supercritical() {
        assert!(matches!(resolvent_p_integral(3, 3, 1e-8), Err(BoundsError::ConditionViolated { .. })));
        assert!(matches!(resolvent_p_integral(2, 2, 0.0), Err(BoundsError::InvalidTolerance(_))));
    }

    #[test]
    fn bound_values() {
        let k = kappa_upper_bound(2, 2, 1e-10).unwrap();
        assert!((k - PI.powf(-0.25)).abs() < 1e-10);
        let k3 = kappa_upper_bound(3, 2, 1e-10).unwrap();
        assert!((k3 - 0.5916).abs() < 1e-4, "{k3}");
        let g = gamma_lower_bound(2, 2, 1e-10).unwrap();
        assert!((g - PI).abs() < 1e-9);
    }

    #[test]
    fn bounds_are_algebraically_linked() {
        for (d, p, r) in [(2, 2, 0.159), (3, 2, 0.1125), (2, 3, 0.05), (2, 5, 0.01)] {
            let k = kappa_upper_bound_from(d, p, r);
            let expo = -4.0 * p as f64 / (d * (p - 1)) as f64;
            let via_kappa = p as f64 / 2.0 * k.powf(expo);
            let g = gamma_lower_bound_from(d, p, r);
            assert!((g - via_kappa).abs() < 1e-10 * g, "({d},{p})");
        }
    }

    #[test]
    fn exp_poly_laplace() {
        let phi =
            ExpPoly::new(vec![ExpTerm { coef: 2.0, power: 3, rate: 0.5 }, ExpTerm { coef: 1.0, power: 0, rate: 0.0 }])
                .unwrap();
        let q = integrate_to_infinity(|t| (-t).exp() * phi.eval(t), 0.0, Tolerance::new(1e-14, 1e-13)).unwrap();
        assert!((q.value - phi.laplace_at_one()).abs() < 1e-11);
        assert!(ExpPoly::monomial(-1.0, 0, 0.0).is_err());
        assert!(ExpPoly::monomial(1.0, 0, -1.5).is_err());
    }

    #[test]
    fn factorization_basic_families() {
        let t = |x: f64| x;
        let r = simplex_factorization_check(&[&t], 1e-10).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-9 && r.gap < 1e-9);
        let one = |_: f64| 1.0;
        let r = simplex_factorization_check(&[&one, &one], 1e-10).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-9 && r.gap < 1e-9);
        let e = |x: f64| (-x).exp();
        let r = simplex_factorization_check(&[&e, &e], 1e-10).unwrap();
        assert!((r.lhs - 0.25).abs() < 1e-9 && r.gap < 1e-9, "{r:?}");
    }
}
