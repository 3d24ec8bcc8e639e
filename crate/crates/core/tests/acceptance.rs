//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ilt_core::bounds::{
    gamma_lower_bound, kappa_upper_bound, resolvent_p_integral, simplex_factorization_check, ExpPoly, ExpTerm,
};
use ilt_core::ground_state::{
    gn_violation_search, kappa_from_ground_state, random_trial, rate_constants, solve_ground_state, SolverOptions,
    TrialFamily,
};
use ilt_core::lab::{
    lil_batch, mc_moment_batch, run_lil_trace, run_mc_moments, run_scaling_check, run_simulation, run_tail_curve,
    tail_batch, write_csv, ExperimentConfig, LilTrace, Schedule, Table,
};
use ilt_core::moments::{
    check_block_inequality, expected_in, moment_exact, moments_bruteforce, Arithmetic, Budget, MomentTable,
};
use ilt_core::walk::StepLaw;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

fn srw2() -> StepLaw {
    StepLaw::simple(2).unwrap()
}

fn exact_moments() -> Check {
    let law = srw2();
    let b = Budget::default();
    let e1 = expected_in(&law, 1, 2, Arithmetic::Exact, &b).map_err(|e| e.to_string())?;
    let e2 = expected_in(&law, 2, 2, Arithmetic::Exact, &b).map_err(|e| e.to_string())?;
    ensure!(e1.as_exact() == Some(&q(1, 4)), "E I_1 = {e1}");
    ensure!(e2.as_exact() == Some(&q(25, 64)), "E I_2 = {e2}");
    let m12 = moment_exact(&law, 1, 2, 2, Arithmetic::Exact, &b).map_err(|e| e.to_string())?;
    ensure!(m12.as_exact() == Some(&q(1, 4)), "E I_1^2 = {m12}");
    for n in 1..=3u64 {
        let brute = moments_bruteforce(&law, n, &[1, 2], 2, &b).map_err(|e| e.to_string())?;
        for (m, bf) in [1u32, 2].into_iter().zip(brute) {
            let f = moment_exact(&law, n, m, 2, Arithmetic::Exact, &b).map_err(|e| e.to_string())?;
            ensure!(f.as_exact() == Some(&bf), "n={n} m={m}: formula {f} vs enumeration {bf}");
        }
    }
    Ok("E I_1 = 1/4, E I_2 = 25/64, E I_1^2 = 1/4; formula = enumeration for n <= 3, m <= 2".into())
}

fn block_tuples(max_a: usize, max_block: u64) -> Vec<Vec<u64>> {
    let mut out: Vec<Vec<u64>> = (1..=max_block).map(|n| vec![n]).collect();
    let mut frontier = out.clone();
    for _ in 1..max_a {
        let mut next = Vec::new();
        for t in &frontier {
            for n in 1..=max_block {
                let mut u = t.clone();
                u.push(n);
                next.push(u);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn block_inequality_suite() -> Check {
    let mut table = MomentTable::new();
    let ns: Vec<u64> = (1..=12).collect();
    table.fill_exact(&srw2(), 2, &ns, &[1, 2], &Budget::default()).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut tightest = f64::INFINITY;
    for blocks in block_tuples(3, 4) {
        for m in 1..=2u32 {
            let r = check_block_inequality(&table, "srw2", 2, &blocks, m).map_err(|e| e.to_string())?;
            ensure!(r.lhs <= r.rhs, "blocks {blocks:?} m={m}: lhs {} > rhs {}", r.lhs, r.rhs);
            if blocks.len() == 1 {
                ensure!(r.lhs == r.rhs, "single block {blocks:?} m={m}: {} != {}", r.lhs, r.rhs);
            } else {
                tightest = tightest.min(r.rhs / r.lhs);
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} configurations hold; smallest rhs/lhs over a >= 2 is {tightest:.4}"))
}

fn kappa_2_2() -> Check {
    let gs = solve_ground_state(2, 2, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let k = kappa_from_ground_state(&gs);
    let target = (PI * 1.86225f64).powf(-0.25);
    ensure!((k - target).abs() < 1e-3, "κ(2,2) = {k}, expected {target:.4}");
    ensure!((gs.mass - 11.7008).abs() < 0.005 * 11.7008, "mass {}", gs.mass);
    Ok(format!("κ(2,2) = {k:.6} (target {target:.6}), ‖f‖² = {:.5}", gs.mass))
}

fn kappa_2_3() -> Check {
    let gs = solve_ground_state(2, 3, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let k = kappa_from_ground_state(&gs);
    let (lo, hi) = ((1.0f64 / 4.6016).powf(1.0 / 3.0), (1.0f64 / 4.5981).powf(1.0 / 3.0));
    ensure!(k > lo - 2e-3 && k < hi + 2e-3, "κ(2,3) = {k} outside ({lo}, {hi}) ± 2e-3");
    let conj = PI.powf(-4.0 / 9.0);
    Ok(format!("κ(2,3) = {k:.6} in ({lo:.5}, {hi:.5}); |κ − π^(−4/9)| = {:.2e}", (k - conj).abs()))
}

fn bound_chain() -> Check {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let r22 = resolvent_p_integral(2, 2, 1e-10).map_err(|e| err(&e))?;
    let r32 = resolvent_p_integral(3, 2, 1e-10).map_err(|e| err(&e))?;
    ensure!((r22.value - 1.0 / (2.0 * PI)).abs() < 1e-8, "R(2,2) = {}", r22.value);
    ensure!((r32.value - PI.sqrt() * (2.0 * PI).powf(-1.5)).abs() < 1e-8, "R(3,2) = {}", r32.value);
    let b22 = kappa_upper_bound(2, 2, 1e-10).map_err(|e| err(&e))?;
    let b32 = kappa_upper_bound(3, 2, 1e-10).map_err(|e| err(&e))?;
    ensure!((b22 - PI.powf(-0.25)).abs() < 1e-5, "bound(2,2) = {b22}");
    ensure!((b32 - 0.5916).abs() < 1e-4, "bound(3,2) = {b32}");
    let mut parts = Vec::new();
    for (d, p) in [(2, 2), (3, 2), (2, 3), (2, 4)] {
        let gs = solve_ground_state(d, p, &SolverOptions { cross_check: false, ..SolverOptions::default() })
            .map_err(|e| err(&e))?;
        let k = kappa_from_ground_state(&gs);
        let b = kappa_upper_bound(d, p, 1e-8).map_err(|e| err(&e))?;
        ensure!(k < b, "({d},{p}): κ {k} not below bound {b}");
        parts.push(format!("κ({d},{p}) {k:.4} < {b:.4}"));
    }
    let k22 = kappa_from_ground_state(
        &solve_ground_state(2, 2, &SolverOptions { cross_check: false, ..SolverOptions::default() })
            .map_err(|e| err(&e))?,
    );
    let g = gamma_lower_bound(2, 2, 1e-10).map_err(|e| err(&e))?;
    let ga = rate_constants(2, 2, k22, 0.25).map_err(|e| err(&e))?.gamma_alpha;
    ensure!((g - PI).abs() < 1e-7 && g <= ga, "γ bound {g} vs γ_α {ga}");
    Ok(format!("{}; π <= γ_α = {ga:.4}", parts.join(", ")))
}

fn factorization() -> Check {
    let mut worst = 0.0f64;
    let mut record = |r: ilt_core::bounds::FactorizationReport| -> Result<(), String> {
        worst = worst.max(r.gap);
        ensure!(r.gap < 1e-6, "gap {} (lhs {}, rhs {})", r.gap, r.lhs, r.rhs);
        Ok(())
    };
    let id = |t: f64| t;
    let one = |_: f64| 1.0;
    let decay = |t: f64| (-t).exp();
    record(simplex_factorization_check(&[&id], 1e-9).map_err(|e| e.to_string())?)?;
    record(simplex_factorization_check(&[&one, &one], 1e-9).map_err(|e| e.to_string())?)?;
    record(simplex_factorization_check(&[&decay, &decay], 1e-9).map_err(|e| e.to_string())?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1906);
    for _ in 0..10 {
        let m = rng.random_range(1..=3usize);
        let polys: Vec<ExpPoly> = (0..m)
            .map(|_| {
                let terms = (0..rng.random_range(1..=2))
                    .map(|_| ExpTerm {
                        coef: rng.random_range(0.1..2.0),
                        power: rng.random_range(0..=2),
                        rate: rng.random_range(0.0..=2.0),
                    })
                    .collect();
                ExpPoly::new(terms).unwrap()
            })
            .collect();
        let fs: Vec<Box<dyn Fn(f64) -> f64 + '_>> =
            polys.iter().map(|p| Box::new(move |t: f64| p.eval(t)) as Box<dyn Fn(f64) -> f64>).collect();
        let refs: Vec<&dyn Fn(f64) -> f64> = fs.iter().map(|b| b.as_ref()).collect();
        record(simplex_factorization_check(&refs, 1e-9).map_err(|e| e.to_string())?)?;
    }
    Ok(format!("3 fixed families + 10 random exponential polynomials, worst gap {worst:.2e}"))
}

fn mc_consistency() -> Check {
    let b = Budget::default();
    let mut parts = Vec::new();
    for n in [8u64, 64] {
        let cfg =
            ExperimentConfig { n, replicas: 100_000, seed: 2718, moments: vec![1], ..ExperimentConfig::default() };
        let e = run_mc_moments(&cfg).map_err(|e| e.to_string())?;
        let exact = expected_in(&srw2(), n, 2, Arithmetic::Exact, &b).map_err(|e| e.to_string())?.to_f64();
        let est = e[0].value.to_f64();
        let se = e[0].method.stderr().ok_or("missing stderr")?;
        ensure!((est - exact).abs() < 3.0 * se, "n={n}: MC {est} vs exact {exact} (se {se})");
        parts.push(format!("n={n}: {est:.4} vs {exact:.4} (z = {:.2})", (est - exact) / se));
    }
    let cfg = ExperimentConfig { n: 10_000, replicas: 8000, seed: 31, ..ExperimentConfig::default() };
    let s = run_scaling_check(&cfg).map_err(|e| e.to_string())?;
    ensure!(s.relative_gap < 0.05, "I_n/n: {} at 1e4 vs {} at 4e4", s.mean_small, s.mean_large);
    parts.push(format!(
        "I_n/n {:.4} ± {:.4} (1e4) vs {:.4} ± {:.4} (4e4), gap {:.2}%",
        s.mean_small,
        s.stderr_small,
        s.mean_large,
        s.stderr_large,
        100.0 * s.relative_gap
    ));
    Ok(parts.join("; "))
}

fn gn_extremality() -> Check {
    let mut parts = Vec::new();
    for (d, p) in [(2, 2), (2, 3)] {
        let gs = solve_ground_state(d, p, &SolverOptions { cross_check: false, ..SolverOptions::default() })
            .map_err(|e| e.to_string())?;
        let k = kappa_from_ground_state(&gs);
        let r = gn_violation_search(d, p, k, TrialFamily::Mixture, 1000, 57, 1e-3).map_err(|e| e.to_string())?;
        ensure!(r.violations == 0 && r.worst_ratio <= 1.001 * k, "({d},{p}): worst {} vs κ {k}", r.worst_ratio);
        parts.push(format!("({d},{p}) worst/κ = {:.5}", r.worst_ratio / k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = random_trial(2, TrialFamily::Mixture, &mut rng);
        let base = t.gn_ratio(2);
        for lambda in [0.3, 1.7, 4.0] {
            worst = worst.max((t.rescaled(lambda).gn_ratio(2) - base).abs() / base);
        }
    }
    ensure!(worst < 1e-10, "scale invariance broken by {worst:e}");
    parts.push(format!("scale drift {worst:.1e}"));
    Ok(parts.join(", "))
}

fn desk_scale_substitutes() -> Check {
    let k = kappa_from_ground_state(
        &solve_ground_state(2, 2, &SolverOptions { cross_check: false, ..SolverOptions::default() })
            .map_err(|e| e.to_string())?,
    );
    let rates = rate_constants(2, 2, k, 0.25).map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig { n: 10_000, replicas: 10_000, seed: 404, ..ExperimentConfig::default() };
    let curve = run_tail_curve(&cfg, &rates).map_err(|e| e.to_string())?;
    ensure!(curve.is_strictly_decreasing(), "p̂ not strictly decreasing: {:?}", curve.rows);
    for r in &curve.rows {
        ensure!((r.theory + 2.925 * r.lambda).abs() < 1e-3 * r.lambda, "theory {} at λ {}", r.theory, r.lambda);
    }
    let p_hats: Vec<String> = curve.rows.iter().map(|r| format!("{:.4}", r.p_hat)).collect();

    let lil = ExperimentConfig {
        replicas: 20,
        seed: 1337,
        schedule: Some(Schedule { start: 16, ratio: 1.5, max_n: 1_000_000 }),
        ..ExperimentConfig::default()
    };
    let trace = run_lil_trace(&lil, rates.lil_walk).map_err(|e| e.to_string())?;
    let maxima = trace.final_maxima();
    ensure!(maxima.len() == 20, "{} replicas traced", maxima.len());
    let top = maxima.iter().cloned().fold(0.0, f64::max);
    ensure!(
        maxima.iter().all(|m| m.is_finite() && *m > 0.0 && *m < 10.0 * rates.lil_walk),
        "running maxima {maxima:?} vs 10 × {}",
        rates.lil_walk
    );
    ensure!((trace.reference - 0.3419).abs() < 1e-3, "reference {}", trace.reference);
    ensure!(trace.rows.iter().all(|r| r.reference == trace.reference), "reference column missing");
    Ok(format!(
        "tail p̂ = [{}] with slope −{:.4}λ; LIL max over 20 replicas {top:.4} < {:.4}, reference {:.4}. \
         The exponential tail and a.s. LIL limits are not reproducible at this scale; these are the stated substitutes",
        p_hats.join(", "),
        rates.moderate_coeff,
        10.0 * rates.lil_walk,
        trace.reference
    ))
}

fn csv(t: &dyn Table) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(t, &mut buf).unwrap();
    buf
}

fn determinism_and_merge() -> Check {
    let cfg = ExperimentConfig {
        n: 500,
        replicas: 120,
        seed: 99,
        epsilon: Some(0.3),
        moments: vec![1, 2, 3],
        ..ExperimentConfig::default()
    };
    let e = |x: ilt_core::lab::LabError| x.to_string();
    ensure!(
        csv(&run_simulation(&cfg).map_err(e)?) == csv(&run_simulation(&cfg).map_err(e)?),
        "simulation rerun differs"
    );
    let rates = rate_constants(2, 2, 0.643, 0.25).map_err(|x| x.to_string())?;
    ensure!(
        csv(&run_tail_curve(&cfg, &rates).map_err(e)?) == csv(&run_tail_curve(&cfg, &rates).map_err(e)?),
        "tail rerun differs"
    );
    let whole = mc_moment_batch(&cfg, 0..120).map_err(e)?;
    let tails = tail_batch(&cfg, 0..120).map_err(e)?;
    let cuts = [0..13u64, 13..70, 70..71, 71..120];
    for order in [[3, 1, 0, 2], [2, 3, 1, 0], [1, 0, 2, 3]] {
        let mut acc = mc_moment_batch(&cfg, cuts[order[0]].clone()).map_err(e)?;
        let mut tacc = tail_batch(&cfg, cuts[order[0]].clone()).map_err(e)?;
        for &i in &order[1..] {
            acc.merge(&mc_moment_batch(&cfg, cuts[i].clone()).map_err(e)?).map_err(e)?;
            tacc.merge(&tail_batch(&cfg, cuts[i].clone()).map_err(e)?).map_err(e)?;
        }
        ensure!(acc == whole && tacc == tails, "merge order {order:?} changed pooled statistics");
    }
    let lil = ExperimentConfig { replicas: 6, schedule: Some(Schedule { start: 16, ratio: 1.5, max_n: 5000 }), ..cfg };
    let full = csv(&run_lil_trace(&lil, 0.34).map_err(e)?);
    let merged = LilTrace::merge([lil_batch(&lil, 0.34, 4..6).map_err(e)?, lil_batch(&lil, 0.34, 0..4).map_err(e)?]);
    ensure!(csv(&merged) == full, "LIL batches merged out of order differ");
    Ok("simulate/tail/LIL reruns byte-identical; moment, tail and LIL batches merge identically in 3 orders".into())
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "exact moments", limit: Some(Duration::from_secs(5)), run: exact_moments },
        Criterion {
            id: 2,
            name: "block moment inequality",
            limit: Some(Duration::from_secs(60)),
            run: block_inequality_suite,
        },
        Criterion { id: 3, name: "κ(2,2)", limit: None, run: kappa_2_2 },
        Criterion { id: 4, name: "κ(2,3)", limit: None, run: kappa_2_3 },
        Criterion { id: 5, name: "bound chain", limit: Some(Duration::from_secs(30)), run: bound_chain },
        Criterion { id: 6, name: "simplex factorization", limit: None, run: factorization },
        Criterion {
            id: 7,
            name: "Monte Carlo consistency",
            limit: Some(Duration::from_secs(300)),
            run: mc_consistency,
        },
        Criterion { id: 8, name: "GN extremality", limit: None, run: gn_extremality },
        Criterion {
            id: 9,
            name: "desk-scale tail and LIL",
            limit: Some(Duration::from_secs(900)),
            run: desk_scale_substitutes,
        },
        Criterion { id: 10, name: "determinism and merge", limit: None, run: determinism_and_merge },
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_none_or(|o| o == c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:>2} {} ({:.1?}): {detail}", c.id, c.name, elapsed),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2} {} ({:.1?}): {why}", c.id, c.name, elapsed);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
