use ilt_core::ground_state::rate_constants;
use ilt_core::lab::{
    lil_batch, mc_moment_batch, run_lil_trace, run_mc_moments, run_simulation, run_tail_curve, tail_batch,
    tail_curve_from, write_csv, write_json, BnRule, ExperimentConfig, LilTrace, Schedule, Table, TailCurve,
};
use ilt_core::moments::{expected_in, Arithmetic, Budget};
use ilt_core::walk::StepLaw;

fn cfg(n: u64, replicas: u64, seed: u64) -> ExperimentConfig {
    ExperimentConfig { n, replicas, seed, ..ExperimentConfig::default() }
}

fn csv_bytes(t: &dyn Table) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(t, &mut buf).unwrap();
    buf
}

fn with_threads<T: Send>(k: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap().install(f)
}

fn srw_rates() -> ilt_core::ground_state::RateConstants {
    rate_constants(2, 2, (std::f64::consts::PI * 1.86225f64).powf(-0.25), 0.25).unwrap()
}

#[test]
fn mc_mean_matches_exact_expectation() {
    let c = ExperimentConfig { moments: vec![1], ..cfg(8, 20_000, 41) };
    let e = run_mc_moments(&c).unwrap();
    let exact =
        expected_in(&StepLaw::simple(2).unwrap(), 8, 2, Arithmetic::Exact, &Budget::default()).unwrap().to_f64();
    let se = e[0].method.stderr().unwrap();
    assert!((e[0].value.to_f64() - exact).abs() < 3.0 * se, "{} vs {exact} ± {se}", e[0].value.to_f64());
}

#[test]
fn reruns_are_byte_identical() {
    let c = ExperimentConfig { epsilon: Some(0.5), ..cfg(40, 30, 5) };
    let a = csv_bytes(&run_simulation(&c).unwrap());
    let b = csv_bytes(&run_simulation(&c).unwrap());
    assert_eq!(a, b);
    let other = csv_bytes(&run_simulation(&ExperimentConfig { seed: 6, ..c.clone() }).unwrap());
    assert_ne!(a, other);
}

#[test]
fn thread_count_does_not_matter() {
    let c = cfg(200, 64, 9);
    let one = with_threads(1, || csv_bytes(&run_simulation(&c).unwrap()));
    let three = with_threads(3, || csv_bytes(&run_simulation(&c).unwrap()));
    assert_eq!(one, three);
    let m1 = with_threads(1, || run_mc_moments(&c).unwrap());
    let m3 = with_threads(3, || run_mc_moments(&c).unwrap());
    assert_eq!(format!("{m1:?}"), format!("{m3:?}"));
}

#[test]
fn batches_merge_in_any_order() {
    let c = ExperimentConfig { moments: vec![1, 2, 3], ..cfg(50, 90, 17) };
    let whole = mc_moment_batch(&c, 0..90).unwrap();
    let parts = [0..20u64, 20..55, 55..90];
    for order in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
        let mut acc = mc_moment_batch(&c, parts[order[0]].clone()).unwrap();
        for &i in &order[1..] {
            acc.merge(&mc_moment_batch(&c, parts[i].clone()).unwrap()).unwrap();
        }
        assert_eq!(acc, whole);
    }

    let tc = ExperimentConfig { lambdas: vec![0.1, 0.3, 0.9], ..c.clone() };
    let whole = tail_batch(&tc, 0..90).unwrap();
    let mut acc = tail_batch(&tc, 55..90).unwrap();
    acc.merge(&tail_batch(&tc, 0..20).unwrap()).unwrap();
    acc.merge(&tail_batch(&tc, 20..55).unwrap()).unwrap();
    assert_eq!(acc, whole);
    let rates = srw_rates();
    assert_eq!(
        csv_bytes(&tail_curve_from(&tc, 2, rates.moderate_coeff, &acc)),
        csv_bytes(&run_tail_curve(&tc, &rates).unwrap())
    );

    let lc = ExperimentConfig { schedule: Some(Schedule { start: 16, ratio: 1.5, max_n: 500 }), ..cfg(1, 12, 3) };
    let whole = run_lil_trace(&lc, 0.34).unwrap();
    let merged = LilTrace::merge([lil_batch(&lc, 0.34, 7..12).unwrap(), lil_batch(&lc, 0.34, 0..7).unwrap()]);
    assert_eq!(csv_bytes(&merged), csv_bytes(&whole));
}

#[test]
fn tail_curve_shape_and_theory() {
    let c = cfg(2000, 2000, 23);
    let curve = run_tail_curve(&c, &srw_rates()).unwrap();
    assert_eq!(curve.rows.len(), 5);
    assert!(curve.is_nonincreasing());
    for r in &curve.rows {
        assert!(r.hits <= r.trials);
        assert!((r.theory + srw_rates().moderate_coeff * r.lambda).abs() < 1e-12);
        assert!((r.theory + 2.925 * r.lambda).abs() < 1e-3 * r.lambda.max(1.0));
        assert_eq!(r.log_p_hat_over_b_n.is_none(), r.hits == 0);
    }
}

#[test]
fn tail_below_median_is_likely() {
    let n = 1000;
    let c = cfg(n, 1500, 77);
    let sims = run_simulation(&c).unwrap();
    let b = BnRule::LogLog.eval(n);
    let mut scaled: Vec<f64> = sims.rows.iter().map(|r| r.intersection as f64 / (n as f64 * b)).collect();
    scaled.sort_by(f64::total_cmp);
    let median = scaled[scaled.len() / 2];
    assert!(median > 0.0);
    let tc = ExperimentConfig { lambdas: vec![0.9 * median], ..c };
    let curve = run_tail_curve(&tc, &srw_rates()).unwrap();
    assert!(curve.rows[0].p_hat > 0.4, "{:?}", curve.rows[0]);
}

#[test]
fn emitters_round_trip() {
    let c = cfg(300, 200, 4);
    let curve = run_tail_curve(&c, &srw_rates()).unwrap();
    let bytes = csv_bytes(&curve);
    let back = TailCurve::from_csv(bytes.as_slice()).unwrap();
    assert_eq!(csv_bytes(&back), bytes);

    let lc = ExperimentConfig { schedule: Some(Schedule { start: 16, ratio: 1.5, max_n: 2000 }), ..cfg(1, 4, 8) };
    let trace = run_lil_trace(&lc, 0.3419).unwrap();
    let bytes = csv_bytes(&trace);
    assert_eq!(csv_bytes(&LilTrace::from_csv(bytes.as_slice()).unwrap()), bytes);

    for table in [&curve as &dyn Table, &trace, &run_simulation(&c).unwrap()] {
        let mut json = Vec::new();
        write_json(table, &mut json).unwrap();
        let rows: Vec<serde_json::Value> = serde_json::from_slice(&json).unwrap();
        let csv_rows = String::from_utf8(csv_bytes(table)).unwrap().lines().count() - 1;
        assert_eq!(rows.len(), csv_rows);
        for (row, col) in rows.iter().zip(std::iter::repeat(table.columns())) {
            let keys: Vec<&str> = row.as_object().unwrap().keys().map(String::as_str).collect();
            let mut expected = col.clone();
            expected.sort();
            let mut got = keys.clone();
            got.sort();
            assert_eq!(got, expected);
        }
    }
}

#[test]
fn lil_trace_invariants() {
    let lc = ExperimentConfig { schedule: Some(Schedule { start: 16, ratio: 1.5, max_n: 20_000 }), ..cfg(1, 5, 12) };
    let t = run_lil_trace(&lc, 0.3419).unwrap();
    for w in t.rows.windows(2) {
        if w[0].replica == w[1].replica {
            assert!(w[1].running_max >= w[0].running_max);
            assert!(w[1].n_k > w[0].n_k);
        }
    }
    assert!(t.rows.iter().all(|r| r.statistic >= 0.0 && r.reference == 0.3419));
    assert_eq!(t.final_maxima().len(), 5);
}

#[test]
fn budget_is_enforced() {
    let c = ExperimentConfig { max_steps: 1000, ..cfg(100, 100, 1) };
    assert!(matches!(run_mc_moments(&c), Err(ilt_core::lab::LabError::Budget(_))));
}

#[test]
fn law_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lazy.toml");
    std::fs::write(
        &path,
        "name = \"lazy2\"\nd = 2\n[[support]]\npoint = [0, 0]\nprob = \"1/2\"\n[[support]]\npoint = [1, 0]\nprob = \"1/8\"\n[[support]]\npoint = [-1, 0]\nprob = \"1/8\"\n[[support]]\npoint = [0, 1]\nprob = \"1/8\"\n[[support]]\npoint = [0, -1]\nprob = \"1/8\"\n",
    )
    .unwrap();
    let c = ExperimentConfig { law: path.to_string_lossy().into_owned(), ..cfg(10, 5, 1) };
    let e = run_mc_moments(&c).unwrap();
    assert_eq!(e[0].key.law, "lazy2");
    let bad = ExperimentConfig { law: "no-such-law".into(), ..cfg(10, 5, 1) };
    assert!(run_mc_moments(&bad).is_err());
}
