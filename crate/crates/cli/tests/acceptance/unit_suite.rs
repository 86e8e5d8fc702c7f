use pgae_cli::config::RunConfig;
use pgae_core::design::{bound_for, optimal_design_with, CapRule};
use pgae_core::estimator::{adaptive_estimate, influence_parts, influence_value};
use pgae_core::harness::{clamp_components, replicate, run_replication};
use pgae_core::nuisance::fit_nuisance;
use pgae_core::{
    CovariateSpace, DesignRule, EstimatorOptions, ExperimentRecord, NuisanceConfig, PolicyName, PolicySpec,
    RegressorKind, SyntheticDgp, Trace, VarianceComponents, World,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use super::{strata, Outcome};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Estimated form against the `δ(y − μ) + (δ − π)(μ − τ)` form.
fn influence_identity() -> Result<String, String> {
    let strategy = (
        any::<bool>(),
        -1e3..1e3f64,
        -1e3..1e3f64,
        -1e3..1e3f64,
        0.01..=1.0f64,
        0.001..1.0f64,
        0.001..1.0f64,
    );
    runner(20_000)
        .run(&strategy, |(delta, y, mu, tau, pi, p, q)| {
            let rec = ExperimentRecord {
                t: 1,
                point: 0,
                x: 0.0,
                f: 0.0,
                delta,
                y: delta.then_some(y),
                p,
                pi,
                q,
            };
            let d = if delta { 1.0 } else { 0.0 };
            let yv = if delta { y } else { 0.0 };
            let centered = q / (pi * p) * (d * (yv - mu) + (d - pi) * (mu - tau));
            let got = influence_value(&rec, mu, tau);
            let (a, b) = influence_parts(&rec, mu, tau);
            let scale = q / (pi * p) * (yv.abs() + mu.abs() + tau.abs());
            prop_assert!((got - centered).abs() <= 1e-12 * (1.0 + scale), "{got} vs {centered}");
            prop_assert!(got == a - b);
            Ok(())
        })
        .map_err(|e| format!("influence identity: {e}"))?;
    Ok("influence identity 20000 cases".into())
}

fn space_and_components() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (1usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(0.01..1.0f64, n),
            prop::collection::vec(prop_oneof![Just(1e-8), 1e-4..1e3f64], n),
            prop::collection::vec(prop_oneof![Just(1e-8), 1e-4..1e3f64], n),
            prop_oneof![Just(1.0), 0.01..1.0f64],
        )
    })
}

fn design_invariants() -> Result<String, String> {
    runner(3000)
        .run(&space_and_components(), |(w, alpha, beta, gamma)| {
            let total: f64 = w.iter().sum();
            let q: Vec<f64> = w.iter().map(|v| v / total).collect();
            let space = strata(&q);
            let vc = VarianceComponents::new(alpha, beta).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let naive = DesignRule::new(q.clone(), vec![gamma; q.len()], gamma)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let naive_bound = bound_for(&space, naive.p(), naive.pi(), &vc).unwrap();
            let mut reopt_bound = f64::NAN;
            for rule in [CapRule::Reoptimize, CapRule::RespendFixedSampling, CapRule::CapOnly] {
                let opt = optimal_design_with(&space, &vc, gamma, rule)
                    .map_err(|e| TestCaseError::fail(format!("{rule:?}: {e}")))?;
                let d = &opt.design;
                let sum: f64 = d.p().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9, "{rule:?}: Σp = {sum}");
                prop_assert!(d.p().iter().all(|&v| v > 0.0 && v.is_finite()), "{rule:?}: p {:?}", d.p());
                prop_assert!(d.pi().iter().all(|&v| v > 0.0 && v <= 1.0), "{rule:?}: π {:?}", d.pi());
                prop_assert!(d.budget_usage() <= gamma + 1e-9, "{rule:?}: budget {}", d.budget_usage());
                // Rebuilding through the validating constructor must succeed.
                DesignRule::new(d.p().to_vec(), d.pi().to_vec(), gamma)
                    .map_err(|e| TestCaseError::fail(format!("{rule:?}: {e}")))?;
                let b = bound_for(&space, d.p(), d.pi(), &vc).unwrap();
                prop_assert!(b.is_finite() && b > 0.0);
                for &i in &opt.capped {
                    prop_assert!(d.pi()[i] == 1.0, "{rule:?}: capped point {i} has π {}", d.pi()[i]);
                }
                if rule == CapRule::Reoptimize {
                    reopt_bound = b;
                    prop_assert!(b <= naive_bound * (1.0 + 1e-9), "optimal {b} > uniform {naive_bound}");
                } else {
                    prop_assert!(reopt_bound <= b * (1.0 + 1e-9), "{rule:?} beats the joint optimum");
                }
            }
            // Scaling both components leaves the design unchanged.
            let a = optimal_design_with(&space, &vc, gamma, CapRule::Reoptimize).unwrap();
            let s = optimal_design_with(&space, &vc.scaled(7.0), gamma, CapRule::Reoptimize).unwrap();
            for (x, y) in a.design.p().iter().zip(s.design.p()) {
                prop_assert!(close(*x, *y, 1e-7));
            }
            Ok(())
        })
        .map_err(|e| format!("design invariants: {e}"))?;

    // Invalid rules are rejected.
    let bad: [(Vec<f64>, Vec<f64>, f64); 5] = [
        (vec![0.5, 0.6], vec![0.5, 0.5], 0.5),
        (vec![0.5, 0.5], vec![0.0, 0.5], 0.5),
        (vec![0.5, 0.5], vec![1.1, 0.5], 1.0),
        (vec![0.5, 0.5], vec![1.0, 1.0], 0.5),
        (vec![1.0, 0.0], vec![0.5, 0.5], 0.5),
    ];
    for (p, pi, g) in bad {
        if DesignRule::new(p.clone(), pi.clone(), g).is_ok() {
            return Err(format!("DesignRule::new accepted p {p:?}, π {pi:?}, γ {g}"));
        }
    }
    Ok("design invariants 3000 cases".into())
}

fn truncation() -> Result<String, String> {
    let strategy = (
        2usize..6,
        prop::collection::vec((0usize..64, -1e4..1e4f64, prop_oneof![Just(0.0), -1e5..1e5f64], any::<bool>()), 60..240),
        prop_oneof![Just(RegressorKind::BinnedMean), Just(RegressorKind::Knn), Just(RegressorKind::LeastSquares)],
        1e-6..1.0f64,
        1.0..1e6f64,
        any::<bool>(),
    );
    runner(300)
        .run(&strategy, |(n, draws, kind, var_min, var_max, on_grid)| {
            let space = if on_grid {
                CovariateSpace::grid(-1.0, 1.0, n).unwrap()
            } else {
                strata(&vec![1.0 / n as f64; n])
            };
            let xs = space.points();
            let records: Vec<ExperimentRecord> = draws
                .iter()
                .enumerate()
                .map(|(t, &(pt, f, y, delta))| ExperimentRecord {
                    t: t as u64 + 1,
                    point: pt % n,
                    x: xs[pt % n],
                    f,
                    // Every other draw is labeled so fits always have data.
                    delta: delta || t % 2 == 0,
                    y: (delta || t % 2 == 0).then_some(y),
                    p: 1.0 / n as f64,
                    pi: 0.5,
                    q: 1.0 / n as f64,
                })
                .collect();
            let cfg = NuisanceConfig {
                kind,
                var_min,
                var_max,
                min_labeled: 10,
                ..NuisanceConfig::default()
            };
            let fit = fit_nuisance(&space, &records, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for v in fit.alpha_hat.iter().chain(&fit.beta_hat) {
                prop_assert!(v.is_finite() && *v >= var_min && *v <= var_max, "{v} outside [{var_min}, {var_max}]");
            }
            prop_assert!(fit.mu1.iter().all(|v| v.is_finite()));
            prop_assert!(fit.mu2.iter().all(|v| v.is_finite() && *v >= 0.0));
            for r in &records {
                prop_assert!(fit.tau_at(r.point, r.x, r.f).is_finite());
            }
            let raw = VarianceComponents::new(vec![0.0, 1e30, 0.5], vec![f64::MIN_POSITIVE, 3.0, 1e-30])
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let c = clamp_components(&raw, &cfg);
            for v in c.alpha.iter().chain(&c.beta) {
                prop_assert!(*v >= var_min && *v <= var_max);
            }
            Ok(())
        })
        .map_err(|e| format!("truncation: {e}"))?;
    Ok("truncation 300 fits".into())
}

fn pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn determinism() -> Result<String, String> {
    let space = CovariateSpace::grid(-1.0, 1.0, 10).unwrap();
    let world = World::synthetic(SyntheticDgp::default(), space).unwrap().with_oracle(2000, 4);
    let specs: Vec<PolicySpec> = [PolicyName::Pgae, PolicyName::PgaeOracle, PolicyName::Naive, PolicyName::PpiAdaptive]
        .iter()
        .map(|&p| PolicySpec::new(p, 0.4, 300).with_batch(100).with_regressor(RegressorKind::LeastSquares))
        .collect();
    let opts = EstimatorOptions::default();
    let one = pool(1, || replicate(&specs, &world, 12, 21, &opts)).map_err(|e| e.to_string())?;
    for threads in [2, 4, 7] {
        let many = pool(threads, || replicate(&specs, &world, 12, 21, &opts)).map_err(|e| e.to_string())?;
        if many != one {
            return Err(format!("replicate differs between 1 and {threads} threads"));
        }
    }
    let bits = |t: &pgae_core::MetricsTable| t.rows.iter().map(|r| r.mse.to_bits()).collect::<Vec<_>>();
    if bits(&one.0) != bits(&pool(3, || replicate(&specs, &world, 12, 21, &opts)).unwrap().0) {
        return Err("metrics not bit-identical".into());
    }
    Ok("determinism across 1/2/4/7 threads".into())
}

fn round_trips() -> Result<String, String> {
    // Trace CSV and the in-run estimate.
    let space = CovariateSpace::grid(-1.0, 1.0, 20).unwrap();
    let world = World::synthetic(SyntheticDgp::default(), space.clone()).unwrap().with_oracle(2000, 9);
    let opts = EstimatorOptions::default();
    let spec = PolicySpec::new(PolicyName::Pgae, 0.4, 500).with_batch(200).with_regressor(RegressorKind::LeastSquares);
    let mut traces = 0;
    for r in 0..5 {
        let (trace, report) = run_replication(&spec, &world, 31, r, &opts).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).map_err(|e| e.to_string())?;
        let back = Trace::read_csv(buf.as_slice(), &space).map_err(|e| e.to_string())?;
        if back != trace {
            return Err(format!("trace {r} changed through CSV"));
        }
        let again = adaptive_estimate(&back, &space, &spec.options(&opts)).map_err(|e| e.to_string())?;
        if again.theta_hat.to_bits() != report.theta_hat.to_bits() || again != report {
            return Err(format!("re-estimate of trace {r} differs: {} vs {}", again.theta_hat, report.theta_hat));
        }
        let json = serde_json::to_string(&again).unwrap();
        if serde_json::from_str::<pgae_core::EstimateReport>(&json).unwrap() != again {
            return Err("estimate report changed through JSON".into());
        }
        traces += 1;
    }

    // Config JSON.
    let strategy = (
        any::<u64>(),
        1usize..1000,
        0.01..=1.0f64,
        1usize..10_000,
        2usize..200,
        0.5..0.999f64,
        any::<bool>(),
    );
    runner(500)
        .run(&strategy, |(seed, n_reps, gamma, target, m, level, dump)| {
            let text = format!(
                r#"{{ "world": {{ "synthetic": {{ "noise_scale": 1.5 }} }},
                     "space": {{ "grid": {{ "lo": -1.0, "hi": 0.5, "m": {m} }} }},
                     "policies": [ {{ "name": "pgae", "gamma": {gamma}, "treated_target": {target} }},
                                   {{ "name": "ppi", "gamma": {gamma}, "treated_target": {target} }} ],
                     "n_reps": {n_reps}, "seed": {seed}, "dump_replications": {dump},
                     "estimator": {{ "level": {level}, "nuisance": {{ "kind": "knn" }} }},
                     "design": {{ "gamma": {gamma} }} }}"#
            );
            let cfg = RunConfig::from_json(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(cfg.seed, seed);
            prop_assert_eq!(cfg.policies[0].gamma, gamma);
            let back = RunConfig::from_json(&cfg.to_json()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, cfg);
            Ok(())
        })
        .map_err(|e| format!("config round trip: {e}"))?;

    // Binary: design on constant components, then simulate and re-estimate.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{ "world": { "synthetic": {} },
             "space": { "grid": { "lo": -1.0, "hi": 1.0, "m": 8 } },
             "components": { "constant": { "alpha": 1.0, "beta": 4.0 } },
             "design": { "gamma": 0.3 },
             "policies": [ { "name": "pgae", "gamma": 0.3, "treated_target": 300, "batch_size": 100 } ],
             "n_reps": 3, "seed": 2, "oracle_draws": 1000, "trace_reps": 1 }"#,
    )
    .map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let pgae = env!("CARGO_BIN_EXE_pgae");
    for sub in ["design", "simulate"] {
        let status = std::process::Command::new(pgae)
            .args([sub, "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .env_remove("PGAE_SEED")
            .env_remove("PGAE_OUTPUT_DIR")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("pgae {sub} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
    }
    let design = std::fs::read_to_string(out.join("design.csv")).map_err(|e| e.to_string())?;
    for line in design.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        if !close(v[2], v[1], 1e-12) || !close(v[3], 0.3, 1e-12) {
            return Err(format!("constant-component design row {line}"));
        }
    }
    let trace = out.join("traces/pgae_g0.3_r0.csv");
    let est = std::process::Command::new(pgae)
        .args(["estimate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("est"))
        .arg("--trace")
        .arg(&trace)
        .arg("--options")
        .arg(out.join("traces/pgae_g0.3_r0.options.json"))
        .env_remove("PGAE_SEED")
        .env_remove("PGAE_OUTPUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    let saved = std::fs::read(out.join("traces/pgae_g0.3_r0.report.json")).map_err(|e| e.to_string())?;
    if !est.status.success() || est.stdout != saved {
        return Err("pgae estimate did not reproduce the saved report".into());
    }
    Ok(format!("{traces} trace round trips, 500 configs, CLI design/simulate/estimate"))
}

pub fn run() -> Outcome {
    let checks: [fn() -> Result<String, String>; 5] =
        [influence_identity, design_invariants, truncation, determinism, round_trips];
    let mut notes = Vec::new();
    for check in checks {
        match check() {
            Ok(note) => notes.push(note),
            Err(e) => return Outcome::new(false, e),
        }
    }
    Outcome::new(true, notes.join("; "))
}
