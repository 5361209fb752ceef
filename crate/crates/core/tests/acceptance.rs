//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitl::cli::{cmd_simulate, SimulateArgs};
use vitl::data::make_split;
use vitl::eif::{plugin_value, EifContext, Estimand, EstimandKind, LearnerMode};
use vitl::estimators::{estimate_tmle, EstimatorConfig, EstimatorKind};
use vitl::sim::{generate, run_experiment, true_importance, DgpSpec, ExperimentConfig, ExperimentResult};
use vitl::verify::{
    check_eif, exact_estimand, gateaux_tolerance, random_joint, DiscreteLaws, EifCheckConfig, OracleLearner,
    PolyLearner,
};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id} ({name}): {} | {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

#[test]
fn c1_c2_eif_matches_gateaux_derivative_and_has_mean_zero() {
    let start = Instant::now();
    let rows = check_eif(&EifCheckConfig { trials: 100, mode: LearnerMode::Fixed, max_support: 20, step: 1e-5, ..EifCheckConfig::default() })
        .unwrap();
    let elapsed = start.elapsed();
    let mut ok1 = elapsed < Duration::from_secs(120);
    let mut ok2 = true;
    let mut d1 = String::new();
    let mut d2 = String::new();
    for r in &rows {
        let limit = if r.kind == EstimandKind::MargPermLoss { 1e-3 } else { 1e-4 };
        ok1 &= r.trials == 100 && r.max_rel_err <= limit && r.tol <= limit;
        ok2 &= r.max_mean_abs <= 1e-10;
        d1.push_str(&format!("{}={:.2e} ", r.kind, r.max_rel_err));
        d2.push_str(&format!("{}={:.2e} ", r.kind, r.max_mean_abs));
    }
    ok1 &= rows.len() == 4;
    assert!(gateaux_tolerance(EstimandKind::RefLoss) <= 1e-4);
    println!("criterion 2 (mean-zero EIF): {} | max |mean| {d2}", if ok2 { "PASS" } else { "FAIL" });
    verdict(1, "EIF vs Gateaux derivative", ok1, &format!("max rel err {d1}in {elapsed:.1?}"));
    assert!(ok2, "criterion 2 failed: {d2}");
}

#[test]
fn c3_plugin_equals_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = random_joint(&mut rng, 8).unwrap();
        let f = PolyLearner::random(&mut rng, true);
        let g = PolyLearner::random(&mut rng, false);
        let learner = OracleLearner::Fixed { f: &f, g: Some(&g) };
        let pool = d.as_sample();
        let ctx = EifContext::new(&f).with_reduced(&g).with_pool(&pool);
        for kind in EstimandKind::ALL {
            let exact = exact_estimand(&d, kind, learner).unwrap();
            let plug = plugin_value(&ctx, &DiscreteLaws(&d), kind, &pool).unwrap();
            worst = worst.max((exact - plug).abs());
        }
    }
    verdict(3, "plug-in vs exhaustive oracle", worst <= 1e-12, &format!("max |diff| {worst:.2e} over 200 laws x 4 kinds"));
}

#[test]
fn c4_targeting_converges_on_simulated_data() {
    let spec = DgpSpec { n: 500, rho: 0.5, seed: 44, ..DgpSpec::default() };
    let data = generate(&spec).unwrap();
    let plan = make_split(data.n(), 3, 44).unwrap();
    let report = estimate_tmle(&data, &plan, Estimand::CondPerm, &EstimatorConfig::default(), 44).unwrap();
    let trace = report.trace.as_ref().unwrap();
    let n = plan.fold(1).len() as f64;
    let bound = trace.final_sd_eif / (n.sqrt() * n.ln());
    let monotone = trace.records.windows(2).all(|w| w[1].loglik >= w[0].loglik - 1e-12);
    let pass = report.converged && trace.k_n <= 50 && monotone && trace.final_mean_eif.abs() <= bound;
    verdict(
        4,
        "targeting mechanics",
        pass,
        &format!("k_n {} converged {} loglik nondecreasing {monotone} |mean eif| {:.2e} <= {:.2e}", trace.k_n, report.converged, trace.final_mean_eif.abs(), bound),
    );
}

fn by_rho(result: &ExperimentResult, rho: f64, kind: EstimatorKind) -> (f64, f64, usize) {
    let a = result.aggregates.iter().find(|a| a.rho == rho && a.estimator == kind).unwrap();
    (a.coverage, a.mean_bias, a.used)
}

#[test]
fn c5_desk_scale_coverage_and_bias_ordering() {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.rhos, vec![0.1, 0.5, 0.9]);
    assert_eq!((cfg.n, cfg.reps), (500, 40));
    let start = Instant::now();
    let result = run_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    let (mut a, mut b, mut c) = (true, 0, 0);
    let mut detail = String::new();
    for &rho in &cfg.rhos {
        let truth = true_importance(&DgpSpec { rho, ..cfg.dgp.clone() }, Estimand::CondPerm).unwrap();
        assert!((truth - 50.0 * (1.0 - rho * rho)).abs() < 1e-12);
        let (cov_t, bias_t, used_t) = by_rho(&result, rho, EstimatorKind::Tmle);
        let (cov_o, bias_o, _) = by_rho(&result, rho, EstimatorKind::OneStep);
        a &= cov_t >= 0.85 && used_t > 0;
        b += (cov_t >= cov_o - 0.02) as usize;
        c += (bias_t.abs() <= bias_o.abs()) as usize;
        detail.push_str(&format!(
            "rho {rho}: cov tmle {cov_t:.3} onestep {cov_o:.3}, |bias| tmle {:.3} onestep {:.3}, used {used_t}; ",
            bias_t.abs(),
            bias_o.abs()
        ));
    }
    let fast = elapsed < Duration::from_secs(15 * 60);
    detail.push_str(&format!("(a) {a} (b) {b}/3 (c) {c}/3 in {elapsed:.1?}"));
    verdict(5, "desk-scale coverage and bias ordering", a && b >= 2 && c >= 2 && fast, &detail);
}

#[test]
fn c6_null_importance_is_covered() {
    let cfg = ExperimentConfig {
        rhos: vec![0.5],
        estimators: vec![EstimatorKind::Tmle],
        dgp: DgpSpec { beta: 0.0, ..DgpSpec::default() },
        seed: 606,
        ..ExperimentConfig::default()
    };
    assert_eq!(true_importance(&DgpSpec { rho: 0.5, ..cfg.dgp.clone() }, Estimand::CondPerm).unwrap(), 0.0);
    let result = run_experiment(&cfg).unwrap();
    let usable: Vec<_> = result.rows.iter().filter(|r| r.usable()).collect();
    let covered = usable.iter().filter(|r| r.ci_lo <= 0.0 && 0.0 <= r.ci_hi).count();
    let rate = covered as f64 / usable.len().max(1) as f64;
    verdict(
        6,
        "null importance coverage",
        !usable.is_empty() && rate >= 0.9,
        &format!("{covered}/{} converged reps contain 0 ({rate:.3}); {} reps total", usable.len(), result.rows.len()),
    );
}

#[test]
fn c7_closed_form_identities() {
    let mut worst = 0.0f64;
    for rho in [0.1, 0.5, 0.9] {
        let spec = DgpSpec { rho, ..DgpSpec::default() };
        let cp = true_importance(&spec, Estimand::CondPerm).unwrap();
        let loco = true_importance(&spec, Estimand::Loco).unwrap();
        let mp = true_importance(&spec, Estimand::MargPerm).unwrap();
        worst = worst.max((cp - 2.0 * loco).abs()).max((mp - 50.0).abs());
    }
    verdict(7, "analytic identities", worst <= 1e-12, &format!("max deviation {worst:.2e}"));
}

fn simulate_files(threads: usize, dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    use clap::Parser;
    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        args: SimulateArgs,
    }
    let out = dir.join(format!("t{threads}"));
    let t = threads.to_string();
    let w = Wrap::parse_from([
        "simulate", "--rho", "0.3,0.7", "--reps", "4", "--n", "150", "--estimators", "onestep,tmle", "--m", "32",
        "--target-m", "8", "--threads", &t, "--out-dir", out.to_str().unwrap(),
    ]);
    cmd_simulate(&w.args, &mut Vec::new()).unwrap();
    (std::fs::read(out.join("rows.csv")).unwrap(), std::fs::read(out.join("aggregates.csv")).unwrap())
}

#[test]
fn c8_simulation_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate_files(1, &dir.path().join("a"));
    let b = simulate_files(1, &dir.path().join("b"));
    let c = simulate_files(3, &dir.path().join("c"));
    let pass = a == b && a == c;
    verdict(8, "deterministic simulation output", pass, &format!("rows.csv {} bytes, threads 1/1/3", a.0.len()));
}
