//! Acceptance gate: one test per release criterion, each printing a single
//! pass/fail line with the measured quantities. The benchmark trace is shared
//! where several criteria analyze the same run; the simulation cost itself is
//! charged to the first criterion's budget.

use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsm_cbf::flow::sv_asymptote;
use dsm_cbf::{
    audit_cbf_inequality, build_terminal, eval_terminal, integrate_flow, integrate_raw,
    make_pendulum_model, nominal_targets, benchmark_scenario, pendulum_constraints,
    run_invariance_suite, run_planar_asymptotes, run_pendulum_sensitivity, run_qp_suite,
    sample_in_terminal_set, simulate, CaseResult, IntegratorConfig, PendulumParams, QpStatus,
    SafetyFilter, SimTrace,
};

fn report(name: &str, pass: bool, detail: String) {
    eprintln!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn benchmark_trace() -> &'static SimTrace {
    static TRACE: OnceLock<SimTrace> = OnceLock::new();
    TRACE.get_or_init(|| simulate(&benchmark_scenario()).expect("benchmark scenario runs"))
}

fn failed_cases(cases: &[CaseResult]) -> Vec<String> {
    cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect()
}

/// Hard limits of the benchmark along the full run, plus endpoint accuracy.
#[test]
fn criterion_1_benchmark_limits() {
    let started = Instant::now();
    let trace = simulate(&benchmark_scenario()).expect("benchmark scenario runs");
    let elapsed = started.elapsed().as_secs_f64();

    let max_x = trace.rows.iter().map(|r| r.x[0].abs()).fold(0.0, f64::max);
    let max_th = trace.rows.iter().map(|r| (r.x[1] - PI).abs()).fold(0.0, f64::max);
    let max_u = trace.rows.iter().map(|r| r.u.amax()).fold(0.0, f64::max);
    let last = trace.final_state();
    let x_err = (last.x[0] - 4.0).abs();
    let v_err = (last.v[0] - 4.0).abs();

    let pass = max_x <= 4.5 + 1e-4
        && max_th <= PI / 9.0 + 1e-4
        && max_u <= 20.0 + 1e-9
        && x_err <= 0.1
        && v_err <= 0.01
        && elapsed <= 60.0;
    report(
        "criterion 1",
        pass,
        format!(
            "max|x| = {max_x:.6} (<= 4.5001), max|th - pi| = {max_th:.6} (<= {:.6}), \
             max|u| = {max_u:.6} (<= 20), |x(15) - 4| = {x_err:.4}, |v(15) - 4| = {v_err:.6}, \
             {elapsed:.1}s",
            PI / 9.0 + 1e-4
        ),
    );
}

/// Per-tick QP feasibility along the benchmark, and explicit feasibility of
/// the backup pair (pi(x, v), 0) in the assembled rows at sampled ticks.
#[test]
fn criterion_2_per_tick_feasibility() {
    let trace = benchmark_trace();
    let started = Instant::now();

    let fallbacks = trace.fallback_count;
    let non_optimal =
        trace.rows.iter().filter(|r| r.qp_status != QpStatus::Optimal).count();
    let first_bad = trace
        .rows
        .iter()
        .find(|r| r.used_fallback || r.qp_status != QpStatus::Optimal)
        .map(|r| r.t);

    let scenario = benchmark_scenario();
    let params = PendulumParams::default();
    let model = make_pendulum_model(&params).expect("default params");
    let cmap = pendulum_constraints(&params);
    let mut filter =
        SafetyFilter::new(model.clone(), cmap, scenario.filter.clone(), &scenario.v0)
            .expect("filter builds");

    let n_rows = trace.rows.len();
    let mut worst_slack = f64::INFINITY;
    let mut worst_at = (0.0, 0usize);
    for j in 0..50 {
        let k = j * (n_rows - 1) / 49;
        let row = &trace.rows[k];
        let (tu, tw) = nominal_targets(&model, &scenario, &row.x, &row.v);
        let (problem, _, _) =
            filter.assemble_qp(&row.x, &row.v, &tu, &tw).expect("rows assemble");
        let u_pi = model.pi(&row.x, &row.v);
        let w0 = DVector::zeros(row.v.len());
        for (i, qp_row) in problem.rows.iter().enumerate() {
            let slack = qp_row.slack(&u_pi, &w0);
            if slack < worst_slack {
                worst_slack = slack;
                worst_at = (row.t, i);
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();

    let pass =
        fallbacks == 0 && non_optimal == 0 && worst_slack >= -1e-9 && elapsed <= 30.0;
    report(
        "criterion 2",
        pass,
        format!(
            "fallbacks = {fallbacks}, non-optimal ticks = {non_optimal} (first at t = {:?}), \
             worst backup slack = {worst_slack:.3e} (row {} at t = {:.3}), {elapsed:.1}s",
            first_bad, worst_at.1, worst_at.0
        ),
    );
}

/// Sensitivities against central finite differences of the flow, and the
/// commutation identity residual, on the benchmark model.
#[test]
fn criterion_3_sensitivity_accuracy() {
    let started = Instant::now();
    let cases = run_pendulum_sensitivity();
    let elapsed = started.elapsed().as_secs_f64();

    let failures = failed_cases(&cases);
    let pass = failures.is_empty() && elapsed <= 10.0;
    report(
        "criterion 3",
        pass,
        format!("{}/{} checks ok ({:?}), {elapsed:.1}s",
            cases.len() - failures.len(), cases.len(), failures),
    );
}

/// Long-horizon sensitivity limits at tau = 40 on randomized planar linear
/// models and on the benchmark model.
#[test]
fn criterion_4_sensitivity_asymptotes() {
    let started = Instant::now();
    let planar = run_planar_asymptotes(0, 5);
    let planar_failures = failed_cases(&planar);

    let params = PendulumParams::default();
    let model = make_pendulum_model(&params).expect("default params");
    let v = DVector::from_element(1, 0.0);
    let mut x = model.x_bar(&v);
    x[1] += 0.05;
    let bundle = integrate_flow(&model, &x, &v, 40.0, &IntegratorConfig::default())
        .expect("flow integrates");
    let sx_norm = bundle.sx.last().unwrap().norm();
    let sv_err = (bundle.sv.last().unwrap() - sv_asymptote(&model, &v).unwrap()).norm();
    let elapsed = started.elapsed().as_secs_f64();

    let pass =
        planar_failures.is_empty() && sx_norm <= 1e-6 && sv_err <= 1e-4 && elapsed <= 5.0;
    report(
        "criterion 4",
        pass,
        format!(
            "planar {}/{} ok ({planar_failures:?}), pendulum |S_x(40)|_F = {sx_norm:.3e} \
             (<= 1e-6), |S_v(40) - lim|_F = {sv_err:.3e} (<= 1e-4), {elapsed:.1}s",
            planar.len() - planar_failures.len(),
            planar.len()
        ),
    );
}

/// Solver agreement with the brute-force active-set enumeration oracle.
#[test]
fn criterion_5_qp_oracle() {
    let started = Instant::now();
    let suite = run_qp_suite(0, 1000);
    let elapsed = started.elapsed().as_secs_f64();

    let pass = suite.passed == suite.total && suite.total == 1000 && elapsed <= 10.0;
    report(
        "criterion 5",
        pass,
        format!(
            "{}/{} oracle matches ({} failures), {elapsed:.1}s",
            suite.passed,
            suite.total,
            suite.failures.len()
        ),
    );
}

/// Closed-loop forward invariance from randomized admissible starts.
#[test]
fn criterion_6_forward_invariance() {
    let started = Instant::now();
    let suite = run_invariance_suite(0, 100, 10.0);
    let elapsed = started.elapsed().as_secs_f64();

    let pass = suite.passed == suite.total && suite.total == 100 && elapsed <= 600.0;
    let sample: Vec<&str> =
        suite.failures.iter().take(3).map(|c| c.detail.as_str()).collect();
    report(
        "criterion 6",
        pass,
        format!("{}/{} runs safe {sample:?}, {elapsed:.1}s", suite.passed, suite.total),
    );
}

/// Terminal-set validity: backup rollouts from inside the terminal set stay
/// inside it and inside the constraints for three horizons.
#[test]
fn criterion_7_terminal_set() {
    let started = Instant::now();
    let params = PendulumParams::default();
    let model = make_pendulum_model(&params).expect("default params");
    let cmap = pendulum_constraints(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut worst_c = f64::INFINITY;
    let mut worst_dt = f64::INFINITY;
    let mut inclusion_ok = true;
    for _ in 0..50 {
        let v = DVector::from_element(1, rng.gen_range(-4.0..4.0));
        let dsm = build_terminal(&model, &cmap, &v).expect("terminal DSM builds");
        let x0 = sample_in_terminal_set(&dsm, &v, &mut rng);
        let (values, _, _) = eval_terminal(&dsm, &x0, &v);
        assert!(values.min() >= 0.0, "drawn point is inside the terminal set");
        inclusion_ok &= cmap.c(&x0, &v).min() >= 0.0;

        let sol = integrate_raw(
            |_t, y, dy| {
                let xs = DVector::from_column_slice(y);
                let dx = model.f_pi(&xs, &v);
                dy.copy_from_slice(dx.as_slice());
            },
            x0.as_slice(),
            30.0,
            &IntegratorConfig::default(),
            &[],
        )
        .expect("backup rollout integrates");
        for y in &sol.y {
            let xs = DVector::from_column_slice(y);
            worst_c = worst_c.min(cmap.c(&xs, &v).min());
            let (vals, _, _) = eval_terminal(&dsm, &xs, &v);
            worst_dt = worst_dt.min(vals.min());
        }
    }
    let elapsed = started.elapsed().as_secs_f64();

    let pass = worst_dt >= -1e-6 && worst_c >= -1e-6 && inclusion_ok && elapsed <= 120.0;
    report(
        "criterion 7",
        pass,
        format!(
            "50 rollouts over 3T: min terminal margin = {worst_dt:.3e}, min c_i = \
             {worst_c:.3e}, inclusion {}, {elapsed:.1}s",
            if inclusion_ok { "holds" } else { "violated" }
        ),
    );
}

/// Finite-difference audit of the enforced decay inequality along the
/// executed benchmark trace at matching prediction times.
#[test]
fn criterion_8_decay_audit() {
    let trace = benchmark_trace();
    let scenario = benchmark_scenario();
    let params = PendulumParams::default();
    let model = make_pendulum_model(&params).expect("default params");
    let cmap = pendulum_constraints(&params);

    let started = Instant::now();
    let worst = audit_cbf_inequality(&model, &cmap, trace, &scenario.filter, scenario.control_dt)
        .expect("audit runs");
    let elapsed = started.elapsed().as_secs_f64();

    let pass = worst >= -1e-3 && elapsed <= 60.0;
    report(
        "criterion 8",
        pass,
        format!("worst FD residual = {worst:.3e} (>= -1e-3), {elapsed:.1}s"),
    );
}
