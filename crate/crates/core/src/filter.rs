//! The online safety filter and the sampled-data closed loop: integrate the
//! prestabilized flow, assemble path and terminal rows, solve the QP, fall
//! back to (pi(x,v), 0) on solver failure, and record plot-ready traces.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dsm::{eval_dsm, path_rows};
use crate::error::{Error, Result};
use crate::flow::{integrate_flow, integrate_raw, IntegratorConfig, RawSolution};
use crate::model::{AlphaFn, ConstraintMap, SystemModel};
use crate::pendulum;
use crate::qp::{self, QpProblem, QpStatus};
use crate::terminal::{
    build_terminal, eval_terminal, terminal_rows, QuadraticTerminalDsm, TerminalMode,
};

use crate::model::dvec_serde;

/// What to do when the QP reports failure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FallbackMode {
    /// Apply the provably feasible pair (pi(x,v), 0) and keep going.
    #[default]
    On,
    /// Propagate a hard error carrying the dumped QP.
    Error,
}

/// Terminal-DSM knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminalConfig {
    pub enabled: bool,
    /// Overrides `alpha_terminal`'s gain when set.
    pub alpha_gain: Option<f64>,
    /// Rebuild the terminal DSM at the current v every step instead of
    /// reusing the one built at the scenario's v0.
    pub rebuild_per_v: bool,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        TerminalConfig { enabled: true, alpha_gain: None, rebuild_per_v: false }
    }
}

fn default_alpha_terminal() -> AlphaFn {
    AlphaFn::linear(400.0)
}

/// Safety-filter configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Prediction horizon, seconds.
    #[serde(rename = "T")]
    pub t_horizon: f64,
    pub alpha_path: AlphaFn,
    #[serde(default = "default_alpha_terminal")]
    pub alpha_terminal: AlphaFn,
    pub eta: f64,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub fallback: FallbackMode,
    #[serde(default)]
    pub terminal: TerminalConfig,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_horizon > 0.0) || !self.t_horizon.is_finite() {
            return Err(Error::InvalidConfig("prediction horizon T must be positive".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig("eta must be positive".into()));
        }
        self.integrator.validate()?;
        Ok(())
    }

    pub fn effective_alpha_terminal(&self) -> AlphaFn {
        match self.terminal.alpha_gain {
            Some(gain) => AlphaFn::linear(gain),
            None => self.alpha_terminal.clone(),
        }
    }
}

/// One filter evaluation.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    /// Minimum path margin over constraints and grid points.
    pub delta1: f64,
    /// Minimum terminal component at the horizon endpoint; NaN when the
    /// terminal DSM is omitted.
    pub delta_t: f64,
    pub qp_status: QpStatus,
    pub used_fallback: bool,
    /// Wall-clock seconds spent in this evaluation.
    pub timing: f64,
}

/// Holds the model, constraints, and terminal DSM for repeated filter steps.
pub struct SafetyFilter {
    model: SystemModel,
    cmap: ConstraintMap,
    cfg: FilterConfig,
    terminal: QuadraticTerminalDsm,
    fallback_count: usize,
    force_qp_failure: bool,
}

impl SafetyFilter {
    pub fn new(
        model: SystemModel,
        cmap: ConstraintMap,
        cfg: FilterConfig,
        v0: &DVector<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        let terminal = if cfg.terminal.enabled {
            build_terminal(&model, &cmap, v0)?
        } else {
            QuadraticTerminalDsm::omitted()
        };
        Ok(SafetyFilter { model, cmap, cfg, terminal, fallback_count: 0, force_qp_failure: false })
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback_count
    }

    pub fn terminal(&self) -> &QuadraticTerminalDsm {
        &self.terminal
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    /// Test hook: pretend the QP solver failed on every subsequent step.
    pub fn set_force_qp_failure(&mut self, yes: bool) {
        self.force_qp_failure = yes;
    }

    /// Path and terminal margins at (x, v); the terminal margin is NaN when
    /// the terminal DSM is omitted. Used for the startup admissibility check.
    pub fn margins(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<(f64, f64)> {
        let bundle = integrate_flow(&self.model, x, v, self.cfg.t_horizon, &self.cfg.integrator)?;
        let delta1 = eval_dsm(&bundle, &self.cmap, v).min_margin();
        let delta_t = if matches!(self.terminal.mode, TerminalMode::Enabled) {
            let phi_t = bundle.phi.last().expect("bundle has at least one grid point");
            let (values, _, _) = eval_terminal(&self.terminal, phi_t, v);
            values.min()
        } else {
            f64::NAN
        };
        Ok((delta1, delta_t))
    }

    /// Assemble the filter QP at (x, v) without solving it. Returns the
    /// problem together with the path and terminal margins.
    pub fn assemble_qp(
        &mut self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        target_u: &DVector<f64>,
        target_w: &DVector<f64>,
    ) -> Result<(QpProblem, f64, f64)> {
        let dims = self.model.dims;
        assert_eq!(target_u.len(), dims.m, "target_u dimension");
        assert_eq!(target_w.len(), dims.l, "target_w dimension");

        if self.cfg.terminal.rebuild_per_v && matches!(self.terminal.mode, TerminalMode::Enabled) {
            self.terminal = build_terminal(&self.model, &self.cmap, v)?;
        }

        let bundle = integrate_flow(&self.model, x, v, self.cfg.t_horizon, &self.cfg.integrator)?;
        let evaluation = eval_dsm(&bundle, &self.cmap, v);
        let delta1 = evaluation.min_margin();
        let mut rows =
            path_rows(&bundle, &self.model, &self.cmap, x, v, &self.cfg.alpha_path, None);

        let delta_t = if matches!(self.terminal.mode, TerminalMode::Enabled) {
            let phi_t = bundle.phi.last().expect("bundle has at least one grid point");
            let (values, _, _) = eval_terminal(&self.terminal, phi_t, v);
            let alpha_t = self.cfg.effective_alpha_terminal();
            rows.extend(terminal_rows(&self.terminal, &bundle, &self.model, x, v, &alpha_t));
            values.min()
        } else {
            f64::NAN
        };

        let mut problem =
            QpProblem::new(target_u.clone(), target_w.clone(), self.cfg.eta).with_rows(rows);
        if let Some((lo, hi)) = self.model.input_box() {
            problem = problem.with_box(lo.clone(), hi.clone());
        }
        Ok((problem, delta1, delta_t))
    }

    /// One filter evaluation: predict, assemble rows, solve, maybe fall back.
    pub fn step(
        &mut self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        target_u: &DVector<f64>,
        target_w: &DVector<f64>,
    ) -> Result<FilterOutput> {
        let start = Instant::now();
        let dims = self.model.dims;
        let (problem, delta1, delta_t) = self.assemble_qp(x, v, target_u, target_w)?;

        let solution = if self.force_qp_failure { None } else { Some(qp::solve(&problem)) };
        match solution {
            Some(sol) if sol.status == QpStatus::Optimal => Ok(FilterOutput {
                u: sol.u,
                w: sol.w,
                delta1,
                delta_t,
                qp_status: QpStatus::Optimal,
                used_fallback: false,
                timing: start.elapsed().as_secs_f64(),
            }),
            other => {
                let status = other.map(|sol| sol.status).unwrap_or(QpStatus::MaxIter);
                match self.cfg.fallback {
                    FallbackMode::On => {
                        self.fallback_count += 1;
                        Ok(FilterOutput {
                            u: self.model.pi(x, v),
                            w: DVector::zeros(dims.l),
                            delta1,
                            delta_t,
                            qp_status: status,
                            used_fallback: true,
                            timing: start.elapsed().as_secs_f64(),
                        })
                    }
                    FallbackMode::Error => Err(Error::QpFailure {
                        status: match status {
                            QpStatus::Infeasible => "infeasible",
                            _ => "max_iter",
                        },
                        problem_json: serde_json::to_string(&problem).unwrap_or_default(),
                    }),
                }
            }
        }
    }
}

fn default_rho_gain() -> f64 {
    1.0
}

/// A closed-loop run: model, initial condition, nominal controller gains,
/// setpoint, timing, and the filter configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub model: String,
    /// Model parameter overrides, passed to the model registry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
    #[serde(with = "dvec_serde")]
    pub x0: DVector<f64>,
    #[serde(with = "dvec_serde")]
    pub v0: DVector<f64>,
    /// Nominal state-feedback gain: kappa(x) = u_bar(r) - K (x - x_bar(r)).
    pub kappa_gain: Vec<Vec<f64>>,
    /// Navigation-field gain: rho(v) = rho_gain * (r - v).
    #[serde(default = "default_rho_gain")]
    pub rho_gain: f64,
    #[serde(with = "dvec_serde")]
    pub r: DVector<f64>,
    pub t_end: f64,
    pub control_dt: f64,
    pub filter: FilterConfig,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.model.is_empty() {
            return Err(Error::InvalidConfig("scenario.model must be set".into()));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidConfig("t_end must be nonnegative".into()));
        }
        if !(self.control_dt > 0.0) || !self.control_dt.is_finite() {
            return Err(Error::InvalidConfig("control_dt must be positive".into()));
        }
        if self.v0.len() != self.r.len() {
            return Err(Error::InvalidConfig("v0 and r must have the same dimension".into()));
        }
        if self.kappa_gain.is_empty()
            || self.kappa_gain.iter().any(|row| row.len() != self.kappa_gain[0].len())
        {
            return Err(Error::InvalidConfig("kappa_gain must be a rectangular m x n matrix".into()));
        }
        self.filter.validate()
    }
}

/// One recorded control tick.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: f64,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub delta1: f64,
    pub delta_t: f64,
    pub qp_status: QpStatus,
    pub used_fallback: bool,
    pub solve_ms: f64,
}

/// Full closed-loop trace plus run-level summaries.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub rows: Vec<TraceRow>,
    pub fallback_count: usize,
    /// Minimum instantaneous constraint margin min_i c_i(x, v) over all
    /// recorded ticks.
    pub min_constraint: f64,
    /// Same minimum restricted to the plant-state rows declared on the
    /// constraint map. Equals `min_constraint` when no split was declared.
    pub min_state_margin: f64,
}

impl SimTrace {
    pub fn final_state(&self) -> &TraceRow {
        self.rows.last().expect("trace has at least one row")
    }

    pub fn min_delta1(&self) -> f64 {
        self.rows.iter().map(|r| r.delta1).fold(f64::INFINITY, f64::min)
    }

    /// CSV with header t, x1..xn, v1..vl, u1..um, w1..wl, delta1, deltaT,
    /// qp_status, used_fallback, solve_ms.
    pub fn to_csv(&self) -> String {
        let first = self.rows.first().expect("trace has at least one row");
        let (n, l, m) = (first.x.len(), first.v.len(), first.u.len());
        let mut out = String::from("t");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        for i in 1..=l {
            let _ = write!(out, ",v{i}");
        }
        for i in 1..=m {
            let _ = write!(out, ",u{i}");
        }
        for i in 1..=l {
            let _ = write!(out, ",w{i}");
        }
        out.push_str(",delta1,deltaT,qp_status,used_fallback,solve_ms\n");
        for row in &self.rows {
            let _ = write!(out, "{}", row.t);
            for value in row.x.iter().chain(row.v.iter()).chain(row.u.iter()).chain(row.w.iter()) {
                let _ = write!(out, ",{value}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{}",
                row.delta1,
                row.delta_t,
                row.qp_status,
                row.used_fallback as u8,
                row.solve_ms
            );
        }
        out
    }
}

/// Run a scenario against a registered model name.
pub fn simulate(scenario: &Scenario) -> Result<SimTrace> {
    let (model, cmap) = pendulum::build_plant(&scenario.model, scenario.params.as_ref())?;
    simulate_with(&model, &cmap, scenario)
}

/// Run a scenario against an explicitly supplied model (the scenario's model
/// name is not consulted).
pub fn simulate_with(
    model: &SystemModel,
    cmap: &ConstraintMap,
    scenario: &Scenario,
) -> Result<SimTrace> {
    scenario.validate()?;
    let dims = model.dims;
    if scenario.x0.len() != dims.n {
        return Err(Error::InvalidConfig(format!(
            "x0 has dimension {}, model expects {}",
            scenario.x0.len(),
            dims.n
        )));
    }
    if scenario.v0.len() != dims.l {
        return Err(Error::InvalidConfig(format!(
            "v0 has dimension {}, model expects {}",
            scenario.v0.len(),
            dims.l
        )));
    }
    if scenario.kappa_gain.len() != dims.m || scenario.kappa_gain[0].len() != dims.n {
        return Err(Error::InvalidConfig(format!(
            "kappa_gain must be {} x {}",
            dims.m, dims.n
        )));
    }

    let kmat = DMatrix::from_fn(dims.m, dims.n, |i, j| scenario.kappa_gain[i][j]);
    let mut filter =
        SafetyFilter::new(model.clone(), cmap.clone(), scenario.filter.clone(), &scenario.v0)?;

    let (d1, dt) = filter.margins(&scenario.x0, &scenario.v0)?;
    let start_margin = if dt.is_nan() { d1 } else { d1.min(dt) };
    if start_margin < 0.0 {
        return Err(Error::StartupInfeasible { margin: start_margin });
    }

    let xbar_r = model.x_bar(&scenario.r);
    let ubar_r = model.u_bar(&scenario.r);
    let steps = (scenario.t_end / scenario.control_dt).round() as usize;
    let plant_cfg = IntegratorConfig {
        max_step: Some(scenario.control_dt),
        ..scenario.filter.integrator.clone()
    };

    let mut x = scenario.x0.clone();
    let mut v = scenario.v0.clone();
    let mut rows = Vec::with_capacity(steps + 1);
    let mut min_constraint = f64::INFINITY;
    let mut min_state_margin = f64::INFINITY;
    let state_rows = cmap.state_rows();

    for k in 0..=steps {
        let t = k as f64 * scenario.control_dt;
        let margins = cmap.c(&x, &v);
        min_constraint = min_constraint.min(margins.min());
        for &i in &state_rows {
            min_state_margin = min_state_margin.min(margins[i]);
        }
        let target_u = &ubar_r + &kmat * (&xbar_r - &x);
        let target_w = (&scenario.r - &v) * scenario.rho_gain;
        let out = filter.step(&x, &v, &target_u, &target_w)?;
        rows.push(TraceRow {
            t,
            x: x.clone(),
            v: v.clone(),
            u: out.u.clone(),
            w: out.w.clone(),
            delta1: out.delta1,
            delta_t: out.delta_t,
            qp_status: out.qp_status,
            used_fallback: out.used_fallback,
            solve_ms: out.timing * 1e3,
        });
        if k == steps {
            break;
        }
        // Zero-order hold over the tick; the reference integrates exactly.
        let u_hold = out.u;
        let sol = integrate_raw(
            |_t, y, dy| {
                let xs = DVector::from_column_slice(y);
                let dx = model.f(&xs) + model.g(&xs) * &u_hold;
                dy.copy_from_slice(dx.as_slice());
            },
            x.as_slice(),
            scenario.control_dt,
            &plant_cfg,
            &[],
        )?;
        x = DVector::from_vec(sol.y.last().unwrap().clone());
        v += &out.w * scenario.control_dt;
    }

    Ok(SimTrace { rows, fallback_count: filter.fallback_count(), min_constraint, min_state_margin })
}

/// The scenario's nominal controller and navigation field at (x, v):
/// kappa(x) = u_bar(r) - K (x - x_bar(r)) and rho(v) = rho_gain (r - v).
pub fn nominal_targets(
    model: &SystemModel,
    scenario: &Scenario,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let dims = model.dims;
    let kmat = DMatrix::from_fn(dims.m, dims.n, |i, j| scenario.kappa_gain[i][j]);
    let target_u = model.u_bar(&scenario.r) + kmat * (model.x_bar(&scenario.r) - x);
    let target_w = (&scenario.r - v) * scenario.rho_gain;
    (target_u, target_w)
}

/// Post-hoc check of the enforced inequality along an executed trace: for
/// consecutive ticks, finite-difference the predicted margins at matching
/// prediction times and return the worst value of
/// `(delta_next - delta_cur)/dt + alpha(delta_cur)`; a correct run keeps this
/// above a small negative slack.
pub fn audit_cbf_inequality(
    model: &SystemModel,
    cmap: &ConstraintMap,
    trace: &SimTrace,
    cfg: &FilterConfig,
    control_dt: f64,
) -> Result<f64> {
    let icfg = IntegratorConfig {
        max_step: Some(cfg.integrator.max_step.unwrap_or(cfg.t_horizon / 20.0)),
        ..cfg.integrator.clone()
    };
    let rollout = |x: &DVector<f64>, v: &DVector<f64>, sample_at: &[f64]| -> Result<RawSolution> {
        integrate_raw(
            |_t, y, dy| {
                let xs = DVector::from_column_slice(y);
                let dx = model.f_pi(&xs, v);
                dy.copy_from_slice(dx.as_slice());
            },
            x.as_slice(),
            cfg.t_horizon,
            &icfg,
            sample_at,
        )
    };

    let mut worst = f64::INFINITY;
    for pair in trace.rows.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        let sol_cur = rollout(&cur.x, &cur.v, &[])?;
        let sol_next = rollout(&next.x, &next.v, &sol_cur.t)?;
        for (k, &tau) in sol_cur.t.iter().enumerate() {
            let idx = sol_next.index_of(tau).expect("sampled time present in rollout");
            let c_cur = cmap.c(&DVector::from_column_slice(&sol_cur.y[k]), &cur.v);
            let c_next = cmap.c(&DVector::from_column_slice(&sol_next.y[idx]), &next.v);
            for i in 0..c_cur.len() {
                let residual = (c_next[i] - c_cur[i]) / control_dt + cfg.alpha_path.eval(c_cur[i]);
                worst = worst.min(residual);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scalar_model;
    use std::sync::Arc;

    fn scalar_cmap() -> ConstraintMap {
        let c = Arc::new(|x: &DVector<f64>, _v: &DVector<f64>| {
            DVector::from_element(1, 2.0 - x[0])
        });
        let c_x = Arc::new(|_x: &DVector<f64>, _v: &DVector<f64>| {
            DMatrix::from_element(1, 1, -1.0)
        });
        let c_v = Arc::new(|_x: &DVector<f64>, _v: &DVector<f64>| DMatrix::zeros(1, 1));
        ConstraintMap::new(1, c, c_x, c_v)
    }

    fn scalar_filter_cfg() -> FilterConfig {
        FilterConfig {
            t_horizon: 5.0,
            alpha_path: AlphaFn::linear(100.0),
            alpha_terminal: AlphaFn::linear(400.0),
            eta: 0.1,
            integrator: IntegratorConfig::default(),
            fallback: FallbackMode::On,
            terminal: TerminalConfig::default(),
        }
    }

    fn scalar_scenario() -> Scenario {
        Scenario {
            model: "scalar".into(),
            params: None,
            x0: DVector::from_element(1, 0.0),
            v0: DVector::from_element(1, 0.5),
            kappa_gain: vec![vec![0.0]],
            rho_gain: 0.0,
            r: DVector::from_element(1, 0.5),
            t_end: 0.5,
            control_dt: 0.005,
            filter: scalar_filter_cfg(),
        }
    }

    #[test]
    fn filter_is_idle_at_equilibrium() {
        let model = scalar_model();
        let v = DVector::from_element(1, 0.3);
        let mut filter =
            SafetyFilter::new(model.clone(), scalar_cmap(), scalar_filter_cfg(), &v).unwrap();
        let x = model.x_bar(&v);
        let out = filter
            .step(&x, &v, &model.u_bar(&v), &DVector::zeros(1))
            .unwrap();
        assert_eq!(out.qp_status, QpStatus::Optimal);
        assert!(!out.used_fallback);
        assert!((out.u[0] - 0.3).abs() <= 1e-8);
        assert!(out.w[0].abs() <= 1e-8);
        assert!(out.delta1 > 0.0);
        assert!(out.delta_t > 0.0);
    }

    #[test]
    fn forced_fallback_returns_feasible_backup_pair() {
        let model = scalar_model();
        let v = DVector::from_element(1, 0.3);
        let mut filter =
            SafetyFilter::new(model.clone(), scalar_cmap(), scalar_filter_cfg(), &v).unwrap();
        filter.set_force_qp_failure(true);
        let x = DVector::from_element(1, 0.8);
        let out = filter
            .step(&x, &v, &DVector::from_element(1, 5.0), &DVector::from_element(1, 1.0))
            .unwrap();
        assert!(out.used_fallback);
        assert_eq!(out.u, model.pi(&x, &v));
        assert_eq!(out.w[0], 0.0);

        // The backup pair satisfies every row the QP would have seen.
        let cfg = scalar_filter_cfg();
        let bundle =
            integrate_flow(&model, &x, &v, cfg.t_horizon, &cfg.integrator).unwrap();
        let cmap = scalar_cmap();
        let mut rows = path_rows(&bundle, &model, &cmap, &x, &v, &cfg.alpha_path, None);
        rows.extend(terminal_rows(
            filter.terminal(),
            &bundle,
            &model,
            &x,
            &v,
            &cfg.effective_alpha_terminal(),
        ));
        assert!(!rows.is_empty());
        for row in &rows {
            assert!(
                row.slack(&out.u, &out.w) >= -1e-7,
                "backup pair violates a row by {:.3e}",
                -row.slack(&out.u, &out.w)
            );
        }
        assert_eq!(filter.fallback_count(), 1);
    }

    #[test]
    fn fallback_error_mode_surfaces_the_qp() {
        let model = scalar_model();
        let v = DVector::from_element(1, 0.3);
        let mut cfg = scalar_filter_cfg();
        cfg.fallback = FallbackMode::Error;
        let mut filter = SafetyFilter::new(model.clone(), scalar_cmap(), cfg, &v).unwrap();
        filter.set_force_qp_failure(true);
        let x = DVector::from_element(1, 0.8);
        let err = filter
            .step(&x, &v, &DVector::zeros(1), &DVector::zeros(1))
            .unwrap_err();
        match err {
            Error::QpFailure { status, problem_json } => {
                assert_eq!(status, "max_iter");
                assert!(problem_json.contains("rows"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_length_scenario_gives_single_row() {
        let mut scenario = scalar_scenario();
        scenario.t_end = 0.0;
        let trace = simulate_with(&scalar_model(), &scalar_cmap(), &scenario).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].t, 0.0);
        assert_eq!(trace.fallback_count, 0);
    }

    #[test]
    fn frozen_backup_scenario_idles_and_converges() {
        let scenario = scalar_scenario();
        let trace = simulate_with(&scalar_model(), &scalar_cmap(), &scenario).unwrap();
        for row in &trace.rows {
            assert!(row.w.amax() <= 1e-8, "spurious reference motion at t = {}", row.t);
            assert_eq!(row.qp_status, QpStatus::Optimal);
        }
        // x follows dx = -(x - 0.5) from 0, so |x - 0.5| shrinks by e^{-t}.
        let final_err = (trace.final_state().x[0] - 0.5).abs();
        assert!(final_err < 0.32 && final_err > 0.28, "final error {final_err}");
        assert!(trace.min_constraint > 0.0);
    }

    #[test]
    fn csv_header_and_shape() {
        let mut scenario = scalar_scenario();
        scenario.t_end = 0.01;
        let trace = simulate_with(&scalar_model(), &scalar_cmap(), &scenario).unwrap();
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(
            lines[0],
            "t,x1,v1,u1,w1,delta1,deltaT,qp_status,used_fallback,solve_ms"
        );
        assert_eq!(lines.len(), 1 + 3);
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 10);
            assert_eq!(fields[7], "optimal");
            assert!(fields[8] == "0" || fields[8] == "1");
        }
    }

    #[test]
    fn audit_holds_on_scalar_run() {
        let mut scenario = scalar_scenario();
        scenario.t_end = 0.05;
        scenario.rho_gain = 1.0;
        scenario.r = DVector::from_element(1, 1.0);
        let model = scalar_model();
        let cmap = scalar_cmap();
        let trace = simulate_with(&model, &cmap, &scenario).unwrap();
        let worst = audit_cbf_inequality(
            &model,
            &cmap,
            &trace,
            &scenario.filter,
            scenario.control_dt,
        )
        .unwrap();
        assert!(worst >= -1e-3, "audit residual {worst:.3e}");
    }

    #[test]
    fn startup_outside_constraints_is_rejected() {
        let mut scenario = scalar_scenario();
        scenario.x0 = DVector::from_element(1, 2.5);
        let err = simulate_with(&scalar_model(), &scalar_cmap(), &scenario).unwrap_err();
        match err {
            Error::StartupInfeasible { margin } => assert!(margin < 0.0),
            other => panic!("unexpected error {other:?}"),
        }
        let text = format!(
            "{}",
            Error::StartupInfeasible { margin: -0.5 }
        );
        assert!(text.contains("initial margin negative"));
    }

    #[test]
    fn filter_config_defaults_from_minimal_json() {
        let cfg: FilterConfig = serde_json::from_str(
            r#"{"T": 10.0, "alpha_path": {"kind": "linear", "gain": 100.0}, "eta": 0.1}"#,
        )
        .unwrap();
        assert_eq!(cfg.t_horizon, 10.0);
        assert_eq!(cfg.alpha_terminal.gain(), 400.0);
        assert!(cfg.terminal.enabled);
        assert!(!cfg.terminal.rebuild_per_v);
        assert_eq!(cfg.effective_alpha_terminal().gain(), 400.0);
        let mut cfg2 = cfg;
        cfg2.terminal.alpha_gain = Some(250.0);
        assert_eq!(cfg2.effective_alpha_terminal().gain(), 250.0);
    }

    #[test]
    fn scenario_roundtrips_through_json() {
        let scenario = scalar_scenario();
        let text = serde_json::to_string_pretty(&scenario).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back.x0, scenario.x0);
        assert_eq!(back.kappa_gain, scenario.kappa_gain);
        assert_eq!(back.filter.t_horizon, scenario.filter.t_horizon);
        // Plain-array vector encoding, not a nested matrix object.
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value["x0"].is_array());
        assert_eq!(value["x0"][0], 0.0);
    }
}
