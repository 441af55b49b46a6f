//! Adaptive integration of the prestabilized flow and its sensitivity
//! Jacobians. The flow, the state sensitivity, and the reference sensitivity
//! are stacked into one augmented ODE so all three share step acceptance and
//! land on the same sample grid.

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemModel;

// Dormand-Prince 5(4) tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const B: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// PI step controller constants (classic dopri5 settings).
const SAFE: f64 = 0.9;
const FAC1: f64 = 0.2;
const FAC2: f64 = 10.0;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2;

/// Tolerances and step limits for the embedded Runge-Kutta pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// `None` means "horizon / 20" when integrating a flow bundle, so the
    /// sample grid is never coarser than 20 intervals.
    pub max_step: Option<f64>,
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            max_step: None,
            min_step: 1e-12,
            max_steps: 100_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidConfig("integrator tolerances must be positive".into()));
        }
        if !(self.min_step > 0.0) {
            return Err(Error::InvalidConfig("min_step must be positive".into()));
        }
        if let Some(h) = self.max_step {
            if !(h >= self.min_step) {
                return Err(Error::InvalidConfig("max_step must be at least min_step".into()));
            }
        }
        Ok(())
    }
}

/// Accepted-step record of a raw integration from `t = 0` to `t_end`.
#[derive(Debug)]
pub struct RawSolution {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub n_accepted: usize,
    pub n_rejected: usize,
}

impl RawSolution {
    /// Index of the accepted step at exactly time `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.t.iter().position(|&s| s == t)
    }
}

/// Integrate `y' = rhs(t, y)` from 0 to `t_end` with the embedded 5(4) pair.
///
/// Every time in `sample_at` (strictly increasing, inside `(0, t_end)`) is hit
/// by an exact step, as is `t_end` itself; all accepted steps are recorded.
pub fn integrate_raw<F>(
    mut rhs: F,
    y0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
    sample_at: &[f64],
) -> Result<RawSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    assert!(t_end >= 0.0, "t_end must be nonnegative");
    let dim = y0.len();
    let max_step = cfg.max_step.unwrap_or(f64::INFINITY).min(if t_end > 0.0 { t_end } else { f64::INFINITY });

    let mut t = 0.0_f64;
    let mut y = y0.to_vec();
    let mut ts = vec![0.0];
    let mut ys = vec![y.clone()];
    if t_end == 0.0 {
        return Ok(RawSolution { t: ts, y: ys, n_accepted: 0, n_rejected: 0 });
    }

    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; dim]).collect();
    let mut y_stage = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    rhs(0.0, &y, &mut k[0]);

    let mut samples = sample_at.iter().copied().filter(|&s| s > 0.0 && s < t_end);
    let mut next_sample = samples.next();

    let mut h = max_step;
    let mut facold = 1e-4_f64;
    let mut n_accepted = 0usize;
    let mut n_rejected = 0usize;
    let mut last_rejected = false;

    for _step in 0..cfg.max_steps {
        if t >= t_end {
            break;
        }
        let target = next_sample.unwrap_or(t_end);
        let hit = t + h >= target - 1e-14 * target.abs().max(1.0);
        let h_used = if hit { target - t } else { h };
        if h_used < cfg.min_step && !hit {
            return Err(Error::StepSizeUnderflow { t });
        }

        // Stages 2..7; k[0] is f(t, y) by FSAL.
        for s in 0..6 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(s + 1) {
                    let a = A[s][j];
                    if a != 0.0 {
                        acc += a * kj[i];
                    }
                }
                y_stage[i] = y[i] + h_used * acc;
            }
            if s == 5 {
                // Stage 7 is evaluated at the candidate solution.
                y_new.copy_from_slice(&y_stage);
                rhs(t + h_used, &y_new, &mut k[6]);
            } else {
                rhs(t + C[s] * h_used, &y_stage, &mut k[s + 1]);
            }
        }

        // y_new was formed from the A row equal to the fifth-order weights, so
        // only the error estimate remains.
        debug_assert_eq!(B[6], 0.0);
        let mut err_sq = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if E[j] != 0.0 {
                    e += E[j] * kj[i];
                }
            }
            let e = h_used * e;
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / dim as f64).sqrt();

        if !err.is_finite() {
            // Blow-up inside the step; retry much smaller.
            n_rejected += 1;
            last_rejected = true;
            h = (h_used * 0.1).max(0.0);
            if h < cfg.min_step {
                return Err(Error::StepSizeUnderflow { t });
            }
            continue;
        }

        let fac11 = err.powf(EXPO1);
        if err <= 1.0 {
            n_accepted += 1;
            t = if hit { target } else { t + h_used };
            y.copy_from_slice(&y_new);
            ts.push(t);
            ys.push(y.clone());
            let (k0, k6) = {
                let (a, b) = k.split_at_mut(6);
                (&mut a[0], &b[0])
            };
            k0.copy_from_slice(k6);

            if hit {
                if next_sample == Some(target) {
                    next_sample = samples.next();
                }
                // A truncated step says nothing useful about the natural step
                // size; keep the previous proposal.
            } else {
                let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(1.0 / FAC2, 1.0 / FAC1);
                let mut h_new = h_used / fac;
                if last_rejected {
                    h_new = h_new.min(h_used);
                }
                h = h_new;
            }
            h = h.min(max_step);
            facold = err.max(1e-4);
            last_rejected = false;
        } else {
            n_rejected += 1;
            last_rejected = true;
            h = h_used / (fac11 / SAFE).min(1.0 / FAC1);
            if h < cfg.min_step {
                return Err(Error::StepSizeUnderflow { t });
            }
        }
    }

    if t < t_end {
        return Err(Error::MaxStepsExceeded { t, max_steps: cfg.max_steps });
    }
    Ok(RawSolution { t: ts, y: ys, n_accepted, n_rejected })
}

/// Sampled prestabilized flow together with its sensitivity Jacobians on a
/// shared grid over `[0, T]`.
#[derive(Debug, Clone)]
pub struct FlowBundle {
    /// Strictly increasing sample times, `grid[0] = 0`, `grid.last() = T`.
    pub grid: Vec<f64>,
    /// Flow states `Phi(tau_k)`.
    pub phi: Vec<DVector<f64>>,
    /// State sensitivities `S_x(tau_k)`, n by n.
    pub sx: Vec<DMatrix<f64>>,
    /// Reference sensitivities `S_v(tau_k)`, n by l.
    pub sv: Vec<DMatrix<f64>>,
    /// The frozen reference the bundle was computed for.
    pub v: DVector<f64>,
}

impl FlowBundle {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }
}

/// Jointly integrate the flow `Phi` and the sensitivities `S_x`, `S_v` of the
/// prestabilized dynamics from initial state `x` with frozen reference `v`.
pub fn integrate_flow(
    model: &SystemModel,
    x: &DVector<f64>,
    v: &DVector<f64>,
    t_horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowBundle> {
    let n = model.dims.n;
    let l = model.dims.l;
    assert_eq!(x.len(), n, "state dimension mismatch");
    assert_eq!(v.len(), l, "reference dimension mismatch");
    assert!(x.iter().all(|c| c.is_finite()), "initial state must be finite");
    assert!(t_horizon > 0.0, "horizon must be positive");

    let mut cfg_eff = *cfg;
    cfg_eff.max_step = Some(cfg.max_step.unwrap_or(t_horizon / 20.0));

    let dim = n + n * n + n * l;
    let mut y0 = vec![0.0; dim];
    y0[..n].copy_from_slice(x.as_slice());
    for i in 0..n {
        y0[n + i * n + i] = 1.0;
    }

    let mut phi_buf = DVector::zeros(n);
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        phi_buf.as_mut_slice().copy_from_slice(&y[..n]);
        let fp = model.f_pi(&phi_buf, v);
        let a = model.jac_x(&phi_buf, v);
        let b = model.jac_v(&phi_buf, v);
        dy[..n].copy_from_slice(fp.as_slice());
        let sx = DMatrixView::from_slice(&y[n..n + n * n], n, n);
        let dsx = &a * sx;
        dy[n..n + n * n].copy_from_slice(dsx.as_slice());
        let sv = DMatrixView::from_slice(&y[n + n * n..], n, l);
        let dsv = &a * sv + b;
        dy[n + n * n..].copy_from_slice(dsv.as_slice());
    };

    let raw = integrate_raw(rhs, &y0, t_horizon, &cfg_eff, &[])?;

    let count = raw.t.len();
    let mut phi = Vec::with_capacity(count);
    let mut sx = Vec::with_capacity(count);
    let mut sv = Vec::with_capacity(count);
    for y in &raw.y {
        phi.push(DVector::from_column_slice(&y[..n]));
        sx.push(DMatrix::from_column_slice(n, n, &y[n..n + n * n]));
        sv.push(DMatrix::from_column_slice(n, l, &y[n + n * n..]));
    }
    Ok(FlowBundle { grid: raw.t, phi, sx, sv, v: v.clone() })
}

/// Worst grid-point violation of the identity
/// `S_x(tau) f_pi(x, v) = f_pi(Phi(tau), v)`.
pub fn commutation_residual(
    bundle: &FlowBundle,
    model: &SystemModel,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> f64 {
    let f0 = model.f_pi(x, v);
    bundle
        .grid
        .iter()
        .enumerate()
        .map(|(k, _)| (&bundle.sx[k] * &f0 - model.f_pi(&bundle.phi[k], v)).norm())
        .fold(0.0, f64::max)
}

/// Predicted limit of the reference sensitivity, `-A_pi^{-1} B_pi` evaluated at
/// the equilibrium `(x_bar(v), v)`. Errors when the linearization is singular,
/// in which case the asymptote statement is inconclusive.
pub fn sv_asymptote(model: &SystemModel, v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let xb = model.x_bar(v);
    let a = model.jac_x(&xb, v);
    let b = model.jac_v(&xb, v);

    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    // Absolute floor as well as conditioning: a closed loop slower than
    // 1e-10 / s has no usable asymptote on any practical horizon.
    if !(smin > 1e-10 * smax.max(1.0)) {
        return Err(Error::SingularJacobian);
    }
    let x = a.lu().solve(&b).ok_or(Error::SingularJacobian)?;
    Ok(-x)
}
