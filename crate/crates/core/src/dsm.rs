//! Finite-horizon trajectory margins and the linear CBF rows of the tractable
//! safety filter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::flow::FlowBundle;
use crate::model::{dvec_serde, AlphaFn, ConstraintMap, SystemModel};

/// Margins of every constraint at every sample of the predicted backup
/// trajectory, with their per-constraint minima.
#[derive(Debug, Clone)]
pub struct DsmEvaluation {
    /// `delta_grid[(i, k)] = c_i(Phi(tau_k), v)`, p by K+1.
    pub delta_grid: DMatrix<f64>,
    /// Per-constraint minimum over the grid.
    pub delta1: DVector<f64>,
    /// Per-constraint minimizing grid index; first minimum on ties.
    pub argmin_tau: Vec<usize>,
}

impl DsmEvaluation {
    /// Smallest margin across constraints and samples.
    pub fn min_margin(&self) -> f64 {
        self.delta1.min()
    }
}

/// Identifies which constraint and sample produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowTag {
    /// Path condition for constraint `constraint` at grid sample `sample`.
    Path { constraint: usize, sample: usize },
    /// Terminal-margin condition for component `component`.
    Terminal { component: usize },
}

/// One linear inequality `a_u . u + a_w . w >= r` in the filter variables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbfRow {
    #[serde(with = "dvec_serde")]
    pub a_u: DVector<f64>,
    #[serde(with = "dvec_serde")]
    pub a_w: DVector<f64>,
    pub r: f64,
    pub tag: RowTag,
}

impl CbfRow {
    /// Slack of the row at a candidate `(u, w)`; nonnegative means satisfied.
    pub fn slack(&self, u: &DVector<f64>, w: &DVector<f64>) -> f64 {
        self.a_u.dot(u) + self.a_w.dot(w) - self.r
    }
}

/// Evaluate the trajectory margins `delta_i(tau_k) = c_i(Phi(tau_k), v)` over
/// the bundle grid.
pub fn eval_dsm(bundle: &FlowBundle, cmap: &ConstraintMap, v: &DVector<f64>) -> DsmEvaluation {
    let p = cmap.p;
    let count = bundle.len();
    let mut delta_grid = DMatrix::zeros(p, count);
    for k in 0..count {
        let ck = cmap.c(&bundle.phi[k], v);
        delta_grid.set_column(k, &ck);
    }
    let mut delta1 = DVector::from_element(p, f64::INFINITY);
    let mut argmin_tau = vec![0usize; p];
    for i in 0..p {
        for k in 0..count {
            let d = delta_grid[(i, k)];
            if d < delta1[i] {
                delta1[i] = d;
                argmin_tau[i] = k;
            }
        }
    }
    DsmEvaluation { delta_grid, delta1, argmin_tau }
}

/// Assemble the path CBF rows, one per (constraint, sample) pair, ordered by
/// sample then constraint.
///
/// With `J` the row of `C_x` at the predicted point, each row encodes the
/// margin-rate condition
/// `J S_x (f(x) + g(x) u) + (J S_v + C_v row) w >= -alpha(delta)`.
/// Rows with margin above `delta_screen` are dropped; screening is opt-in and
/// conservative because dropped rows are far from active.
pub fn path_rows(
    bundle: &FlowBundle,
    model: &SystemModel,
    cmap: &ConstraintMap,
    x: &DVector<f64>,
    v: &DVector<f64>,
    alpha_path: &AlphaFn,
    delta_screen: Option<f64>,
) -> Vec<CbfRow> {
    let p = cmap.p;
    let screen = delta_screen.unwrap_or(f64::INFINITY);
    let fx = model.f(x);
    let gx = model.g(x);
    let mut rows = Vec::with_capacity(p * bundle.len());
    for k in 0..bundle.len() {
        let cx = cmap.jac_x(&bundle.phi[k], v);
        let cv = cmap.jac_v(&bundle.phi[k], v);
        // p by n, rows J S_x shared between the u coefficient and the drift.
        let jsx = &cx * &bundle.sx[k];
        let au_block = &jsx * &gx;
        let aw_block = &cx * &bundle.sv[k] + cv;
        let drift = &jsx * &fx;
        let ck = cmap.c(&bundle.phi[k], v);
        for i in 0..p {
            let delta = ck[i];
            if delta > screen {
                continue;
            }
            rows.push(CbfRow {
                a_u: au_block.row(i).transpose(),
                a_w: aw_block.row(i).transpose(),
                r: -alpha_path.eval(delta) - drift[i],
                tag: RowTag::Path { constraint: i, sample: k },
            });
        }
    }
    rows
}
