//! Quadratic Lyapunov level-set terminal margin. Beyond the prediction horizon
//! the backup policy keeps the state inside the largest sublevel set of
//! `V(x, v) = (x - x_bar(v))' P (x - x_bar(v))` that fits in the constraint
//! polytope, so `Delta_T,i = Gamma_i(v) - V` certifies invariance per
//! constraint row.

use nalgebra::{DMatrix, DVector};

use crate::dsm::{CbfRow, RowTag};
use crate::error::{Error, Result};
use crate::flow::FlowBundle;
use crate::linalg::{max_re_eigenvalue, solve_lyapunov};
use crate::model::{AlphaFn, ConstraintMap, MatFn, SystemModel, VecFn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalMode {
    Enabled,
    Omitted,
}

/// Terminal margin data: the Lyapunov weight, the affine constraint rows
/// `a_i' x <= beta_i + gamma_i' v` extracted from the constraint map, and the
/// equilibrium maps shared with the model.
pub struct QuadraticTerminalDsm {
    pub p_mat: DMatrix<f64>,
    /// Row normals, one per constraint, p by n.
    pub a: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub gamma: DMatrix<f64>,
    /// `a_i' P^{-1} a_i` per row.
    pub denom: DVector<f64>,
    pub mode: TerminalMode,
    /// Rows whose level set collapsed at the build reference.
    pub degenerate: Vec<usize>,
    x_bar: Option<VecFn>,
    dx_bar: Option<MatFn>,
}

impl QuadraticTerminalDsm {
    /// A disabled placeholder: no components, empty row lists.
    pub fn omitted() -> Self {
        QuadraticTerminalDsm {
            p_mat: DMatrix::zeros(0, 0),
            a: DMatrix::zeros(0, 0),
            beta: DVector::zeros(0),
            gamma: DMatrix::zeros(0, 0),
            denom: DVector::zeros(0),
            mode: TerminalMode::Omitted,
            degenerate: Vec::new(),
            x_bar: None,
            dx_bar: None,
        }
    }

    pub fn components(&self) -> usize {
        match self.mode {
            TerminalMode::Enabled => self.a.nrows(),
            TerminalMode::Omitted => 0,
        }
    }

    pub fn x_bar(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.x_bar.as_ref().expect("terminal dsm is omitted"))(v)
    }

    fn dx_bar(&self, v: &DVector<f64>) -> DMatrix<f64> {
        (self.dx_bar.as_ref().expect("terminal dsm is omitted"))(v)
    }

    /// Support margin of row `i` at reference `v`: distance from the
    /// equilibrium to the constraint plane, in constraint units.
    fn plane_margin(&self, i: usize, v: &DVector<f64>, xb: &DVector<f64>) -> f64 {
        self.beta[i] + self.gamma.row(i).transpose().dot(v) - self.a.row(i).transpose().dot(xb)
    }

    /// Level `Gamma_i(v)` of the largest invariant sublevel set respecting row
    /// `i`. Clamped to zero when the equilibrium leaves the constraint.
    pub fn gamma_level(&self, i: usize, v: &DVector<f64>) -> f64 {
        let xb = self.x_bar(v);
        let m = self.plane_margin(i, v, &xb);
        if m <= 0.0 {
            0.0
        } else {
            m * m / self.denom[i]
        }
    }

    /// Smallest `Gamma_i(v)` across components.
    pub fn min_gamma(&self, v: &DVector<f64>) -> f64 {
        (0..self.components())
            .map(|i| self.gamma_level(i, v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Build the quadratic terminal margin at nominal reference `v0`.
///
/// `P` solves `A' P + P A + I = 0` for the closed-loop linearization `A` at
/// the equilibrium, and the constraint map must be affine in `(x, v)` so that
/// each row yields a support level `Gamma_i(v)`.
pub fn build_terminal(
    model: &SystemModel,
    cmap: &ConstraintMap,
    v0: &DVector<f64>,
) -> Result<QuadraticTerminalDsm> {
    let n = model.dims.n;
    let l = model.dims.l;
    let p = cmap.p;
    let (xb0, _ub0) = model.equilibrium(v0);

    let a_pi = model.jac_x(&xb0, v0);
    let max_re = max_re_eigenvalue(&a_pi);
    if !(max_re < 0.0) {
        return Err(Error::NotHurwitz { max_re });
    }

    let q = DMatrix::identity(n, n);
    let p_mat = solve_lyapunov(&a_pi, &q).ok_or(Error::NotHurwitz { max_re })?;

    // Extract affine row data c_i(x, v) = beta_i + gamma_i' v - a_i' x.
    let cx = cmap.jac_x(&xb0, v0);
    let cv = cmap.jac_v(&xb0, v0);
    let a = -cx;
    let gamma = cv;
    let c0 = cmap.c(&xb0, v0);
    let mut beta = DVector::zeros(p);
    for i in 0..p {
        beta[i] = c0[i] + a.row(i).transpose().dot(&xb0) - gamma.row(i).transpose().dot(v0);
    }

    // The formula is only sound for affine maps; probe a few displaced points.
    let probes: [(f64, f64); 3] = [(0.13, -0.21), (-0.37, 0.11), (0.29, 0.31)];
    for (sx, sv) in probes {
        let xq = &xb0 + DVector::from_fn(n, |i, _| sx * (1.0 + i as f64 * 0.17));
        let vq = v0 + DVector::from_fn(l, |j, _| sv * (1.0 - j as f64 * 0.23));
        let exact = cmap.c(&xq, &vq);
        for i in 0..p {
            let affine =
                beta[i] + gamma.row(i).transpose().dot(&vq) - a.row(i).transpose().dot(&xq);
            let residual = (exact[i] - affine).abs();
            if residual > 1e-6 * (1.0 + exact[i].abs()) {
                return Err(Error::NonAffineConstraint { row: i, residual });
            }
        }
    }

    let p_inv_a = {
        let lu = p_mat.clone().lu();
        let mut cols = DMatrix::zeros(n, p);
        for i in 0..p {
            let ai = a.row(i).transpose();
            if ai.norm() == 0.0 {
                return Err(Error::ZeroConstraintNormal { row: i });
            }
            let sol = lu.solve(&ai).expect("P is positive definite");
            cols.set_column(i, &sol);
        }
        cols
    };
    let mut denom = DVector::zeros(p);
    for i in 0..p {
        denom[i] = a.row(i).transpose().dot(&p_inv_a.column(i).into_owned());
    }

    let mut dsm = QuadraticTerminalDsm {
        p_mat,
        a,
        beta,
        gamma,
        denom,
        mode: TerminalMode::Enabled,
        degenerate: Vec::new(),
        x_bar: Some(model.x_bar_fn()),
        dx_bar: None,
    };
    let model_clone = model.clone();
    dsm.dx_bar = Some(std::sync::Arc::new(move |v: &DVector<f64>| model_clone.xbar_jacobian(v)));

    // A vanishing level at the build reference means the equilibrium sits on
    // the constraint boundary; the terminal set is degenerate there.
    for i in 0..p {
        if dsm.gamma_level(i, v0) <= 0.0 {
            dsm.degenerate.push(i);
        }
    }
    Ok(dsm)
}

/// Component values and exact gradients of the terminal margin at `(x, v)`.
pub fn eval_terminal(
    dsm: &QuadraticTerminalDsm,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let p_t = dsm.components();
    if p_t == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, x.len()), DMatrix::zeros(0, v.len()));
    }
    let n = x.len();
    let l = v.len();
    let xb = dsm.x_bar(v);
    let dxb = dsm.dx_bar(v);
    let d = x - &xb;
    let pd = &dsm.p_mat * &d;
    let vq = d.dot(&pd);

    let mut values = DVector::zeros(p_t);
    let mut grad_x = DMatrix::zeros(p_t, n);
    let mut grad_v = DMatrix::zeros(p_t, l);
    // d/dv of the quadratic part: -2 d' P d(x - x_bar)/dv = +2 d' P dx_bar/dv.
    let quad_v = (pd.transpose() * &dxb).scale(2.0);
    let gx_row = (-2.0 * &pd).transpose();
    for i in 0..p_t {
        let m = dsm.plane_margin(i, v, &xb);
        let gamma_i = if m <= 0.0 { 0.0 } else { m * m / dsm.denom[i] };
        values[i] = gamma_i - vq;
        grad_x.row_mut(i).copy_from(&gx_row);
        let dg = if m <= 0.0 {
            DVector::zeros(l)
        } else {
            let plane_v = dsm.gamma.row(i).transpose() - dxb.transpose() * dsm.a.row(i).transpose();
            plane_v.scale(2.0 * m / dsm.denom[i])
        };
        for j in 0..l {
            grad_v[(i, j)] = dg[j] + quad_v[(0, j)];
        }
    }
    (values, grad_x, grad_v)
}

/// Terminal CBF rows at the end of the bundle horizon, one per component.
pub fn terminal_rows(
    dsm: &QuadraticTerminalDsm,
    bundle: &FlowBundle,
    model: &SystemModel,
    x: &DVector<f64>,
    v: &DVector<f64>,
    alpha_terminal: &AlphaFn,
) -> Vec<CbfRow> {
    if dsm.mode == TerminalMode::Omitted {
        return Vec::new();
    }
    let x_t = bundle.phi.last().expect("bundle has at least the initial sample");
    let sx_t = bundle.sx.last().unwrap();
    let sv_t = bundle.sv.last().unwrap();
    let (values, grad_x, grad_v) = eval_terminal(dsm, x_t, v);

    let fx = model.f(x);
    let gx = model.g(x);
    let gsx = &grad_x * sx_t;
    let au_block = &gsx * &gx;
    let aw_block = &grad_x * sv_t + grad_v;
    let drift = &gsx * &fx;

    (0..dsm.components())
        .map(|i| CbfRow {
            a_u: au_block.row(i).transpose(),
            a_w: aw_block.row(i).transpose(),
            r: -alpha_terminal.eval(values[i]) - drift[i],
            tag: RowTag::Terminal { component: i },
        })
        .collect()
}
