//! Plant description: control-affine dynamics, the prestabilizing backup-policy
//! family, the equilibrium manifold, and the reference-dependent constraint map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Problem dimensions shared across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Reference dimension.
    pub l: usize,
    /// Constraint count.
    pub p: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize, l: usize, p: usize) -> Self {
        assert!(n > 0 && m > 0 && l > 0 && p > 0, "all dimensions must be positive");
        Dims { n, m, l, p }
    }
}

pub type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type VecFn2 = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatFn2 = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Serde adapter storing a `DVector` as a plain JSON array.
pub(crate) mod dvec_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Central finite-difference step for a given anchor vector.
pub(crate) fn fd_step(anchor: &DVector<f64>) -> f64 {
    1e-6 * (1.0 + anchor.amax())
}

/// How Jacobians of the prestabilized dynamics are obtained.
#[derive(Clone)]
pub enum JacMode {
    /// Central differences with step `1e-6 * (1 + |x|_inf)`.
    FiniteDifference,
    /// Caller-supplied closed forms for `d f_pi / dx` and `d f_pi / dv`.
    Analytic { a_pi: MatFn2, b_pi: MatFn2 },
}

/// Control-affine plant `xdot = f(x) + g(x) u` together with the backup policy
/// `pi(x, v)` and the equilibrium maps `x_bar(v)`, `u_bar(v)`.
#[derive(Clone)]
pub struct SystemModel {
    pub dims: Dims,
    f: VecFn,
    g: MatFn,
    pi: VecFn2,
    x_bar: VecFn,
    u_bar: VecFn,
    dx_bar: Option<MatFn>,
    jac: JacMode,
    input_box: Option<(DVector<f64>, DVector<f64>)>,
}

impl SystemModel {
    pub fn new(dims: Dims, f: VecFn, g: MatFn, pi: VecFn2, x_bar: VecFn, u_bar: VecFn) -> Self {
        SystemModel { dims, f, g, pi, x_bar, u_bar, dx_bar: None, jac: JacMode::FiniteDifference, input_box: None }
    }

    pub fn with_analytic_jacobians(mut self, a_pi: MatFn2, b_pi: MatFn2) -> Self {
        self.jac = JacMode::Analytic { a_pi, b_pi };
        self
    }

    pub fn with_xbar_jacobian(mut self, dx_bar: MatFn) -> Self {
        self.dx_bar = Some(dx_bar);
        self
    }

    /// Admissible input box, applied to the filter decision variable.
    pub fn with_input_box(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        assert_eq!(lo.len(), self.dims.m);
        assert_eq!(hi.len(), self.dims.m);
        self.input_box = Some((lo, hi));
        self
    }

    pub fn jac_mode(&self) -> &JacMode {
        &self.jac
    }

    pub fn use_finite_difference(mut self) -> Self {
        self.jac = JacMode::FiniteDifference;
        self
    }

    pub fn input_box(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        self.input_box.as_ref().map(|(lo, hi)| (lo, hi))
    }

    pub fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dims.n, "state dimension mismatch");
        (self.f)(x)
    }

    pub fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(x.len(), self.dims.n, "state dimension mismatch");
        (self.g)(x)
    }

    pub fn pi(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dims.n, "state dimension mismatch");
        assert_eq!(v.len(), self.dims.l, "reference dimension mismatch");
        (self.pi)(x, v)
    }

    pub fn x_bar(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dims.l, "reference dimension mismatch");
        (self.x_bar)(v)
    }

    pub fn u_bar(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dims.l, "reference dimension mismatch");
        (self.u_bar)(v)
    }

    /// Equilibrium pair `(x_bar(v), u_bar(v))`.
    pub fn equilibrium(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.x_bar(v), self.u_bar(v))
    }

    /// Prestabilized vector field `f_pi(x, v) = f(x) + g(x) pi(x, v)`.
    pub fn f_pi(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.f(x) + self.g(x) * self.pi(x, v)
    }

    /// `d f_pi / dx`, analytic or by central differences.
    pub fn jac_x(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac {
            JacMode::Analytic { a_pi, .. } => a_pi(x, v),
            JacMode::FiniteDifference => {
                let n = self.dims.n;
                let h = fd_step(x);
                let mut jac = DMatrix::zeros(n, n);
                let mut xp = x.clone();
                let mut xm = x.clone();
                for i in 0..n {
                    xp[i] = x[i] + h;
                    xm[i] = x[i] - h;
                    let col = (self.f_pi(&xp, v) - self.f_pi(&xm, v)) / (2.0 * h);
                    jac.set_column(i, &col);
                    xp[i] = x[i];
                    xm[i] = x[i];
                }
                jac
            }
        }
    }

    /// `d f_pi / dv`, analytic or by central differences.
    pub fn jac_v(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac {
            JacMode::Analytic { b_pi, .. } => b_pi(x, v),
            JacMode::FiniteDifference => {
                let (n, l) = (self.dims.n, self.dims.l);
                let h = fd_step(v);
                let mut jac = DMatrix::zeros(n, l);
                let mut vp = v.clone();
                let mut vm = v.clone();
                for j in 0..l {
                    vp[j] = v[j] + h;
                    vm[j] = v[j] - h;
                    let col = (self.f_pi(x, &vp) - self.f_pi(x, &vm)) / (2.0 * h);
                    jac.set_column(j, &col);
                    vp[j] = v[j];
                    vm[j] = v[j];
                }
                jac
            }
        }
    }

    /// `d x_bar / dv`, analytic if supplied, otherwise central differences.
    pub fn xbar_jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        if let Some(d) = &self.dx_bar {
            return d(v);
        }
        let (n, l) = (self.dims.n, self.dims.l);
        let h = fd_step(v);
        let mut jac = DMatrix::zeros(n, l);
        let mut vp = v.clone();
        let mut vm = v.clone();
        for j in 0..l {
            vp[j] = v[j] + h;
            vm[j] = v[j] - h;
            let col = (self.x_bar(&vp) - self.x_bar(&vm)) / (2.0 * h);
            jac.set_column(j, &col);
            vp[j] = v[j];
            vm[j] = v[j];
        }
        jac
    }

    /// Shared handle on the equilibrium map, for consumers that outlive a borrow.
    pub fn x_bar_fn(&self) -> VecFn {
        Arc::clone(&self.x_bar)
    }
}

/// Reference-dependent constraint map `c(x, v) >= 0` with Jacobians.
#[derive(Clone)]
pub struct ConstraintMap {
    pub p: usize,
    c: VecFn2,
    c_x: MatFn2,
    c_v: MatFn2,
    /// Rows that bound physical plant state, as opposed to rows that bound the
    /// backup controller's demanded effort. `None` means every row is treated
    /// as a plant limit.
    state_rows: Option<Vec<usize>>,
}

impl ConstraintMap {
    pub fn new(p: usize, c: VecFn2, c_x: MatFn2, c_v: MatFn2) -> Self {
        ConstraintMap { p, c, c_x, c_v, state_rows: None }
    }

    /// Mark the subset of rows that express hard plant-state limits. Rows left
    /// out (for example input bounds filtered through the backup law) still
    /// enter every certificate; the split only affects reporting.
    pub fn with_state_rows(mut self, rows: Vec<usize>) -> Self {
        assert!(rows.iter().all(|&i| i < self.p), "state row out of range");
        self.state_rows = Some(rows);
        self
    }

    /// Indices of the plant-state rows; all rows when no split was declared.
    pub fn state_rows(&self) -> Vec<usize> {
        match &self.state_rows {
            Some(rows) => rows.clone(),
            None => (0..self.p).collect(),
        }
    }

    /// Build with finite-difference Jacobians derived from `c`.
    pub fn from_margins(p: usize, c: VecFn2) -> Self {
        let cx = Arc::clone(&c);
        let cv = Arc::clone(&c);
        let c_x: MatFn2 = Arc::new(move |x, v| {
            let h = fd_step(x);
            let mut jac = DMatrix::zeros(p, x.len());
            let mut xp = x.clone();
            let mut xm = x.clone();
            for i in 0..x.len() {
                xp[i] = x[i] + h;
                xm[i] = x[i] - h;
                let col = (cx(&xp, v) - cx(&xm, v)) / (2.0 * h);
                jac.set_column(i, &col);
                xp[i] = x[i];
                xm[i] = x[i];
            }
            jac
        });
        let c_v: MatFn2 = Arc::new(move |x, v| {
            let h = fd_step(v);
            let mut jac = DMatrix::zeros(p, v.len());
            let mut vp = v.clone();
            let mut vm = v.clone();
            for j in 0..v.len() {
                vp[j] = v[j] + h;
                vm[j] = v[j] - h;
                let col = (cv(x, &vp) - cv(x, &vm)) / (2.0 * h);
                jac.set_column(j, &col);
                vp[j] = v[j];
                vm[j] = v[j];
            }
            jac
        });
        ConstraintMap { p, c, c_x, c_v, state_rows: None }
    }

    pub fn c(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let out = (self.c)(x, v);
        assert_eq!(out.len(), self.p, "constraint dimension mismatch");
        out
    }

    pub fn jac_x(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        (self.c_x)(x, v)
    }

    pub fn jac_v(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        (self.c_v)(x, v)
    }
}

/// Class-K margin-decay shape for the barrier condition. Only linear gains are
/// supported; the gain has units 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AlphaFn {
    Linear { gain: f64 },
}

impl AlphaFn {
    pub fn linear(gain: f64) -> Self {
        assert!(gain > 0.0, "alpha gain must be positive");
        AlphaFn::Linear { gain }
    }

    pub fn eval(&self, c: f64) -> f64 {
        match self {
            AlphaFn::Linear { gain } => gain * c,
        }
    }

    pub fn gain(&self) -> f64 {
        match self {
            AlphaFn::Linear { gain } => *gain,
        }
    }
}

/// The one-dimensional test system `xdot = -x + u` with `pi(x, v) = v`, so that
/// `f_pi(x, v) = -(x - v)` and the equilibrium manifold is `x_bar(v) = v`,
/// `u_bar(v) = v`.
#[cfg(test)]
pub(crate) fn scalar_model() -> SystemModel {
    let dims = Dims::new(1, 1, 1, 1);
    SystemModel::new(
        dims,
        Arc::new(|x: &DVector<f64>| -x.clone()),
        Arc::new(|_x: &DVector<f64>| DMatrix::from_element(1, 1, 1.0)),
        Arc::new(|_x: &DVector<f64>, v: &DVector<f64>| v.clone()),
        Arc::new(|v: &DVector<f64>| v.clone()),
        Arc::new(|v: &DVector<f64>| v.clone()),
    )
}
