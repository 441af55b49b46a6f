//! Inverted pendulum on a cart: Lagrangian dynamics, LQR prestabilizer,
//! state and input constraints, and the benchmark scenario. Registered for
//! the CLI under the name "pendulum-cart".

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FallbackMode, FilterConfig, Scenario, TerminalConfig};
use crate::flow::IntegratorConfig;
use crate::model::{AlphaFn, ConstraintMap, Dims, SystemModel};

pub const MODEL_NAME: &str = "pendulum-cart";

/// Physical constants, gains, and constraint bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumParams {
    /// Cart mass, kg.
    pub m_c: f64,
    /// Pendulum mass, kg.
    pub m_p: f64,
    /// Pendulum length, m.
    #[serde(rename = "L")]
    pub length: f64,
    /// Gravity, m/s^2.
    pub g: f64,
    /// Prestabilizer gain (1x4).
    #[serde(rename = "K_pi")]
    pub k_pi: [f64; 4],
    /// Nominal-controller gain (1x4).
    #[serde(rename = "K_kappa")]
    pub k_kappa: [f64; 4],
    /// Cart position bound, m.
    pub x_max: f64,
    /// Angle bound around upright, rad.
    pub theta_max: f64,
    /// Input force bound, N.
    pub u_max: f64,
    /// Reference target, m.
    pub r: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            m_c: 1.0,
            m_p: 0.5,
            length: 0.7,
            g: 9.81,
            k_pi: [-0.44, 35.3, -1.4, 8.0],
            k_kappa: [-35.0, 150.0, -20.0, 50.0],
            x_max: 4.5,
            theta_max: PI / 9.0,
            u_max: 20.0,
            r: 4.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if self.m_c <= 0.0 || self.m_p <= 0.0 || self.length <= 0.0 || self.g <= 0.0 {
            return Err(Error::InvalidConfig(
                "masses, length, and gravity must be positive".into(),
            ));
        }
        if self.u_max <= 0.0 || self.x_max <= 0.0 || self.theta_max <= 0.0 {
            return Err(Error::InvalidConfig("constraint bounds must be positive".into()));
        }
        Ok(())
    }
}

/// Accelerations of the cart-pole from the Lagrangian model
/// `M(q) q_dd + C(q, q_dot) q_dot + G(q) = B u`.
pub fn pendulum_dynamics(params: &PendulumParams, q: Vector2<f64>, qdot: Vector2<f64>, u: f64) -> Vector2<f64> {
    let (mc, mp, lp, g) = (params.m_c, params.m_p, params.length, params.g);
    let theta = q[1];
    let (s, c) = theta.sin_cos();
    let m = Matrix2::new(mc + mp, mp * lp * c, mp * lp * c, mp * lp * lp);
    let coriolis = Matrix2::new(0.0, -mp * lp * qdot[1] * s, 0.0, 0.0);
    let grav = Vector2::new(0.0, mp * g * lp * s);
    let b = Vector2::new(1.0, 0.0);
    let rhs = b * u - coriolis * qdot - grav;
    m.lu().solve(&rhs).expect("mass matrix is positive definite")
}

/// Total mechanical energy of the unforced cart-pole, used as a conservation
/// oracle in tests.
pub fn pendulum_energy(params: &PendulumParams, q: Vector2<f64>, qdot: Vector2<f64>) -> f64 {
    let (mc, mp, lp, g) = (params.m_c, params.m_p, params.length, params.g);
    let c = q[1].cos();
    let m = Matrix2::new(mc + mp, mp * lp * c, mp * lp * c, mp * lp * lp);
    0.5 * qdot.dot(&(m * qdot)) - mp * g * lp * c
}

// Accelerations split control-affinely: qdd = drift(x) + input_dir(x) * u.
fn accel_drift(params: &PendulumParams, x: &DVector<f64>) -> (f64, f64) {
    let (mc, mp, lp, g) = (params.m_c, params.m_p, params.length, params.g);
    let (s, c) = x[1].sin_cos();
    let dth = x[3];
    let a = mc + mp * s * s;
    let f1 = (mp * lp * dth * dth * s + mp * g * s * c) / a;
    let f2 = -(mp * lp * dth * dth * s * c + (mc + mp) * g * s) / (lp * a);
    (f1, f2)
}

fn accel_input_dir(params: &PendulumParams, x: &DVector<f64>) -> (f64, f64) {
    let (mc, mp, lp) = (params.m_c, params.m_p, params.length);
    let (s, c) = x[1].sin_cos();
    let a = mc + mp * s * s;
    (1.0 / a, -c / (lp * a))
}

fn equilibrium_state(v: f64) -> DVector<f64> {
    DVector::from_vec(vec![v, PI, 0.0, 0.0])
}

fn prestabilizer(params: &PendulumParams, x: &DVector<f64>, v: f64) -> f64 {
    let xb = equilibrium_state(v);
    let mut u = 0.0;
    for i in 0..4 {
        u -= params.k_pi[i] * (x[i] - xb[i]);
    }
    u
}

// Jacobian of the open-loop acceleration block at fixed input value.
// Rows: d(qdd1)/d(theta, dtheta) and d(qdd2)/d(theta, dtheta), plus the
// input sensitivities d(qdd)/du.
fn accel_partials(params: &PendulumParams, x: &DVector<f64>, u: f64) -> [f64; 6] {
    let (mc, mp, lp, g) = (params.m_c, params.m_p, params.length, params.g);
    let (s, c) = x[1].sin_cos();
    let dth = x[3];
    let a = mc + mp * s * s;
    let da = 2.0 * mp * s * c;

    let n1 = u + mp * lp * dth * dth * s + mp * g * s * c;
    let dn1_dth = mp * lp * dth * dth * c + mp * g * (c * c - s * s);
    let df1_dth = (dn1_dth * a - n1 * da) / (a * a);
    let df1_ddth = 2.0 * mp * lp * dth * s / a;
    let df1_du = 1.0 / a;

    let n2 = c * u + mp * lp * dth * dth * s * c + (mc + mp) * g * s;
    let dn2_dth = -s * u + mp * lp * dth * dth * (c * c - s * s) + (mc + mp) * g * c;
    let df2_dth = -(dn2_dth * a - n2 * da) / (lp * a * a);
    let df2_ddth = -2.0 * mp * dth * s * c / a;
    let df2_du = -c / (lp * a);

    [df1_dth, df1_ddth, df1_du, df2_dth, df2_ddth, df2_du]
}

/// The control-affine cart-pole with the LQR prestabilizer, analytic
/// closed-loop Jacobians, and the input box.
pub fn make_pendulum_model(params: &PendulumParams) -> Result<SystemModel> {
    params.validate()?;
    let dims = Dims::new(4, 1, 1, 6);

    let p_f = params.clone();
    let f = Arc::new(move |x: &DVector<f64>| {
        let (f1, f2) = accel_drift(&p_f, x);
        DVector::from_vec(vec![x[2], x[3], f1, f2])
    });
    let p_g = params.clone();
    let g = Arc::new(move |x: &DVector<f64>| {
        let (g1, g2) = accel_input_dir(&p_g, x);
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, g1, g2])
    });
    let p_pi = params.clone();
    let pi = Arc::new(move |x: &DVector<f64>, v: &DVector<f64>| {
        DVector::from_element(1, prestabilizer(&p_pi, x, v[0]))
    });
    let x_bar = Arc::new(|v: &DVector<f64>| equilibrium_state(v[0]));
    let u_bar = Arc::new(|_v: &DVector<f64>| DVector::zeros(1));

    let p_a = params.clone();
    let a_pi = Arc::new(move |x: &DVector<f64>, v: &DVector<f64>| {
        let u = prestabilizer(&p_a, x, v[0]);
        let [df1_dth, df1_ddth, df1_du, df2_dth, df2_ddth, df2_du] = accel_partials(&p_a, x, u);
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        a[(2, 1)] = df1_dth;
        a[(2, 3)] = df1_ddth;
        a[(3, 1)] = df2_dth;
        a[(3, 3)] = df2_ddth;
        // Close the loop: u = pi(x, v) adds -g_u(x) K_pi.
        for j in 0..4 {
            a[(2, j)] -= df1_du * p_a.k_pi[j];
            a[(3, j)] -= df2_du * p_a.k_pi[j];
        }
        a
    });
    let p_b = params.clone();
    let b_pi = Arc::new(move |x: &DVector<f64>, v: &DVector<f64>| {
        let u = prestabilizer(&p_b, x, v[0]);
        let parts = accel_partials(&p_b, x, u);
        // d(pi)/dv = K_pi * d(x_bar)/dv = K_pi[0].
        let dpi_dv = p_b.k_pi[0];
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, parts[2] * dpi_dv, parts[5] * dpi_dv])
    });

    let model = SystemModel::new(dims, f, g, pi, x_bar, u_bar)
        .with_analytic_jacobians(a_pi, b_pi)
        .with_xbar_jacobian(Arc::new(|_v: &DVector<f64>| {
            DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0])
        }))
        .with_input_box(
            DVector::from_element(1, -params.u_max),
            DVector::from_element(1, params.u_max),
        );
    Ok(model)
}

/// The six-row constraint map: cart position box, angle box around upright,
/// and the input box pulled back through the prestabilizer.
pub fn pendulum_constraints(params: &PendulumParams) -> ConstraintMap {
    let p_c = params.clone();
    let c = Arc::new(move |x: &DVector<f64>, v: &DVector<f64>| {
        let u = prestabilizer(&p_c, x, v[0]);
        DVector::from_vec(vec![
            p_c.x_max - x[0],
            p_c.x_max + x[0],
            p_c.theta_max + PI - x[1],
            p_c.theta_max - PI + x[1],
            p_c.u_max - u,
            p_c.u_max + u,
        ])
    });

    // All six rows are affine, so the Jacobians are constant.
    let mut cx = DMatrix::zeros(6, 4);
    cx[(0, 0)] = -1.0;
    cx[(1, 0)] = 1.0;
    cx[(2, 1)] = -1.0;
    cx[(3, 1)] = 1.0;
    for j in 0..4 {
        cx[(4, j)] = params.k_pi[j];
        cx[(5, j)] = -params.k_pi[j];
    }
    let mut cv = DMatrix::zeros(6, 1);
    cv[(4, 0)] = -params.k_pi[0];
    cv[(5, 0)] = params.k_pi[0];

    let c_x = Arc::new(move |_x: &DVector<f64>, _v: &DVector<f64>| cx.clone());
    let c_v = Arc::new(move |_x: &DVector<f64>, _v: &DVector<f64>| cv.clone());
    // Rows 0..4 bound the cart position and pole angle; rows 4 and 5 bound the
    // force the backup law would demand, which is not an applied plant signal.
    ConstraintMap::new(6, c, c_x, c_v).with_state_rows(vec![0, 1, 2, 3])
}

/// The benchmark scenario: drive the cart from 0 to r = 4 while keeping the
/// pendulum within theta_max of upright and the force within +-u_max.
pub fn benchmark_scenario() -> Scenario {
    let params = PendulumParams::default();
    Scenario {
        model: MODEL_NAME.to_string(),
        params: None,
        x0: DVector::from_vec(vec![0.0, PI, 0.0, 0.0]),
        v0: DVector::from_element(1, 0.0),
        kappa_gain: vec![params.k_kappa.to_vec()],
        rho_gain: 1.0,
        r: DVector::from_element(1, params.r),
        t_end: 15.0,
        control_dt: 0.005,
        filter: FilterConfig {
            t_horizon: 10.0,
            alpha_path: AlphaFn::linear(100.0),
            alpha_terminal: AlphaFn::linear(400.0),
            eta: 0.1,
            // A dense prediction grid keeps the sampled-data excursion at the
            // theta limit below 1e-4; the adaptive default is too coarse there.
            integrator: IntegratorConfig {
                max_step: Some(0.005),
                ..IntegratorConfig::default()
            },
            fallback: FallbackMode::On,
            terminal: TerminalConfig::default(),
        },
    }
}

/// Build a registered model and its constraint map by name, applying any
/// parameter overrides from the scenario document.
pub fn build_plant(
    name: &str,
    params_json: Option<&serde_json::Value>,
) -> Result<(SystemModel, ConstraintMap)> {
    match name {
        MODEL_NAME => {
            let params: PendulumParams = match params_json {
                Some(value) => serde_json::from_value(value.clone())
                    .map_err(|e| Error::InvalidConfig(format!("bad pendulum params: {e}")))?,
                None => PendulumParams::default(),
            };
            params.validate()?;
            let model = make_pendulum_model(&params)?;
            let cmap = pendulum_constraints(&params);
            Ok((model, cmap))
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}
