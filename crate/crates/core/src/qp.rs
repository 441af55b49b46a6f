//! Dense strictly convex QP behind the safety filter:
//! minimize `|u - target_u|^2 + eta |w - target_w|^2` subject to the CBF rows
//! and a box on `u`. Solved with a dual active-set method starting from the
//! unconstrained minimum; infeasibility is certified, never softened.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dsm::CbfRow;
use crate::model::dvec_serde;

/// Row feasibility tolerance at the reported solution.
pub const ROW_TOL: f64 = 1e-9;
/// KKT residual bound required for an `Optimal` verdict.
pub const KKT_TOL: f64 = 1e-8;
/// Default iteration cap.
pub const MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIter => "max_iter",
        };
        f.write_str(s)
    }
}

mod bounds_serde {
    use nalgebra::DVector;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Bound {
        Num(f64),
        Named(String),
    }

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        let items: Vec<Bound> = v
            .iter()
            .map(|&x| {
                if x == f64::INFINITY {
                    Bound::Named("inf".into())
                } else if x == f64::NEG_INFINITY {
                    Bound::Named("-inf".into())
                } else {
                    Bound::Num(x)
                }
            })
            .collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let items = Vec::<Bound>::deserialize(d)?;
        let mut out = Vec::with_capacity(items.len());
        for b in items {
            out.push(match b {
                Bound::Num(x) => x,
                Bound::Named(s) => match s.as_str() {
                    "inf" | "+inf" => f64::INFINITY,
                    "-inf" => f64::NEG_INFINITY,
                    other => return Err(D::Error::custom(format!("bad bound {other:?}"))),
                },
            });
        }
        Ok(DVector::from_vec(out))
    }
}

/// The safety-filter QP data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpProblem {
    #[serde(with = "dvec_serde")]
    pub target_u: DVector<f64>,
    #[serde(with = "dvec_serde")]
    pub target_w: DVector<f64>,
    pub eta: f64,
    pub rows: Vec<CbfRow>,
    #[serde(with = "bounds_serde")]
    pub u_lo: DVector<f64>,
    #[serde(with = "bounds_serde")]
    pub u_hi: DVector<f64>,
}

impl QpProblem {
    /// Problem with no rows and an unbounded input box.
    pub fn new(target_u: DVector<f64>, target_w: DVector<f64>, eta: f64) -> Self {
        assert!(eta > 0.0, "eta must be positive");
        let m = target_u.len();
        QpProblem {
            target_u,
            target_w,
            eta,
            rows: Vec::new(),
            u_lo: DVector::from_element(m, f64::NEG_INFINITY),
            u_hi: DVector::from_element(m, f64::INFINITY),
        }
    }

    pub fn with_box(mut self, u_lo: DVector<f64>, u_hi: DVector<f64>) -> Self {
        assert_eq!(u_lo.len(), self.target_u.len());
        assert_eq!(u_hi.len(), self.target_u.len());
        assert!(u_lo.iter().zip(u_hi.iter()).all(|(l, h)| l <= h), "u_lo must not exceed u_hi");
        self.u_lo = u_lo;
        self.u_hi = u_hi;
        self
    }

    pub fn with_rows(mut self, rows: Vec<CbfRow>) -> Self {
        self.rows = rows;
        self
    }

    pub fn objective(&self, u: &DVector<f64>, w: &DVector<f64>) -> f64 {
        (u - &self.target_u).norm_squared() + self.eta * (w - &self.target_w).norm_squared()
    }
}

/// Solver outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    #[serde(with = "dvec_serde")]
    pub u: DVector<f64>,
    #[serde(with = "dvec_serde")]
    pub w: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    /// Indices into `problem.rows` active at the solution (box activity is not
    /// listed; it is visible from `u` itself).
    pub active_set: Vec<usize>,
}

// One linear inequality n' z >= r over the stacked variable z = (u, w).
struct Constraint {
    normal: DVector<f64>,
    rhs: f64,
    norm: f64,
    row_index: Option<usize>,
}

fn gather_constraints(problem: &QpProblem) -> Vec<Constraint> {
    let m = problem.target_u.len();
    let l = problem.target_w.len();
    let nz = m + l;
    let mut cons = Vec::with_capacity(problem.rows.len() + 2 * m);
    for (idx, row) in problem.rows.iter().enumerate() {
        assert_eq!(row.a_u.len(), m, "row {idx} has wrong a_u length");
        assert_eq!(row.a_w.len(), l, "row {idx} has wrong a_w length");
        let mut normal = DVector::zeros(nz);
        normal.rows_mut(0, m).copy_from(&row.a_u);
        normal.rows_mut(m, l).copy_from(&row.a_w);
        let norm = normal.norm();
        cons.push(Constraint { normal, rhs: row.r, norm, row_index: Some(idx) });
    }
    for j in 0..m {
        if problem.u_lo[j].is_finite() {
            let mut normal = DVector::zeros(nz);
            normal[j] = 1.0;
            cons.push(Constraint { normal, rhs: problem.u_lo[j], norm: 1.0, row_index: None });
        }
        if problem.u_hi[j].is_finite() {
            let mut normal = DVector::zeros(nz);
            normal[j] = -1.0;
            cons.push(Constraint { normal, rhs: -problem.u_hi[j], norm: 1.0, row_index: None });
        }
    }
    cons
}

/// Solve the QP with the default iteration cap.
pub fn solve(problem: &QpProblem) -> QpSolution {
    solve_capped(problem, MAX_ITER)
}

/// Solve with an explicit iteration cap.
pub fn solve_capped(problem: &QpProblem, max_iter: usize) -> QpSolution {
    let m = problem.target_u.len();
    let l = problem.target_w.len();
    let nz = m + l;
    assert!(problem.eta > 0.0, "eta must be positive");

    // Diagonal Hessian of the objective and its inverse.
    let mut h_diag = DVector::zeros(nz);
    for i in 0..m {
        h_diag[i] = 2.0;
    }
    for i in m..nz {
        h_diag[i] = 2.0 * problem.eta;
    }
    let h_inv = h_diag.map(|d| 1.0 / d);

    let cons = gather_constraints(problem);

    // Constant rows with an unsatisfiable right-hand side are an immediate
    // infeasibility certificate.
    for c in &cons {
        if c.norm == 0.0 && c.rhs > ROW_TOL {
            return finish(problem, &problem.target_u, &problem.target_w, QpStatus::Infeasible, &[], &[], &cons, m, l);
        }
    }

    let mut z = DVector::zeros(nz);
    z.rows_mut(0, m).copy_from(&problem.target_u);
    z.rows_mut(m, l).copy_from(&problem.target_w);

    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut status = QpStatus::MaxIter;

    'outer: for _iter in 0..max_iter {
        // Most violated constraint, normalized; ties break to the lowest id.
        let mut worst = ROW_TOL;
        let mut pick = None;
        for (ci, c) in cons.iter().enumerate() {
            if c.norm == 0.0 {
                continue;
            }
            let violation = c.rhs - c.normal.dot(&z);
            let scaled = violation / c.norm;
            if violation > ROW_TOL && scaled > worst {
                worst = scaled;
                pick = Some(ci);
            }
        }
        let Some(q) = pick else {
            status = QpStatus::Optimal;
            break;
        };

        let nq = cons[q].normal.clone();
        let mut lam_q = 0.0;

        // Inner loop: take partial steps (dropping blockers) until a full step
        // reaches constraint q, or dual unboundedness proves infeasibility.
        loop {
            let na = active.len();
            let (dz, dlam) = if na == 0 {
                (h_inv.component_mul(&nq), DVector::zeros(0))
            } else {
                let mut nmat = DMatrix::zeros(nz, na);
                for (col, &ci) in active.iter().enumerate() {
                    nmat.set_column(col, &cons[ci].normal);
                }
                let hin = DMatrix::from_fn(nz, na, |i, j| h_inv[i] * nmat[(i, j)]);
                let mmat = nmat.transpose() * &hin;
                let rhs = hin.transpose() * &nq;
                let mu = mmat.lu().solve(&rhs).expect("active normals are independent");
                let dz = h_inv.component_mul(&(&nq - &nmat * &mu));
                (dz, mu)
            };

            let denom = nq.dot(&dz);
            let scale = nq.iter().zip(h_inv.iter()).map(|(a, hi)| a * a * hi).sum::<f64>();
            if denom <= 1e-12 * scale {
                // q's normal lies in the span of the active normals.
                let mut t1 = f64::INFINITY;
                let mut drop_at = None;
                for (j, &dl) in dlam.iter().enumerate() {
                    if dl > 1e-14 {
                        let ratio = lambda[j] / dl;
                        if ratio < t1 {
                            t1 = ratio;
                            drop_at = Some(j);
                        }
                    }
                }
                let Some(jd) = drop_at else {
                    status = QpStatus::Infeasible;
                    break 'outer;
                };
                for (j, lam) in lambda.iter_mut().enumerate() {
                    *lam -= t1 * dlam[j];
                }
                lam_q += t1;
                active.remove(jd);
                lambda.remove(jd);
                continue;
            }

            let violation = cons[q].rhs - nq.dot(&z);
            let t2 = violation / denom;
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (j, &dl) in dlam.iter().enumerate() {
                if dl > 1e-14 {
                    let ratio = lambda[j] / dl;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(j);
                    }
                }
            }
            let t = t1.min(t2);
            z += &dz * t;
            for (j, lam) in lambda.iter_mut().enumerate() {
                *lam -= t * dlam[j];
            }
            lam_q += t;
            if t2 <= t1 {
                active.push(q);
                lambda.push(lam_q);
                break;
            }
            let jd = drop_at.expect("partial step implies a blocking constraint");
            active.remove(jd);
            lambda.remove(jd);
        }
    }

    let mut u = z.rows(0, m).into_owned();
    let w = z.rows(m, l).into_owned();
    if status == QpStatus::Optimal {
        // The box is honored exactly; active-set arithmetic can leave dust.
        for j in 0..m {
            u[j] = u[j].clamp(problem.u_lo[j], problem.u_hi[j]);
        }
    }
    finish(problem, &u, &w, status, &active, &lambda, &cons, m, l)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &QpProblem,
    u: &DVector<f64>,
    w: &DVector<f64>,
    status: QpStatus,
    active: &[usize],
    lambda: &[f64],
    cons: &[Constraint],
    m: usize,
    l: usize,
) -> QpSolution {
    let nz = m + l;
    let mut z = DVector::zeros(nz);
    z.rows_mut(0, m).copy_from(u);
    z.rows_mut(m, l).copy_from(w);

    let mut kkt = 0.0_f64;
    if status == QpStatus::Optimal {
        // Stationarity: H (z - z0) = sum lambda_c n_c.
        let mut grad = DVector::zeros(nz);
        for i in 0..m {
            grad[i] = 2.0 * (z[i] - problem.target_u[i]);
        }
        for i in 0..l {
            grad[m + i] = 2.0 * problem.eta * (z[m + i] - problem.target_w[i]);
        }
        for (j, &ci) in active.iter().enumerate() {
            grad -= cons[ci].normal.scale(lambda[j]);
        }
        kkt = kkt.max(grad.amax());
        for (j, &ci) in active.iter().enumerate() {
            let slack = cons[ci].normal.dot(&z) - cons[ci].rhs;
            kkt = kkt.max((lambda[j] * slack).abs());
            kkt = kkt.max((-lambda[j]).max(0.0));
        }
        for c in cons {
            let slack = c.normal.dot(&z) - c.rhs;
            kkt = kkt.max(-slack);
        }
    }

    let final_status = if status == QpStatus::Optimal && kkt > KKT_TOL {
        QpStatus::MaxIter
    } else {
        status
    };
    let mut active_rows: Vec<usize> =
        active.iter().filter_map(|&ci| cons[ci].row_index).collect();
    active_rows.sort_unstable();

    QpSolution {
        u: u.clone(),
        w: w.clone(),
        status: final_status,
        kkt_residual: kkt,
        active_set: active_rows,
    }
}
