//! Exact primal-dual solver for the two-variable CBF-QP
//!
//! ```text
//!     minimize    ||u - u_hat||^2
//!     subject to  a_k^T u <= b_k,   k = 1..M+4
//! ```
//!
//! The decision variable lives in R^2, so a nondegenerate optimum has at most
//! two active rows. Working sets of size 0, 1 and 2 are enumerated in a fixed
//! order and the first one satisfying the KKT conditions is returned. The
//! multipliers follow the stationarity convention
//! `u* = u_hat - 1/2 sum_k mu_k a_k`.

use serde::{Deserialize, Serialize};

use crate::cbf::ConstraintRow;
use crate::error::{Error, Result};
use crate::vec2::Vec2;

/// Relative tolerance for active-set membership, `|a^T u - b| <= tol (1 + |b|)`.
pub const ACTIVE_TOL: f64 = 1e-7;
/// Phase-I emptiness threshold on the best achievable minimum slack.
pub const INFEASIBLE_SLACK: f64 = -1e-9;

const FEAS_TOL: f64 = 1e-10;
const MULT_TOL: f64 = 1e-10;
const SINGULAR_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub u_hat: Vec2,
    pub rows: Vec<ConstraintRow>,
}

impl QpProblem {
    pub fn new(u_hat: Vec2, rows: Vec<ConstraintRow>) -> Self {
        Self { u_hat, rows }
    }

    pub fn objective(&self, u: Vec2) -> f64 {
        (u - self.u_hat).norm_sq()
    }

    pub fn is_feasible(&self, u: Vec2, tol: f64) -> bool {
        self.rows.iter().all(|r| r.violation(u) <= tol * (1.0 + r.b_hat.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub u_star: Vec2,
    /// One multiplier per row, in row order.
    pub mu: Vec<f64>,
    /// Rows with `a^T u* = b` within [`ACTIVE_TOL`].
    pub active_set: Vec<usize>,
    /// Rows whose equality system produced the certificate.
    pub working_set: Vec<usize>,
    pub status: QpStatus,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

fn feasible_with(rows: &[ConstraintRow], u: Vec2) -> bool {
    rows.iter()
        .all(|r| r.violation(u) <= FEAS_TOL * (1.0 + r.b_hat.abs() + r.a.norm() * u.norm()))
}

fn solve2(m: [[f64; 2]; 2], rhs: [f64; 2]) -> Option<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = (m[0][0].abs() + m[0][1].abs()) * (m[1][0].abs() + m[1][1].abs());
    if det.abs() <= SINGULAR_TOL * scale.max(f64::MIN_POSITIVE) {
        return None;
    }
    Some([
        (rhs[0] * m[1][1] - m[0][1] * rhs[1]) / det,
        (m[0][0] * rhs[1] - rhs[0] * m[1][0]) / det,
    ])
}

/// Candidate from a working set, or `None` when its system is singular.
fn candidate(problem: &QpProblem, set: &[usize]) -> Option<(Vec2, Vec<f64>)> {
    let u_hat = problem.u_hat;
    match *set {
        [] => Some((u_hat, vec![])),
        [k] => {
            let r = &problem.rows[k];
            let nn = r.a.norm_sq();
            if nn == 0.0 {
                return None;
            }
            let mu = 2.0 * (r.a.dot(u_hat) - r.b_hat) / nn;
            Some((u_hat - r.a * (0.5 * mu), vec![mu]))
        }
        [k, l] => {
            let (rk, rl) = (&problem.rows[k], &problem.rows[l]);
            let u = solve2([[rk.a.x, rk.a.y], [rl.a.x, rl.a.y]], [rk.b_hat, rl.b_hat])?;
            let u = Vec2::new(u[0], u[1]);
            // u_hat - u = 1/2 (mu_k a_k + mu_l a_l)
            let d = (u_hat - u) * 2.0;
            let mu = solve2([[rk.a.x, rl.a.x], [rk.a.y, rl.a.y]], [d.x, d.y])?;
            Some((u, mu.to_vec()))
        }
        _ => unreachable!("working sets have at most two rows"),
    }
}

fn working_sets(m: usize) -> impl Iterator<Item = Vec<usize>> {
    std::iter::once(vec![])
        .chain((0..m).map(|k| vec![k]))
        .chain((0..m).flat_map(move |k| ((k + 1)..m).map(move |l| vec![k, l])))
}

/// Solves the QP. Infeasible problems come back with
/// `status == Infeasible` and the Phase-I maximin point as `u_star`.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    if !problem.u_hat.is_finite() || problem.rows.iter().any(|r| !r.a.is_finite() || !r.b_hat.is_finite()) {
        return Err(Error::Solver("non-finite problem data".into()));
    }
    let m = problem.rows.len();
    let mu_scale = 1.0 + problem.u_hat.norm();
    for set in working_sets(m) {
        let Some((u, mu_set)) = candidate(problem, &set) else {
            continue;
        };
        if !u.is_finite() || mu_set.iter().any(|&mu| mu < -MULT_TOL * mu_scale) {
            continue;
        }
        if !feasible_with(&problem.rows, u) {
            continue;
        }
        let mut mu = vec![0.0; m];
        for (&k, &val) in set.iter().zip(&mu_set) {
            mu[k] = val.max(0.0);
        }
        let active_set = active_rows(&problem.rows, u);
        return Ok(QpSolution { u_star: u, mu, active_set, working_set: set, status: QpStatus::Optimal });
    }

    let (u, slack) = max_min_slack(&problem.rows);
    if slack < INFEASIBLE_SLACK {
        return Ok(QpSolution {
            u_star: u,
            mu: vec![0.0; m],
            active_set: vec![],
            working_set: vec![],
            status: QpStatus::Infeasible,
        });
    }
    Err(Error::Solver(format!(
        "no working set certified optimality although the feasible set is nonempty (min slack {slack:.3e})"
    )))
}

fn active_rows(rows: &[ConstraintRow], u: Vec2) -> Vec<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| r.violation(u).abs() <= ACTIVE_TOL * (1.0 + r.b_hat.abs()))
        .map(|(k, _)| k)
        .collect()
}

fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d.abs() < SINGULAR_TOL {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for r in 0..3 {
            mc[r][c] = rhs[r];
        }
        *o = det(&mc) / d;
    }
    Some(out)
}

/// Phase-I probe: maximizes `min_k (b_k - a_k^T u)` over `u`. The maximum of
/// a concave piecewise-linear function in two variables sits where three
/// slack planes meet, so all row triples are enumerated.
pub fn max_min_slack(rows: &[ConstraintRow]) -> (Vec2, f64) {
    let min_slack = |u: Vec2| rows.iter().map(|r| -r.violation(u)).fold(f64::INFINITY, f64::min);
    let mut best = (Vec2::ZERO, min_slack(Vec2::ZERO));
    let m = rows.len();
    for i in 0..m {
        for j in (i + 1)..m {
            for k in (j + 1)..m {
                let (a, b, c) = (&rows[i], &rows[j], &rows[k]);
                // a^T u + t = b
                let Some(x) = solve3(
                    [[a.a.x, a.a.y, 1.0], [b.a.x, b.a.y, 1.0], [c.a.x, c.a.y, 1.0]],
                    [a.b_hat, b.b_hat, c.b_hat],
                ) else {
                    continue;
                };
                let u = Vec2::new(x[0], x[1]);
                let s = min_slack(u);
                if s > best.1 {
                    best = (u, s);
                }
            }
        }
    }
    best
}

/// Residuals of the four KKT conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `||u* - u_hat + 1/2 sum mu_k a_k||`
    pub stationarity: f64,
    /// `max(0, max_k a_k^T u* - b_k)`
    pub primal: f64,
    /// `max(0, max_k -mu_k)`
    pub dual: f64,
    /// `max_k |mu_k (a_k^T u* - b_k)|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

pub fn verify_kkt(problem: &QpProblem, solution: &QpSolution) -> KktResiduals {
    verify_kkt_parts(problem, solution.u_star, &solution.mu)
}

/// KKT residuals for an arbitrary primal-dual pair.
pub fn verify_kkt_parts(problem: &QpProblem, u: Vec2, mu: &[f64]) -> KktResiduals {
    let force: Vec2 = problem.rows.iter().zip(mu).map(|(r, &m)| r.a * m).sum();
    let stationarity = (u - problem.u_hat + force * 0.5).norm();
    let primal = problem.rows.iter().map(|r| r.violation(u)).fold(0.0, f64::max);
    let dual = mu.iter().map(|&m| -m).fold(0.0, f64::max);
    let complementarity = problem
        .rows
        .iter()
        .zip(mu)
        .map(|(r, &m)| (m * r.violation(u)).abs())
        .fold(0.0, f64::max);
    KktResiduals { stationarity, primal, dual, complementarity }
}
