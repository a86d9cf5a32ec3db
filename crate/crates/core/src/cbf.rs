//! Pairwise safety index, its constraint bound with kappa(h) = h^3, and the
//! per-robot linear inequality rows that make up the CBF-QP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pd_control, GoalSpec, Params, RobotState, WorldState};
use crate::qp::QpProblem;
use crate::vec2::Vec2;

/// Numerical width of the safety boundary `||dp|| = Ds`.
pub const EPS_NUM: f64 = 1e-9;

/// Control axis of a box row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Origin of a constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RowKind {
    /// Collision avoidance with the given neighbor.
    Neighbor { j: usize },
    /// Acceleration limit `sign * u[axis] <= alpha`.
    Box { axis: Axis, positive: bool },
}

/// One linear inequality `a^T u <= b_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub a: Vec2,
    pub b_hat: f64,
    pub kind: RowKind,
}

impl ConstraintRow {
    pub fn neighbor(&self) -> Option<usize> {
        match self.kind {
            RowKind::Neighbor { j } => Some(j),
            RowKind::Box { .. } => None,
        }
    }

    /// `a^T u - b_hat`; positive means violated.
    pub fn violation(&self, u: Vec2) -> f64 {
        self.a.dot(u) - self.b_hat
    }

    /// The four box rows in the fixed order +x, +y, -x, -y.
    pub fn box_rows(alpha: f64) -> [ConstraintRow; 4] {
        let row = |a: Vec2, axis, positive| ConstraintRow {
            a,
            b_hat: alpha,
            kind: RowKind::Box { axis, positive },
        };
        [
            row(Vec2::new(1.0, 0.0), Axis::X, true),
            row(Vec2::new(0.0, 1.0), Axis::Y, true),
            row(Vec2::new(-1.0, 0.0), Axis::X, false),
            row(Vec2::new(0.0, -1.0), Axis::Y, false),
        ]
    }
}

/// Clearances within a few ulps of zero are rounding noise of `||dp||`; the
/// square root in `h` would otherwise amplify them to `~sqrt(eps)`.
fn snap(s: f64, scale: f64) -> f64 {
    if s.abs() <= 8.0 * f64::EPSILON * scale {
        0.0
    } else {
        s
    }
}

/// Relative geometry of a robot pair, with the ids used in diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct PairGeometry {
    pub i: usize,
    pub j: usize,
    /// `p_i - p_j`
    pub dp: Vec2,
    /// `v_i - v_j`
    pub dv: Vec2,
    /// `alpha_i + alpha_j`
    pub alpha_sum: f64,
    pub ds: f64,
}

impl PairGeometry {
    pub fn new(i: usize, zi: &RobotState, j: usize, zj: &RobotState, params: &Params) -> Self {
        Self {
            i,
            j,
            dp: zi.p - zj.p,
            dv: zi.v - zj.v,
            alpha_sum: params.alpha(i) + params.alpha(j),
            ds: params.ds,
        }
    }

    pub fn distance(&self) -> f64 {
        self.dp.norm()
    }

    /// `||dp|| - Ds`, validated: returns the clearance clamped to zero inside
    /// the numerical boundary band and errors on penetration.
    fn clearance(&self) -> Result<f64> {
        let r = self.distance();
        if r == 0.0 {
            return Err(Error::CoincidentRobots { i: self.i, j: self.j });
        }
        let s = r - self.ds;
        if s < -EPS_NUM {
            return Err(Error::SafetyViolated { i: self.i, j: self.j, depth: -s });
        }
        Ok(snap(s, r.max(self.ds)).max(0.0))
    }

    /// Radial relative speed `dp^T dv / ||dp||`.
    pub fn radial_speed(&self) -> f64 {
        self.dp.dot(self.dv) / self.distance()
    }
}

/// `h_ij = sqrt(2 (alpha_i + alpha_j)(||dp|| - Ds)) + dp^T dv / ||dp||`.
pub fn safety_index(g: &PairGeometry) -> Result<f64> {
    let s = g.clearance()?;
    Ok((2.0 * g.alpha_sum * s).sqrt() + g.radial_speed())
}

/// Continuous extension of the safety index to penetrating states,
/// `sign(s) sqrt(2 A |s|) + dp^T dv / ||dp||`. Used for auditing logs only.
pub fn safety_index_signed(g: &PairGeometry) -> Result<f64> {
    let r = g.distance();
    if r == 0.0 {
        return Err(Error::CoincidentRobots { i: g.i, j: g.j });
    }
    let s = snap(r - g.ds, r.max(g.ds));
    Ok(s.signum() * (2.0 * g.alpha_sum * s.abs()).sqrt() + g.radial_speed())
}

/// Right-hand side `b_ij` of `-dp^T du <= b_ij`, equivalent to
/// `dh/dt >= -h^3`.
pub fn constraint_bound(g: &PairGeometry) -> Result<f64> {
    let s = g.clearance()?;
    let r = g.distance();
    let pv = g.dp.dot(g.dv);
    let h = (2.0 * g.alpha_sum * s).sqrt() + pv / r;
    let middle = if s < EPS_NUM {
        // 0/0 on the boundary; defined only when the numerator vanishes too
        if pv.abs() < EPS_NUM {
            0.0
        } else {
            return Err(Error::BoundarySingularity { i: g.i, j: g.j });
        }
    } else {
        g.alpha_sum * pv / (2.0 * g.alpha_sum * s).sqrt()
    };
    Ok(r * h.powi(3) + middle + g.dv.norm_sq() - pv * pv / (r * r))
}

/// Splits the pair constraint between the two robots in proportion to their
/// acceleration limits. Returns `(row for i, row for j)`.
pub fn decentralized_rows(g: &PairGeometry, alpha_i: f64, alpha_j: f64) -> Result<(ConstraintRow, ConstraintRow)> {
    let b = constraint_bound(g)?;
    let total = alpha_i + alpha_j;
    Ok((
        ConstraintRow {
            a: -g.dp,
            b_hat: alpha_i / total * b,
            kind: RowKind::Neighbor { j: g.j },
        },
        ConstraintRow {
            a: g.dp,
            b_hat: alpha_j / total * b,
            kind: RowKind::Neighbor { j: g.i },
        },
    ))
}

/// Builds robot `i`'s QP: neighbor rows by ascending neighbor id, then the
/// four box rows.
pub fn assemble_qp(i: usize, world: &WorldState, goals: &GoalSpec, params: &Params) -> Result<QpProblem> {
    let zi = &world.robots[i];
    let mut rows = Vec::with_capacity(world.len() + 3);
    for (j, zj) in world.robots.iter().enumerate() {
        if j == i {
            continue;
        }
        let g = PairGeometry::new(i, zi, j, zj, params);
        let (row_i, _) = decentralized_rows(&g, params.alpha(i), params.alpha(j))?;
        rows.push(row_i);
    }
    rows.extend(ConstraintRow::box_rows(params.alpha(i)));
    Ok(QpProblem::new(pd_control(zi, goals.pd[i], params), rows))
}

/// Signed safety index for every pair `(i, j)`, `i < j`, ascending.
pub fn pair_safety_indices(world: &WorldState, params: &Params) -> Result<Vec<f64>> {
    world
        .pairs()
        .map(|(i, j)| safety_index_signed(&PairGeometry::new(i, &world.robots[i], j, &world.robots[j], params)))
        .collect()
}
