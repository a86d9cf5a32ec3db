//! Deadlock detection, deadlock-set membership tests and the analytical
//! families of two- and three-robot deadlock states.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_6, PI};

use serde::{Deserialize, Serialize};

use crate::cbf::{assemble_qp, safety_index, PairGeometry};
use crate::error::{Error, Result};
use crate::model::{goal_direction, GoalSpec, Params, RobotState, WorldState};
use crate::qp::{solve_qp, QpProblem, QpSolution};
use crate::vec2::Vec2;

/// Numerical realization of the exact equalities in the deadlock definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadlockThresholds {
    /// Bound on `||u*||` (m/s^2).
    pub eps_u: f64,
    /// Bound on `||v||` (m/s).
    pub eps_v: f64,
    /// Minimum distance to the goal (m).
    pub eps_goal: f64,
    /// Minimum neighbor multiplier.
    pub eps_mu: f64,
    /// Geometric tolerance for distance tests (m).
    pub geom_tol: f64,
}

impl DeadlockThresholds {
    /// Defaults scaled by the problem data.
    pub fn for_params(params: &Params) -> Self {
        Self {
            eps_u: 1e-3 * params.kp * params.ds,
            eps_v: 1e-3,
            eps_goal: 0.1 * params.ds,
            eps_mu: 1e-6,
            geom_tol: 1e-6 * params.ds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_u", self.eps_u),
            ("eps_v", self.eps_v),
            ("eps_goal", self.eps_goal),
            ("eps_mu", self.eps_mu),
            ("geom_tol", self.geom_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("threshold {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveMultiplier {
    pub row: usize,
    pub mu: f64,
    /// Neighbor id, `None` for box rows.
    pub neighbor: Option<usize>,
}

/// Per-robot deadlock verdict together with every measured quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadlockReport {
    pub robot: usize,
    pub verdict: bool,
    pub u_star_norm: f64,
    pub u_hat_norm: f64,
    pub v_norm: f64,
    pub goal_dist: f64,
    pub active_multipliers: Vec<ActiveMultiplier>,
    /// `||u_hat - 1/2 sum_{k active} mu_k a_k||`
    pub force_balance_residual: f64,
}

impl DeadlockReport {
    pub fn max_neighbor_mu(&self) -> f64 {
        self.active_multipliers
            .iter()
            .filter(|m| m.neighbor.is_some())
            .map(|m| m.mu)
            .fold(0.0, f64::max)
    }
}

/// Tests the deadlock conditions for robot `i` against its solved QP.
pub fn detect_deadlock(
    i: usize,
    world: &WorldState,
    goals: &GoalSpec,
    problem: &QpProblem,
    solution: &QpSolution,
    thresholds: &DeadlockThresholds,
) -> DeadlockReport {
    let z = &world.robots[i];
    let active_multipliers: Vec<ActiveMultiplier> = solution
        .active_set
        .iter()
        .map(|&k| ActiveMultiplier { row: k, mu: solution.mu[k], neighbor: problem.rows[k].neighbor() })
        .collect();
    let force: Vec2 = active_multipliers.iter().map(|m| problem.rows[m.row].a * m.mu).sum();
    let mut report = DeadlockReport {
        robot: i,
        verdict: false,
        u_star_norm: solution.u_star.norm(),
        u_hat_norm: problem.u_hat.norm(),
        v_norm: z.v.norm(),
        goal_dist: (z.p - goals.pd[i]).norm(),
        active_multipliers,
        force_balance_residual: (problem.u_hat - force * 0.5).norm(),
    };
    report.verdict = solution.is_optimal()
        && report.u_star_norm <= thresholds.eps_u
        && report.v_norm <= thresholds.eps_v
        && report.goal_dist >= thresholds.eps_goal
        && report.max_neighbor_mu() > thresholds.eps_mu;
    report
}

/// True iff every robot is in deadlock.
pub fn system_deadlock(reports: &[DeadlockReport]) -> bool {
    !reports.is_empty() && reports.iter().all(|r| r.verdict)
}

/// Per-robot QPs, solutions and deadlock reports for one world state.
#[derive(Debug, Clone)]
pub struct WorldAnalysis {
    pub problems: Vec<QpProblem>,
    pub solutions: Vec<QpSolution>,
    pub reports: Vec<DeadlockReport>,
}

impl WorldAnalysis {
    pub fn system_deadlock(&self) -> bool {
        system_deadlock(&self.reports)
    }

    /// Unordered pairs `(i, j)` where either robot has the pair's row active
    /// with a multiplier above `eps_mu`.
    pub fn active_pairs(&self, eps_mu: f64) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (i, (p, s)) in self.problems.iter().zip(&self.solutions).enumerate() {
            for &k in &s.active_set {
                if let Some(j) = p.rows[k].neighbor() {
                    if s.mu[k] > eps_mu {
                        pairs.push((i.min(j), i.max(j)));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

pub fn analyze_world(
    world: &WorldState,
    goals: &GoalSpec,
    params: &Params,
    thresholds: &DeadlockThresholds,
) -> Result<WorldAnalysis> {
    let mut problems = Vec::with_capacity(world.len());
    let mut solutions = Vec::with_capacity(world.len());
    let mut reports = Vec::with_capacity(world.len());
    for i in 0..world.len() {
        let problem = assemble_qp(i, world, goals, params)?;
        let solution = solve_qp(&problem)?;
        reports.push(detect_deadlock(i, world, goals, &problem, &solution, thresholds));
        problems.push(problem);
        solutions.push(solution);
    }
    Ok(WorldAnalysis { problems, solutions, reports })
}

/// Closed-form multiplier of a single active row, `2 (a^T u_hat - b) / ||a||^2`.
pub fn two_robot_multiplier(a: Vec2, u_hat: Vec2, b_hat: f64) -> Result<f64> {
    let nn = a.norm_sq();
    if nn == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(2.0 * (a.dot(u_hat) - b_hat) / nn)
}

/// Collinear two-robot deadlock state parametrized by `alpha` in (0, 1):
/// `p1 = alpha pd1 + (1 - alpha) pd2`, `p2 = p1 - Ds e_beta`, both at rest.
pub fn collinear_family(goals: &GoalSpec, params: &Params, alpha: f64) -> Result<[RobotState; 2]> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::OutOfRange(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if goals.len() != 2 {
        return Err(Error::InvalidParams("collinear family needs exactly two goals".into()));
    }
    let dg = goals.goal_distance(0, 1);
    if dg <= params.ds {
        return Err(Error::OutOfRange(format!("goal distance {dg} must exceed Ds = {}", params.ds)));
    }
    let e_beta = goal_direction(goals, 0, 1)?;
    let p1 = goals.pd[0] * alpha + goals.pd[1] * (1.0 - alpha);
    let p2 = p1 - e_beta * params.ds;
    Ok([RobotState::at_rest(p1), RobotState::at_rest(p2)])
}

/// `| ||p1 - pd1|| + ||p2 - pd2|| - (Ds + D_G) |` for a two-robot state.
pub fn boundedness_identity(world: &WorldState, goals: &GoalSpec, ds: f64) -> f64 {
    let d1 = (world.robots[0].p - goals.pd[0]).norm();
    let d2 = (world.robots[1].p - goals.pd[1]).norm();
    (d1 + d2 - (ds + goals.goal_distance(0, 1))).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "category", rename_all = "snake_case")]
pub enum ThreeRobotCategory {
    /// All three pairs at the safety distance.
    A,
    /// Exactly the two pairs containing `center` at the safety distance.
    B { center: usize },
    NotInDeadlock,
}

/// Classifies a three-robot configuration by which pairs sit at `Ds`.
pub fn classify_three_robot(world: &WorldState, ds: f64, tol: f64) -> Result<ThreeRobotCategory> {
    if world.len() != 3 {
        return Err(Error::InvalidParams(format!("expected three robots, got {}", world.len())));
    }
    let mut tight = Vec::new();
    for (i, j) in world.pairs() {
        let d = (world.robots[i].p - world.robots[j].p).norm();
        if d < ds - tol {
            return Err(Error::SafetyViolated { i, j, depth: ds - d });
        }
        if d <= ds + tol {
            tight.push((i, j));
        }
    }
    Ok(match tight.as_slice() {
        [_, _, _] => ThreeRobotCategory::A,
        [(a, b), (c, d)] => {
            let center = if a == c || a == d { *a } else { *b };
            ThreeRobotCategory::B { center }
        }
        _ => ThreeRobotCategory::NotInDeadlock,
    })
}

/// Goals `R e_{2 pi (i - 1) / 3}` shared by the three-robot families.
pub fn three_robot_goals(r: f64) -> Result<GoalSpec> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::OutOfRange(format!("goal radius must be > 0, got {r}")));
    }
    GoalSpec::new((0..3).map(|i| Vec2::unit(2.0 * PI * i as f64 / 3.0) * r).collect())
}

/// Category A: equilateral triangle of side `Ds`, each robot diametrically
/// opposite its goal.
pub fn three_robot_family_cat_a(params: &Params, r: f64) -> Result<(WorldState, GoalSpec)> {
    let goals = three_robot_goals(r)?;
    let rho = params.ds / 3f64.sqrt();
    let robots = (0..3)
        .map(|i| RobotState::at_rest(Vec2::unit(2.0 * PI * i as f64 / 3.0 + PI) * rho))
        .collect();
    Ok((WorldState::new(robots), goals))
}

/// Category B: open 120-degree chain with robot 2 (index 1) in the middle.
pub fn three_robot_family_cat_b(params: &Params, r: f64) -> Result<(WorldState, GoalSpec)> {
    let goals = three_robot_goals(r)?;
    let ds = params.ds;
    let robots = vec![
        RobotState::at_rest(Vec2::unit(PI) * ds),
        RobotState::at_rest(Vec2::ZERO),
        RobotState::at_rest(Vec2::unit(FRAC_PI_3) * ds),
    ];
    Ok((WorldState::new(robots), goals))
}

/// Two-parameter Category B family with `theta` in (-pi/6, 0) and
/// `alpha_angle` in (pi/6, pi/2); robot 2 (index 1) is the center.
pub fn cat_b_parametrized(params: &Params, r: f64, theta: f64, alpha_angle: f64) -> Result<(WorldState, GoalSpec)> {
    if !(theta > -FRAC_PI_6 && theta < 0.0) {
        return Err(Error::OutOfRange(format!("theta must lie in (-pi/6, 0), got {theta}")));
    }
    if !(alpha_angle > FRAC_PI_6 && alpha_angle < FRAC_PI_2) {
        return Err(Error::OutOfRange(format!("alpha must lie in (pi/6, pi/2), got {alpha_angle}")));
    }
    let goals = three_robot_goals(r)?;
    let ds = params.ds;
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha_angle.sin_cos();
    let s = (alpha_angle - theta).sin();
    if s == 0.0 {
        return Err(Error::OutOfRange("sin(alpha - theta) vanishes".into()));
    }
    let pre = -1.0 / (2.0 * s);
    let p1 = Vec2::new(
        pre * (2.0 * ds * ct * s + 2.0 * r * ct * (alpha_angle - FRAC_PI_3).sin() + 2.0 * r * ca * st),
        pre * (st * (3.0 * r * sa + 2.0 * ds * s - 3f64.sqrt() * r * ca)),
    );
    let p2 = p1 + Vec2::unit(theta) * ds;
    let p3 = p2 + Vec2::unit(alpha_angle) * ds;
    let world = WorldState::new(vec![RobotState::at_rest(p1), RobotState::at_rest(p2), RobotState::at_rest(p3)]);
    Ok((world, goals))
}

/// True iff at least one neighbor constraint is active and every pair with
/// an active neighbor constraint sits on the safety boundary `h = 0`.
pub fn verify_boundary_membership(
    world: &WorldState,
    goals: &GoalSpec,
    params: &Params,
    thresholds: &DeadlockThresholds,
    h_tol: f64,
) -> Result<bool> {
    let analysis = analyze_world(world, goals, params, thresholds)?;
    let pairs = analysis.active_pairs(0.0);
    if pairs.is_empty() {
        return Ok(false);
    }
    for (i, j) in pairs {
        let h = safety_index(&PairGeometry::new(i, &world.robots[i], j, &world.robots[j], params))?;
        if h.abs() > h_tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Membership summary used by the `families` CLI and the acceptance suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyReport {
    pub positions: Vec<Vec2>,
    pub goals: Vec<Vec2>,
    pub max_u_star: f64,
    pub min_active_mu: f64,
    pub max_force_balance: f64,
    pub system_deadlock: bool,
    pub boundary_membership: bool,
    pub max_active_h: f64,
    /// Two-robot states only.
    pub boundedness_residual: Option<f64>,
    pub active_rows: Vec<Vec<usize>>,
}

pub fn family_report(world: &WorldState, goals: &GoalSpec, params: &Params) -> Result<FamilyReport> {
    let thresholds = DeadlockThresholds::for_params(params);
    let analysis = analyze_world(world, goals, params, &thresholds)?;
    let mut min_active_mu = f64::INFINITY;
    for r in &analysis.reports {
        for m in r.active_multipliers.iter().filter(|m| m.neighbor.is_some()) {
            min_active_mu = min_active_mu.min(m.mu);
        }
    }
    let mut max_active_h: f64 = 0.0;
    for (i, j) in analysis.active_pairs(0.0) {
        let h = safety_index(&PairGeometry::new(i, &world.robots[i], j, &world.robots[j], params))?;
        max_active_h = max_active_h.max(h.abs());
    }
    let boundary_membership = verify_boundary_membership(world, goals, params, &thresholds, 1e-8)?;
    Ok(FamilyReport {
        positions: world.robots.iter().map(|r| r.p).collect(),
        goals: goals.pd.clone(),
        max_u_star: analysis.reports.iter().map(|r| r.u_star_norm).fold(0.0, f64::max),
        min_active_mu,
        max_force_balance: analysis.reports.iter().map(|r| r.force_balance_residual).fold(0.0, f64::max),
        system_deadlock: analysis.system_deadlock(),
        boundary_membership,
        max_active_h,
        boundedness_residual: (world.len() == 2).then(|| boundedness_identity(world, goals, params.ds)),
        active_rows: analysis.solutions.iter().map(|s| s.active_set.clone()).collect(),
    })
}
