//! Three-phase deadlock resolution.
//!
//! Phase One runs the CBF-QP filter. Once a system deadlock persists, Phase
//! Two rotates the deadlocked group about its centroid at constant shape
//! until the group is aligned with the goal layout. Phase Three applies the
//! plain PD goal controller.

use std::f64::consts::{FRAC_PI_3, PI};

use serde::{Deserialize, Serialize};

use crate::deadlock::{analyze_world, DeadlockThresholds};
use crate::error::{Error, Result};
use crate::model::{pd_control, wrap_angle, GoalSpec, Params, WorldState};
use crate::qp::{QpSolution, QpStatus};
use crate::vec2::Vec2;

/// Control law driving the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    CbfQpOnly,
    ThreePhase,
    PdOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
    Three,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
            Phase::Three => 3,
        }
    }
}

/// How Phase Two turns the rotation law into accelerations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase2Realization {
    /// Per-step exact rigid rotation: the commanded acceleration lands every
    /// robot on the rotated entry shape after one integrator step.
    Sampled,
    /// Continuous-time feedback linearization evaluated once per step.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolutionConfig {
    /// Distance-hold gain; `None` means `10 kv`.
    pub k1: Option<f64>,
    pub eps_theta: f64,
    pub eps_omega: f64,
    /// Consecutive deadlocked steps before the supervisor reacts.
    pub k_persist: usize,
    pub realization: Phase2Realization,
}

impl Default for ResolutionConfig {
    fn default() -> Self {
        Self { k1: None, eps_theta: 1e-3, eps_omega: 1e-3, k_persist: 10, realization: Phase2Realization::Sampled }
    }
}

impl ResolutionConfig {
    pub fn k1(&self, params: &Params) -> f64 {
        self.k1.unwrap_or(10.0 * params.kv)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.eps_theta) && ok(self.eps_omega) && self.k1.is_none_or(ok) && self.k_persist >= 1) {
            return Err(Error::InvalidParams("resolution thresholds and k1 must be > 0, k_persist >= 1".into()));
        }
        Ok(())
    }
}

/// Outputs of the two-robot distance/bearing feedback linearization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLinState {
    /// Bearing of `p2 - p1` (rad).
    pub theta: f64,
    pub theta_dot: f64,
    /// `r^2 / 2` (m^2).
    pub r_half: f64,
    /// `d(r^2 / 2)/dt` (m^2/s).
    pub y_o1: f64,
}

impl FeedbackLinState {
    pub fn from_pair(world: &WorldState) -> Result<Self> {
        if world.len() != 2 {
            return Err(Error::InvalidParams(format!("expected two robots, got {}", world.len())));
        }
        let d = world.robots[1].p - world.robots[0].p;
        let dv = world.robots[1].v - world.robots[0].v;
        let rr = d.norm_sq();
        if rr == 0.0 {
            return Err(Error::CoincidentRobots { i: 0, j: 1 });
        }
        Ok(Self { theta: d.angle(), theta_dot: d.cross(dv) / rr, r_half: 0.5 * rr, y_o1: d.dot(dv) })
    }
}

/// Two-robot feedback linearization with bearing error `e = wrap(theta - beta)`.
///
/// Imposes `d(y_o1)/dt = -k1 y_o1` and `theta'' = -kp e - kv theta'` with
/// `u2 = -u1`.
pub fn phase2_control_two(world: &WorldState, params: &Params, beta_ref: f64, k1: f64) -> Result<(Vec2, Vec2)> {
    let fl = FeedbackLinState::from_pair(world)?;
    phase2_two_with_error(world, params, wrap_angle(fl.theta - beta_ref), k1)
}

fn phase2_two_with_error(world: &WorldState, params: &Params, err: f64, k1: f64) -> Result<(Vec2, Vec2)> {
    let fl = FeedbackLinState::from_pair(world)?;
    let d = world.robots[1].p - world.robots[0].p;
    let dv = world.robots[1].v - world.robots[0].v;
    let rr = 2.0 * fl.r_half;
    let b1 = -k1 * fl.y_o1 - dv.norm_sq();
    let b2 = 2.0 * fl.y_o1 * fl.theta_dot - params.kp * rr * err - params.kv * rr * fl.theta_dot;
    // A = [[-2dx, -2dy], [2dy, -2dx]], det A = 4 r^2
    let det = 4.0 * rr;
    let u1 = Vec2::new((-2.0 * d.x * b1 + 2.0 * d.y * b2) / det, (-2.0 * d.y * b1 - 2.0 * d.x * b2) / det);
    Ok((u1, -u1))
}

/// Rigid-rotation law about the centroid. The assembly angle is the bearing
/// of robot 0 from the centroid; each robot receives the acceleration of a
/// rigidly rotating point, `theta'' perp(q_i) - theta'^2 q_i`.
pub fn phase2_control_three(world: &WorldState, params: &Params, beta_ref: f64) -> Result<Vec<Vec2>> {
    let (theta, _) = assembly_angle(world)?;
    phase2_rigid_with_error(world, params, wrap_angle(theta - beta_ref))
}

fn assembly_angle(world: &WorldState) -> Result<(f64, f64)> {
    let c = world.centroid();
    let q0 = world.robots[0].p - c;
    if q0.norm() == 0.0 {
        return Err(Error::InvalidParams("robot 0 coincides with the centroid".into()));
    }
    Ok((q0.angle(), angular_rate(world, c)?))
}

/// `sum q_i x v_i / sum |q_i|^2` about `c`.
fn angular_rate(world: &WorldState, c: Vec2) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for z in &world.robots {
        let q = z.p - c;
        num += q.cross(z.v);
        den += q.norm_sq();
    }
    if den == 0.0 {
        return Err(Error::InvalidParams("all robots coincide with the rotation center".into()));
    }
    Ok(num / den)
}

fn phase2_rigid_with_error(world: &WorldState, params: &Params, err: f64) -> Result<Vec<Vec2>> {
    let c = world.centroid();
    let omega = angular_rate(world, c)?;
    let alpha = -params.kp * err - params.kv * omega;
    Ok(world.robots.iter().map(|z| (z.p - c).perp() * alpha - (z.p - c) * (omega * omega)).collect())
}

/// Rotation by `-beta`.
pub fn rotate_frame(v: Vec2, beta: f64) -> Vec2 {
    v.rotate(-beta)
}

/// Closed-form relative motion after Phase Two:
/// `(dp_x(tau), dv_x(tau))` in the frame aligned with the goal bearing,
/// starting from `(Ds, 0)` at `tau = 0`.
pub fn phase3_closed_form(tau: f64, ds: f64, dg: f64, kp: f64, kv: f64) -> Result<(f64, f64)> {
    let disc = kv * kv - 4.0 * kp;
    if disc.is_nan() || disc <= 0.0 {
        return Err(Error::InvalidParams(format!("gains must be overdamped, kv^2 - 4 kp = {disc}")));
    }
    if !(dg > ds && ds > 0.0) {
        return Err(Error::InvalidParams(format!("need D_G > Ds > 0, got D_G = {dg}, Ds = {ds}")));
    }
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::OutOfRange(format!("elapsed time must be >= 0, got {tau}")));
    }
    let root = disc.sqrt();
    let (w1, w2) = (0.5 * (-kv + root), 0.5 * (-kv - root));
    let c1 = w2 * (dg - ds) / (w1 - w2);
    let c2 = -w1 * (dg - ds) / (w1 - w2);
    let (e1, e2) = ((w1 * tau).exp(), (w2 * tau).exp());
    Ok((c1 * e1 + c2 * e2 + dg, c1 * w1 * e1 + c2 * w2 * e2))
}

/// Counts consecutive deadlocked steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadlockMonitor {
    pub counter: usize,
}

impl DeadlockMonitor {
    /// Returns true on the step the count reaches `k_persist`.
    pub fn update(&mut self, deadlocked: bool, k_persist: usize) -> bool {
        if deadlocked {
            self.counter += 1;
            self.counter == k_persist
        } else {
            self.counter = 0;
            false
        }
    }
}

/// Shape-preserving rotation of a robot group about a fixed pivot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationPlan {
    pub pivot: Vec2,
    /// Positions relative to the pivot when the plan started.
    pub offsets: Vec<Vec2>,
    /// Rotation multiplier per robot: `p_i = pivot + Rot(s_i phi) q_i`.
    pub signs: Vec<f64>,
    pub phi: f64,
    pub omega: f64,
    pub target: f64,
    pub stage: RotationStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationStage {
    /// Close a Category B chain to an equilateral triangle about its center.
    Regularize,
    /// Rotate the whole group about its centroid onto the goal layout.
    Align,
}

impl RotationPlan {
    /// Group rotation about the centroid onto the goal layout, with the
    /// target angle from the least-squares (Procrustes) fit of the current
    /// shape to the goal shape. A half-turn tie resolves to `+pi`.
    pub fn align(world: &WorldState, goals: &GoalSpec) -> Result<Self> {
        let c = world.centroid();
        let gc = goals.centroid();
        let (mut s, mut co) = (0.0, 0.0);
        for (z, g) in world.robots.iter().zip(&goals.pd) {
            let (q, r) = (z.p - c, *g - gc);
            s += q.cross(r);
            co += q.dot(r);
        }
        let target = wrap_angle(s.atan2(co));
        Ok(Self {
            pivot: c,
            offsets: world.robots.iter().map(|z| z.p - c).collect(),
            signs: vec![1.0; world.len()],
            phi: 0.0,
            omega: angular_rate(world, c)?,
            target,
            stage: RotationStage::Align,
        })
    }

    /// Rotates the two outer robots of a chain centered on `center` towards
    /// each other until they subtend 60 degrees at the center.
    pub fn regularize(world: &WorldState, center: usize) -> Result<Self> {
        let m = world.robots[center].p;
        let outer: Vec<usize> = (0..world.len()).filter(|&k| k != center).collect();
        let [a, b] = outer[..] else {
            return Err(Error::InvalidParams("regularization needs exactly three robots".into()));
        };
        let gamma = wrap_angle((world.robots[b].p - m).angle() - (world.robots[a].p - m).angle());
        // a turns by +phi, b by -phi, closing the angle from a to b
        let (sa, sb, gamma) = if gamma >= 0.0 { (1.0, -1.0, gamma) } else { (-1.0, 1.0, -gamma) };
        let mut signs = vec![0.0; world.len()];
        signs[a] = sa;
        signs[b] = sb;
        Ok(Self {
            pivot: m,
            offsets: world.robots.iter().map(|z| z.p - m).collect(),
            signs,
            phi: 0.0,
            omega: 0.0,
            target: 0.5 * (gamma - FRAC_PI_3),
            stage: RotationStage::Regularize,
        })
    }

    pub fn error(&self) -> f64 {
        self.phi - self.target
    }

    pub fn converged(&self, cfg: &ResolutionConfig) -> bool {
        self.error().abs() <= cfg.eps_theta && self.omega.abs() <= cfg.eps_omega
    }

    /// Advances `phi'' = -kp (phi - target) - kv phi'` by one semi-implicit
    /// step and returns the accelerations that place every robot on the
    /// advanced shape after the integrator step.
    pub fn step(&mut self, world: &WorldState, params: &Params, dt: f64) -> Vec<Vec2> {
        self.omega += dt * (-params.kp * self.error() - params.kv * self.omega);
        self.phi += dt * self.omega;
        world
            .robots
            .iter()
            .zip(self.offsets.iter().zip(&self.signs))
            .map(|(z, (&q, &s))| {
                let next = self.pivot + q.rotate(s * self.phi);
                ((next - z.p) / dt - z.v) / dt
            })
            .collect()
    }
}

/// Supervisor state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    pub monitor: DeadlockMonitor,
    pub t_enter_phase: f64,
    /// Goal-aligned bearing of `p2 - p1` (two robots) or of robot 0 about
    /// the centroid (three robots), unwrapped relative to the entry bearing.
    pub beta_ref: Option<f64>,
    /// Robots in the rotating group, ascending.
    pub group: Vec<usize>,
    pub plan: Option<RotationPlan>,
    /// Bearing at Phase Two entry, for the continuous realization.
    pub theta_entry: f64,
    pub theta_prev: f64,
    pub deadlock_reported: bool,
}

impl Default for PhaseState {
    fn default() -> Self {
        Self {
            phase: Phase::One,
            monitor: DeadlockMonitor::default(),
            t_enter_phase: 0.0,
            beta_ref: None,
            group: Vec::new(),
            plan: None,
            theta_entry: 0.0,
            theta_prev: 0.0,
            deadlock_reported: false,
        }
    }
}

/// Discrete events recorded in the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    DeadlockDetected { t: f64, category: String },
    PhaseTransition { t: f64, from: u8, to: u8 },
    RegularizationComplete { t: f64 },
    ResolutionUnsupported { t: f64, n: usize, reason: String },
    QpInfeasible { t: f64, robot: usize },
}

/// Everything the supervisor decided in one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub controls: Vec<Vec2>,
    pub u_hat: Vec<Vec2>,
    /// Per-robot QP solutions when the safety filter ran.
    pub qp: Option<Vec<QpSolution>>,
    pub events: Vec<Event>,
    /// Phase that produced `controls`.
    pub phase: Phase,
}

fn deadlock_category(n: usize, pairs: &[(usize, usize)]) -> Option<String> {
    match (n, pairs.len()) {
        (2, 1) => Some("two".into()),
        (3, 3) => Some("A".into()),
        (3, 2) => {
            let (a, b) = (pairs[0], pairs[1]);
            let center = if a.0 == b.0 || a.0 == b.1 { a.0 } else { a.1 };
            Some(format!("B({})", center + 1))
        }
        _ => None,
    }
}

/// Advances the supervisor by one step of length `dt`.
#[allow(clippy::too_many_arguments)]
pub fn supervisor_step(
    state: &mut PhaseState,
    world: &WorldState,
    goals: &GoalSpec,
    params: &Params,
    thresholds: &DeadlockThresholds,
    cfg: &ResolutionConfig,
    controller: ControllerKind,
    dt: f64,
) -> Result<StepOutput> {
    let t = world.t;
    let u_hat: Vec<Vec2> = world.robots.iter().zip(&goals.pd).map(|(z, g)| pd_control(z, *g, params)).collect();
    let mut events = Vec::new();

    if controller == ControllerKind::PdOnly {
        return Ok(StepOutput { controls: u_hat.clone(), u_hat, qp: None, events, phase: Phase::Three });
    }

    if state.phase == Phase::One {
        let analysis = analyze_world(world, goals, params, thresholds)?;
        if let Some(robot) = analysis.solutions.iter().position(|s| s.status == QpStatus::Infeasible) {
            return Err(Error::QpInfeasible { robot, t });
        }
        let deadlocked = analysis.system_deadlock();
        let fired = state.monitor.update(deadlocked, cfg.k_persist);
        if fired && !state.deadlock_reported {
            state.deadlock_reported = true;
            let pairs = analysis.active_pairs(thresholds.eps_mu);
            let category = deadlock_category(world.len(), &pairs);
            events.push(Event::DeadlockDetected { t, category: category.clone().unwrap_or_else(|| "other".into()) });
            if controller == ControllerKind::ThreePhase {
                match category.as_deref() {
                    Some(cat) => {
                        enter_phase_two(state, world, goals, cat, &pairs, t)?;
                        events.push(Event::PhaseTransition { t, from: 1, to: 2 });
                    }
                    None => events.push(Event::ResolutionUnsupported {
                        t,
                        n: world.len(),
                        reason: "resolution covers two-robot and three-robot deadlocks only".into(),
                    }),
                }
            }
        }
        if state.phase == Phase::One {
            let controls = analysis.solutions.iter().map(|s| s.u_star).collect();
            return Ok(StepOutput { controls, u_hat, qp: Some(analysis.solutions), events, phase: Phase::One });
        }
    }

    if state.phase == Phase::Two {
        if let Some(controls) = phase_two_controls(state, world, goals, params, cfg, dt, &mut events)? {
            return Ok(StepOutput { controls, u_hat, qp: None, events, phase: Phase::Two });
        }
        state.phase = Phase::Three;
        state.t_enter_phase = t;
        events.push(Event::PhaseTransition { t, from: 2, to: 3 });
    }

    Ok(StepOutput { controls: u_hat.clone(), u_hat, qp: None, events, phase: Phase::Three })
}

fn enter_phase_two(
    state: &mut PhaseState,
    world: &WorldState,
    goals: &GoalSpec,
    category: &str,
    pairs: &[(usize, usize)],
    t: f64,
) -> Result<()> {
    state.phase = Phase::Two;
    state.t_enter_phase = t;
    state.group = (0..world.len()).collect();
    let plan = if let Some(rest) = category.strip_prefix("B(") {
        let center: usize = rest.trim_end_matches(')').parse::<usize>().map_err(|e| Error::Solver(e.to_string()))? - 1;
        debug_assert!(pairs.iter().all(|&(a, b)| a == center || b == center));
        RotationPlan::regularize(world, center)?
    } else {
        RotationPlan::align(world, goals)?
    };
    let theta = entry_bearing(world)?;
    state.theta_entry = theta;
    state.theta_prev = theta;
    state.beta_ref = (plan.stage == RotationStage::Align).then_some(theta + plan.target);
    state.plan = Some(plan);
    Ok(())
}

/// Bearing tracked in Phase Two: `p2 - p1` for pairs, robot 0 about the
/// centroid otherwise.
fn entry_bearing(world: &WorldState) -> Result<f64> {
    if world.len() == 2 {
        Ok(FeedbackLinState::from_pair(world)?.theta)
    } else {
        Ok(assembly_angle(world)?.0)
    }
}

/// `None` once the group is aligned and Phase Three should take over.
fn phase_two_controls(
    state: &mut PhaseState,
    world: &WorldState,
    goals: &GoalSpec,
    params: &Params,
    cfg: &ResolutionConfig,
    dt: f64,
    events: &mut Vec<Event>,
) -> Result<Option<Vec<Vec2>>> {
    let plan = state.plan.as_mut().expect("phase two has a plan");
    if plan.stage == RotationStage::Regularize && plan.converged(cfg) {
        events.push(Event::RegularizationComplete { t: world.t });
        let aligned = RotationPlan::align(world, goals)?;
        let theta = entry_bearing(world)?;
        state.theta_entry = theta;
        state.theta_prev = theta;
        state.beta_ref = Some(theta + aligned.target);
        *plan = aligned;
    }
    if plan.stage == RotationStage::Regularize || cfg.realization == Phase2Realization::Sampled {
        if plan.stage == RotationStage::Align && plan.converged(cfg) {
            return Ok(None);
        }
        return Ok(Some(plan.step(world, params, dt)));
    }

    // continuous realization: unwrap the measured bearing against the last step
    let raw = entry_bearing(world)?;
    let theta = state.theta_prev + wrap_angle(raw - state.theta_prev);
    state.theta_prev = theta;
    let beta = state.beta_ref.expect("aligned plan sets beta_ref");
    let err = theta - beta;
    let omega = if world.len() == 2 {
        FeedbackLinState::from_pair(world)?.theta_dot
    } else {
        angular_rate(world, world.centroid())?
    };
    if err.abs() <= cfg.eps_theta && omega.abs() <= cfg.eps_omega {
        return Ok(None);
    }
    if world.len() == 2 {
        let (u1, u2) = phase2_two_with_error(world, params, err, cfg.k1(params))?;
        Ok(Some(vec![u1, u2]))
    } else {
        phase2_rigid_with_error(world, params, err).map(Some)
    }
}

/// Shortest signed rotation from `from` to `to`, ties at a half turn
/// resolving to `+pi`.
pub fn shortest_rotation(from: f64, to: f64) -> f64 {
    let d = wrap_angle(to - from);
    if d == -PI {
        PI
    } else {
        d
    }
}
