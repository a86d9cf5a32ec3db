//! Scenarios, time integration, trajectory logs and the post-hoc audit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cbf::{assemble_qp, pair_safety_indices, RowKind};
use crate::deadlock::DeadlockThresholds;
use crate::error::{Error, Result};
use crate::model::{GoalSpec, Params, RobotState, WorldState};
use crate::qp::verify_kkt_parts;
use crate::resolution::{supervisor_step, PhaseState, ResolutionConfig};
use crate::vec2::Vec2;

pub use crate::resolution::{ControllerKind, Event};

/// A complete, validated simulation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub params: Params,
    pub initial: Vec<RobotState>,
    pub goals: GoalSpec,
    pub controller: ControllerKind,
    pub dt: f64,
    pub t_max: f64,
    pub thresholds: DeadlockThresholds,
    pub resolution: ResolutionConfig,
    /// Recorded in the log only; the simulation itself draws no random numbers.
    pub seed: u64,
    /// The run stops once every robot is within this distance of its goal.
    pub goal_tol: f64,
}

/// On-disk scenario schema (TOML).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    controller: ControllerKind,
    #[serde(default = "default_dt")]
    dt: f64,
    t_max: f64,
    #[serde(default)]
    seed: u64,
    goal_tol: Option<f64>,
    params: ParamsFile,
    #[serde(default)]
    thresholds: ThresholdsFile,
    #[serde(default)]
    resolution: ResolutionConfig,
    robots: Vec<RobotFile>,
}

fn default_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    kp: f64,
    kv: f64,
    ds: f64,
    /// Default acceleration limit for robots without their own `alpha`.
    alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdsFile {
    eps_u: Option<f64>,
    eps_v: Option<f64>,
    eps_goal: Option<f64>,
    eps_mu: Option<f64>,
    geom_tol: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotFile {
    p: Vec2,
    #[serde(default)]
    v: Vec2,
    goal: Vec2,
    alpha: Option<f64>,
}

impl Scenario {
    /// Builds a scenario with default thresholds, resolution settings and
    /// `goal_tol = eps_goal`.
    pub fn new(
        params: Params,
        initial: Vec<RobotState>,
        goals: GoalSpec,
        controller: ControllerKind,
        dt: f64,
        t_max: f64,
    ) -> Result<Self> {
        let thresholds = DeadlockThresholds::for_params(&params);
        let s = Self {
            goal_tol: thresholds.eps_goal,
            params,
            initial,
            goals,
            controller,
            dt,
            t_max,
            thresholds,
            resolution: ResolutionConfig::default(),
            seed: 0,
        };
        s.validate()?;
        Ok(s)
    }

    /// Head-on swap: robots at `(-2, 0)` and `(2, 0)`, goals exchanged,
    /// `kp = 1`, `kv = 3`, `Ds = 0.5`, `alpha = 5`, `dt = 1e-3`, `t_max = 30`.
    pub fn head_on(controller: ControllerKind) -> Result<Self> {
        let params = Params::uniform(1.0, 3.0, 0.5, 5.0, 2)?;
        let (a, b) = (Vec2::new(-2.0, 0.0), Vec2::new(2.0, 0.0));
        Self::new(params, vec![RobotState::at_rest(a), RobotState::at_rest(b)], GoalSpec::new(vec![b, a])?, controller, 1e-3, 30.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.thresholds.validate()?;
        self.resolution.validate()?;
        let n = self.initial.len();
        if n == 0 {
            return Err(Error::Scenario("at least one robot is required".into()));
        }
        if self.goals.len() != n || self.params.robot_count() != n {
            return Err(Error::Scenario(format!(
                "{n} robots but {} goals and {} acceleration limits",
                self.goals.len(),
                self.params.robot_count()
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Scenario(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_max.is_finite() && self.t_max > self.dt) {
            return Err(Error::Scenario(format!("t_max must exceed dt, got {}", self.t_max)));
        }
        if !(self.goal_tol.is_finite() && self.goal_tol > 0.0) {
            return Err(Error::Scenario(format!("goal_tol must be > 0, got {}", self.goal_tol)));
        }
        if self.initial.iter().any(|z| !z.is_finite()) {
            return Err(Error::Scenario("initial states must be finite".into()));
        }
        let world = WorldState::new(self.initial.clone());
        for (i, j) in world.pairs() {
            let d = (world.robots[i].p - world.robots[j].p).norm();
            if d < self.params.ds {
                return Err(Error::Scenario(format!(
                    "robots {i} and {j} start {d} apart, inside the safety distance {}",
                    self.params.ds
                )));
            }
        }
        if self.controller == ControllerKind::ThreePhase && !self.params.is_overdamped() {
            return Err(Error::Scenario("three-phase control requires kv^2 - 4 kp > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: ScenarioFile = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        let alpha = f
            .robots
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.alpha.or(f.params.alpha).ok_or_else(|| Error::Scenario(format!("robot {i} has no alpha and [params] sets none")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let params = Params::new(f.params.kp, f.params.kv, f.params.ds, alpha)?;
        let d = DeadlockThresholds::for_params(&params);
        let t = &f.thresholds;
        let thresholds = DeadlockThresholds {
            eps_u: t.eps_u.unwrap_or(d.eps_u),
            eps_v: t.eps_v.unwrap_or(d.eps_v),
            eps_goal: t.eps_goal.unwrap_or(d.eps_goal),
            eps_mu: t.eps_mu.unwrap_or(d.eps_mu),
            geom_tol: t.geom_tol.unwrap_or(d.geom_tol),
        };
        let s = Self {
            goals: GoalSpec::new(f.robots.iter().map(|r| r.goal).collect())?,
            initial: f.robots.iter().map(|r| RobotState::new(r.p, r.v)).collect(),
            params,
            controller: f.controller,
            dt: f.dt,
            t_max: f.t_max,
            goal_tol: f.goal_tol.unwrap_or(thresholds.eps_goal),
            thresholds,
            resolution: f.resolution,
            seed: f.seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Parse { path: path.into(), message: other.to_string() },
        })
    }
}

/// Semi-implicit Euler: `v+ = v + u dt`, `p+ = p + v+ dt`.
pub fn integrate_step(world: &WorldState, controls: &[Vec2], dt: f64) -> Result<WorldState> {
    if controls.len() != world.len() {
        return Err(Error::InvalidParams(format!("{} controls for {} robots", controls.len(), world.len())));
    }
    if let Some(i) = controls.iter().position(|u| !u.is_finite()) {
        return Err(Error::InvalidParams(format!("non-finite control for robot {i}")));
    }
    let robots = world
        .robots
        .iter()
        .zip(controls)
        .map(|(z, &u)| {
            let v = z.v + u * dt;
            RobotState::new(z.p + v * dt, v)
        })
        .collect();
    Ok(WorldState { robots, t: world.t + dt })
}

/// One simulation step: the state at `t` and the decisions taken there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub phase: u8,
    pub robots: Vec<RobotState>,
    /// Applied accelerations.
    pub u_star: Vec<Vec2>,
    pub u_hat: Vec<Vec2>,
    /// Per-robot multipliers in assembled row order; empty when no QP ran.
    pub mu: Vec<Vec<f64>>,
    pub active: Vec<Vec<usize>>,
    /// Signed safety index for each pair `(i, j)`, `i < j`, ascending.
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    GoalsReached { t: f64 },
    Horizon { t: f64 },
    Aborted { t: f64, class: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub scenario: Scenario,
    pub records: Vec<StepRecord>,
    pub events: Vec<Event>,
    pub termination: Termination,
}

impl TrajectoryLog {
    pub fn final_world(&self) -> Option<WorldState> {
        self.records.last().map(|r| WorldState { robots: r.robots.clone(), t: r.t })
    }

    pub fn robot_count(&self) -> usize {
        self.scenario.initial.len()
    }
}

/// A finished run together with the error that stopped it early, if any.
#[derive(Debug)]
pub struct SimOutcome {
    pub log: TrajectoryLog,
    pub abort: Option<Error>,
}

/// Runs until every robot is within `goal_tol` of its goal or `t_max`.
/// Aborts keep the partial log.
pub fn simulate(scenario: &Scenario) -> SimOutcome {
    let mut log = TrajectoryLog {
        scenario: scenario.clone(),
        records: Vec::new(),
        events: Vec::new(),
        termination: Termination::Horizon { t: 0.0 },
    };
    let abort = match run_loop(scenario, &mut log) {
        Ok(()) => None,
        Err((t, e)) => {
            if let Error::QpInfeasible { robot, t } = e {
                log.events.push(Event::QpInfeasible { t, robot });
            }
            log.termination = Termination::Aborted { t, class: e.class().into(), message: e.to_string() };
            Some(e)
        }
    };
    SimOutcome { log, abort }
}

fn run_loop(s: &Scenario, log: &mut TrajectoryLog) -> std::result::Result<(), (f64, Error)> {
    let steps = (s.t_max / s.dt).round() as usize;
    let mut world = WorldState::new(s.initial.clone());
    let mut state = PhaseState::default();
    for k in 0..=steps {
        let t = k as f64 * s.dt;
        world.t = t;
        for (i, j) in world.pairs() {
            let d = (world.robots[i].p - world.robots[j].p).norm();
            if d < s.params.ds - s.thresholds.geom_tol {
                return Err((t, Error::SafetyViolated { i, j, depth: s.params.ds - d }));
            }
        }
        let out = supervisor_step(&mut state, &world, &s.goals, &s.params, &s.thresholds, &s.resolution, s.controller, s.dt)
            .map_err(|e| (t, e))?;
        let h = pair_safety_indices(&world, &s.params).map_err(|e| (t, e))?;
        let (mu, active) = match &out.qp {
            Some(sols) => (sols.iter().map(|x| x.mu.clone()).collect(), sols.iter().map(|x| x.active_set.clone()).collect()),
            None => (vec![Vec::new(); world.len()], vec![Vec::new(); world.len()]),
        };
        log.events.extend(out.events);
        log.records.push(StepRecord {
            t,
            phase: out.phase.number(),
            robots: world.robots.clone(),
            u_star: out.controls.clone(),
            u_hat: out.u_hat,
            mu,
            active,
            h,
        });
        if world.robots.iter().zip(&s.goals.pd).all(|(z, g)| (z.p - *g).norm() <= s.goal_tol) {
            log.termination = Termination::GoalsReached { t };
            return Ok(());
        }
        if k == steps {
            break;
        }
        world = integrate_step(&world, &out.controls, s.dt).map_err(|e| (t, e))?;
    }
    log.termination = Termination::Horizon { t: steps as f64 * s.dt };
    Ok(())
}

/// Like [`simulate`], but an abort is an error.
pub fn run_scenario(scenario: &Scenario) -> Result<TrajectoryLog> {
    let out = simulate(scenario);
    match out.abort {
        Some(e) => Err(e),
        None => Ok(out.log),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    Csv,
    Json,
}

/// Index of robot `r`'s row for neighbor `j` in assembled row order.
fn neighbor_row(r: usize, j: usize) -> usize {
    if j < r {
        j
    } else {
        j - 1
    }
}

pub fn csv_header(n: usize) -> Vec<String> {
    let mut cols: Vec<String> =
        ["t", "robot_id", "px", "py", "vx", "vy", "ux_star", "uy_star", "ux_hat", "uy_hat", "phase"].map(String::from).to_vec();
    let world = WorldState::new(vec![RobotState::default(); n]);
    for (i, j) in world.pairs() {
        cols.push(format!("h_{i}_{j}"));
        cols.push(format!("mu_{i}_{j}"));
    }
    cols
}

pub fn write_csv<W: Write>(log: &TrajectoryLog, out: W) -> std::result::Result<(), csv::Error> {
    let n = log.robot_count();
    let pairs: Vec<(usize, usize)> = WorldState::new(vec![RobotState::default(); n]).pairs().collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(n))?;
    for rec in &log.records {
        for (r, z) in rec.robots.iter().enumerate() {
            let mut row = vec![
                rec.t.to_string(),
                r.to_string(),
                z.p.x.to_string(),
                z.p.y.to_string(),
                z.v.x.to_string(),
                z.v.y.to_string(),
                rec.u_star[r].x.to_string(),
                rec.u_star[r].y.to_string(),
                rec.u_hat[r].x.to_string(),
                rec.u_hat[r].y.to_string(),
                rec.phase.to_string(),
            ];
            for (k, &(i, j)) in pairs.iter().enumerate() {
                row.push(rec.h[k].to_string());
                let mu = match (rec.mu[r].is_empty(), r == i, r == j) {
                    (false, true, _) => rec.mu[r][neighbor_row(r, j)].to_string(),
                    (false, _, true) => rec.mu[r][neighbor_row(r, i)].to_string(),
                    _ => String::new(),
                };
                row.push(mu);
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_log(log: &TrajectoryLog, format: LogFormat, path: &Path) -> Result<()> {
    let io = |source| Error::Io { path: path.into(), source };
    let file = fs::File::create(path).map_err(io)?;
    let mut buf = std::io::BufWriter::new(file);
    match format {
        LogFormat::Csv => write_csv(log, &mut buf).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io(source),
            other => Error::Parse { path: path.into(), message: format!("{other:?}") },
        })?,
        LogFormat::Json => serde_json::to_writer(&mut buf, log).map_err(|e| io(e.into()))?,
    }
    buf.flush().map_err(io)
}

pub fn load_log(path: &Path) -> Result<TrajectoryLog> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })
}

/// Post-hoc findings over a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps: usize,
    /// Smallest recomputed `h` over steps where the safety filter ran.
    pub min_h_filtered: f64,
    /// Smallest recomputed `h` over all steps.
    pub min_h: f64,
    /// Largest disagreement between logged and recomputed `h`.
    pub max_h_mismatch: f64,
    /// Largest KKT residual of the logged `(u*, mu)` against the QP
    /// reassembled from the logged state.
    pub max_kkt_residual: f64,
    pub min_distance: f64,
    pub qp_steps: usize,
}

impl AuditReport {
    pub fn passes(&self, h_floor: f64, kkt_tol: f64) -> bool {
        self.min_h_filtered >= h_floor && self.max_kkt_residual <= kkt_tol && self.max_h_mismatch <= 1e-12
    }
}

/// Safety index recomputed from raw positions and velocities, extended to
/// penetrating states by `sign(s) sqrt(2 A |s|)`.
fn audit_h(zi: &RobotState, zj: &RobotState, a_sum: f64, ds: f64) -> f64 {
    let dp = zi.p - zj.p;
    let r = (dp.x * dp.x + dp.y * dp.y).sqrt();
    let s = r - ds;
    let root = if s.abs() <= 8.0 * f64::EPSILON * r.max(ds) { 0.0 } else { s.signum() * (2.0 * a_sum * s.abs()).sqrt() };
    let dv = zi.v - zj.v;
    root + (dp.x * dv.x + dp.y * dv.y) / r
}

pub fn audit_log(log: &TrajectoryLog) -> Result<AuditReport> {
    let s = &log.scenario;
    let mut rep = AuditReport {
        steps: log.records.len(),
        min_h_filtered: f64::INFINITY,
        min_h: f64::INFINITY,
        max_h_mismatch: 0.0,
        max_kkt_residual: 0.0,
        min_distance: f64::INFINITY,
        qp_steps: 0,
    };
    for rec in &log.records {
        let world = WorldState { robots: rec.robots.clone(), t: rec.t };
        let filtered = rec.mu.iter().any(|m| !m.is_empty());
        for (k, (i, j)) in world.pairs().enumerate() {
            let h = audit_h(&rec.robots[i], &rec.robots[j], s.params.alpha(i) + s.params.alpha(j), s.params.ds);
            rep.max_h_mismatch = rep.max_h_mismatch.max((h - rec.h[k]).abs());
            rep.min_h = rep.min_h.min(h);
            if filtered {
                rep.min_h_filtered = rep.min_h_filtered.min(h);
            }
            rep.min_distance = rep.min_distance.min((rec.robots[i].p - rec.robots[j].p).norm());
        }
        if filtered {
            rep.qp_steps += 1;
            for i in 0..world.len() {
                let problem = assemble_qp(i, &world, &s.goals, &s.params)?;
                debug_assert!(problem.rows.iter().take(world.len() - 1).all(|r| matches!(r.kind, RowKind::Neighbor { .. })));
                let res = verify_kkt_parts(&problem, rec.u_star[i], &rec.mu[i]);
                rep.max_kkt_residual = rep.max_kkt_residual.max(res.max());
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn integrate_examples() {
        let w = WorldState::new(vec![RobotState::at_rest(Vec2::new(1.0, 2.0))]);
        let w1 = integrate_step(&w, &[Vec2::ZERO], 0.1).unwrap();
        assert_eq!(w1.robots, w.robots);
        let w = WorldState::new(vec![RobotState::at_rest(Vec2::ZERO)]);
        let w1 = integrate_step(&w, &[Vec2::new(1.0, 0.0)], 0.1).unwrap();
        assert_abs_diff_eq!(w1.robots[0].v.x, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(w1.robots[0].p.x, 0.01, epsilon = 1e-15);
        assert!(integrate_step(&w, &[Vec2::new(f64::NAN, 0.0)], 0.1).is_err());
    }

    #[test]
    fn integrate_converges_to_parabola() {
        let u = Vec2::new(0.7, -0.3);
        let v0 = Vec2::new(0.2, 0.1);
        let err = |n: usize| {
            let dt = 1.0 / n as f64;
            let mut w = WorldState::new(vec![RobotState::new(Vec2::ZERO, v0)]);
            for _ in 0..n {
                w = integrate_step(&w, &[u], dt).unwrap();
            }
            (w.robots[0].p - (v0 + u * 0.5)).norm()
        };
        let (e1, e2) = (err(100), err(200));
        assert!(e1 > 0.0 && (e1 / e2 - 2.0).abs() < 0.05, "first order: {e1} {e2}");
    }

    #[test]
    fn single_robot_pd_only_converges() {
        let params = Params::uniform(1.0, 3.0, 0.5, 5.0, 1).unwrap();
        let goals = GoalSpec::new(vec![Vec2::new(1.0, 1.0)]).unwrap();
        let mut sc = Scenario::new(params, vec![RobotState::at_rest(Vec2::ZERO)], goals, ControllerKind::PdOnly, 1e-2, 40.0).unwrap();
        sc.goal_tol = 1e-4;
        let log = run_scenario(&sc).unwrap();
        assert!(log.events.is_empty());
        assert!(matches!(log.termination, Termination::GoalsReached { .. }));
        let errs: Vec<f64> = log.records.iter().map(|r| (r.robots[0].p - Vec2::new(1.0, 1.0)).norm()).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn scenario_validation() {
        let params = Params::uniform(1.0, 3.0, 0.5, 5.0, 2).unwrap();
        let goals = GoalSpec::new(vec![Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)]).unwrap();
        let close = vec![RobotState::at_rest(Vec2::ZERO), RobotState::at_rest(Vec2::new(0.2, 0.0))];
        assert!(matches!(
            Scenario::new(params.clone(), close, goals.clone(), ControllerKind::CbfQpOnly, 1e-3, 1.0),
            Err(Error::Scenario(_))
        ));
        let ok = vec![RobotState::at_rest(Vec2::ZERO), RobotState::at_rest(Vec2::new(1.0, 0.0))];
        assert!(Scenario::new(params.clone(), ok.clone(), goals.clone(), ControllerKind::CbfQpOnly, 0.0, 1.0).is_err());
        assert!(Scenario::new(params, ok, goals, ControllerKind::CbfQpOnly, 0.1, 0.05).is_err());
    }

    #[test]
    fn toml_round_trip_of_defaults() {
        let text = r#"
            controller = "three-phase"
            t_max = 60.0
            [params]
            kp = 1.0
            kv = 3.0
            ds = 0.5
            alpha = 5.0
            [[robots]]
            p = [-2.0, 0.0]
            goal = [2.0, 0.0]
            [[robots]]
            p = [2.0, 0.0]
            goal = [-2.0, 0.0]
        "#;
        let sc = Scenario::from_toml_str(text).unwrap();
        let mut expected = Scenario::head_on(ControllerKind::ThreePhase).unwrap();
        expected.t_max = 60.0;
        assert_eq!(sc, expected);
        assert!(Scenario::from_toml_str("controller = \"nope\"").is_err());
    }

    #[test]
    fn csv_shapes() {
        let sc = Scenario::head_on(ControllerKind::CbfQpOnly).unwrap();
        let mut log = TrajectoryLog { scenario: sc, records: vec![], events: vec![], termination: Termination::Horizon { t: 0.0 } };
        let mut buf = Vec::new();
        write_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.trim_end(), "t,robot_id,px,py,vx,vy,ux_star,uy_star,ux_hat,uy_hat,phase,h_0_1,mu_0_1");

        log.scenario.t_max = 0.1;
        log = run_scenario(&log.scenario).unwrap();
        let mut buf = Vec::new();
        write_csv(&log, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * log.records.len());
    }
}
