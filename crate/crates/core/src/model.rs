//! Domain types shared by every module: gains, robot states, goals and
//! the nominal PD goal controller.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec2::Vec2;

/// Controller gains, safety margin and per-robot acceleration limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Proportional gain (1/s^2).
    pub kp: f64,
    /// Derivative gain (1/s).
    pub kv: f64,
    /// Safety margin distance (m).
    pub ds: f64,
    /// Symmetric per-axis acceleration limit for each robot (m/s^2).
    pub alpha: Vec<f64>,
}

impl Params {
    pub fn new(kp: f64, kv: f64, ds: f64, alpha: Vec<f64>) -> Result<Self> {
        let p = Self { kp, kv, ds, alpha };
        p.validate()?;
        Ok(p)
    }

    /// Same limit for `n` robots.
    pub fn uniform(kp: f64, kv: f64, ds: f64, alpha: f64, n: usize) -> Result<Self> {
        Self::new(kp, kv, ds, vec![alpha; n])
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        pos("kp", self.kp)?;
        pos("kv", self.kv)?;
        pos("ds", self.ds)?;
        if self.alpha.is_empty() {
            return Err(Error::InvalidParams("alpha must have one entry per robot".into()));
        }
        for (i, &a) in self.alpha.iter().enumerate() {
            pos(&format!("alpha[{i}]"), a)?;
        }
        Ok(())
    }

    /// Overdamped closed loop, kv^2 - 4 kp > 0.
    pub fn is_overdamped(&self) -> bool {
        self.kv * self.kv - 4.0 * self.kp > 0.0
    }

    pub fn robot_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }
}

/// Position and velocity of one planar double integrator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub p: Vec2,
    pub v: Vec2,
}

impl RobotState {
    pub const fn new(p: Vec2, v: Vec2) -> Self {
        Self { p, v }
    }

    pub const fn at_rest(p: Vec2) -> Self {
        Self { p, v: Vec2::ZERO }
    }

    pub fn is_finite(&self) -> bool {
        self.p.is_finite() && self.v.is_finite()
    }
}

/// Goal positions, one per robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub pd: Vec<Vec2>,
}

impl GoalSpec {
    /// Rejects pairwise coincident goals.
    pub fn new(pd: Vec<Vec2>) -> Result<Self> {
        for i in 0..pd.len() {
            if !pd[i].is_finite() {
                return Err(Error::InvalidParams(format!("goal {i} is not finite")));
            }
            for j in (i + 1)..pd.len() {
                if (pd[j] - pd[i]).norm() == 0.0 {
                    return Err(Error::CoincidentGoals { i, j });
                }
            }
        }
        Ok(Self { pd })
    }

    pub fn len(&self) -> usize {
        self.pd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pd.is_empty()
    }

    /// Distance between the goals of robots `i` and `j`.
    pub fn goal_distance(&self, i: usize, j: usize) -> f64 {
        (self.pd[j] - self.pd[i]).norm()
    }

    pub fn centroid(&self) -> Vec2 {
        self.pd.iter().copied().sum::<Vec2>() / self.pd.len() as f64
    }
}

/// Collective state of the multirobot system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robots: Vec<RobotState>,
    pub t: f64,
}

impl WorldState {
    pub fn new(robots: Vec<RobotState>) -> Self {
        Self { robots, t: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.robots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.robots.is_empty()
    }

    pub fn centroid(&self) -> Vec2 {
        self.robots.iter().map(|r| r.p).sum::<Vec2>() / self.robots.len() as f64
    }

    /// Unordered robot pairs `(i, j)` with `i < j`, ascending.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.robots.len();
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        self.pairs()
            .map(|(i, j)| (self.robots[j].p - self.robots[i].p).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Prescribed goal controller `-kp (p - pd) - kv v`.
pub fn pd_control(state: &RobotState, goal: Vec2, params: &Params) -> Vec2 {
    -params.kp * (state.p - goal) - params.kv * state.v
}

/// Four-quadrant bearing of `pd_j - pd_i`, in `(-pi, pi]`.
pub fn goal_bearing(goals: &GoalSpec, i: usize, j: usize) -> Result<f64> {
    let d = goals.pd[j] - goals.pd[i];
    if d.norm() == 0.0 {
        return Err(Error::CoincidentGoals { i, j });
    }
    Ok(wrap_angle(d.angle()))
}

/// Unit vector from goal `i` towards goal `j`.
pub fn goal_direction(goals: &GoalSpec, i: usize, j: usize) -> Result<Vec2> {
    let d = goals.pd[j] - goals.pd[i];
    let n = d.norm();
    if n == 0.0 {
        return Err(Error::CoincidentGoals { i, j });
    }
    Ok(d / n)
}

/// Normalizes an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the 2*pi rounding edge
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}
