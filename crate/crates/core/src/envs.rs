//! Analytic differentiable environments.
//!
//! Dynamics and rewards are written with tape primitives on batches of
//! states (one row per environment instance), so `∂s'/∂a`, `∂s'/∂s` and
//! `∂r/∂a` come out of the same reverse sweep as the policy gradient.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::graph::{Axis, GraphError, NodeRef, Tape};
use crate::policy::ActionBounds;

/// Contract every environment satisfies.
pub trait DiffEnv: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn bounds(&self) -> ActionBounds;
    fn dt(&self) -> f64;
    fn episode_length(&self) -> usize;
    /// Draws an initial state from the start distribution.
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Records one step for a batch: returns `(next_states, rewards)` with
    /// shapes `rows × state_dim` and `rows × 1`.
    fn step(
        &self,
        tape: &mut Tape,
        states: NodeRef,
        actions: NodeRef,
    ) -> Result<(NodeRef, NodeRef), GraphError>;

    /// Steps plain values through a scratch tape.
    fn step_values(
        &self,
        states: &[f64],
        actions: &[f64],
        rows: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), GraphError> {
        let mut tape = Tape::new();
        let s = tape.constant((rows, self.state_dim()), states.to_vec());
        let a = tape.constant((rows, self.action_dim()), actions.to_vec());
        let (ns, r) = self.step(&mut tape, s, a)?;
        Ok((tape.value(ns).to_vec(), tape.value(r).to_vec()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    DoubleIntegrator,
    Pendulum,
    Bandit,
    Chain,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::DoubleIntegrator => "double_integrator",
            EnvKind::Pendulum => "pendulum",
            EnvKind::Bandit => "bandit",
            EnvKind::Chain => "chain",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "double_integrator" => Ok(Self::DoubleIntegrator),
            "pendulum" => Ok(Self::Pendulum),
            "bandit" => Ok(Self::Bandit),
            "chain" => Ok(Self::Chain),
            other => Err(format!("unknown env '{other}'")),
        }
    }
}

/// Environment selection plus the tunable constants of each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub num_envs: usize,
    /// Overrides the task's default episode length when set.
    pub episode_length: Option<usize>,
    /// Pendulum: hard velocity clamp instead of the smooth one.
    pub hard_clamp: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::DoubleIntegrator,
            num_envs: 16,
            episode_length: None,
            hard_clamp: false,
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Box<dyn DiffEnv> {
        match self.kind {
            EnvKind::DoubleIntegrator => {
                let mut e = DoubleIntegrator::default();
                if let Some(l) = self.episode_length {
                    e.episode_length = l;
                }
                Box::new(e)
            }
            EnvKind::Pendulum => {
                let mut e = SmoothPendulum {
                    hard_clamp: self.hard_clamp,
                    ..Default::default()
                };
                if let Some(l) = self.episode_length {
                    e.episode_length = l;
                }
                Box::new(e)
            }
            EnvKind::Bandit => Box::new(QuadraticBandit::default()),
            EnvKind::Chain => Box::new(ChainQuadratic::default()),
        }
    }
}

fn weighted_sq_sum(tape: &mut Tape, x: NodeRef, w: f64) -> Result<NodeRef, GraphError> {
    let sq = tape.square(x)?;
    let s = tape.sum(sq, Axis::Rows)?;
    tape.scale(s, w)
}

/// `s' = (p + dt·v, v + dt·a)`, `r = -(p² + 0.1 v² + 0.01 a²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleIntegrator {
    pub dt: f64,
    pub episode_length: usize,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub action_weight: f64,
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self {
            dt: 0.1,
            episode_length: 128,
            position_weight: 1.0,
            velocity_weight: 0.1,
            action_weight: 0.01,
        }
    }
}

impl DoubleIntegrator {
    /// `(A, B, Q, R)` of the linear-quadratic form, row-major.
    pub fn lq_matrices(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            vec![1.0, self.dt, 0.0, 1.0],
            vec![0.0, self.dt],
            vec![self.position_weight, 0.0, 0.0, self.velocity_weight],
            vec![self.action_weight],
        )
    }
}

impl DiffEnv for DoubleIntegrator {
    fn name(&self) -> &'static str {
        "double_integrator"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn bounds(&self) -> ActionBounds {
        ActionBounds::symmetric(1, 1.0)
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn episode_length(&self) -> usize {
        self.episode_length
    }
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
    }
    fn step(
        &self,
        tape: &mut Tape,
        s: NodeRef,
        a: NodeRef,
    ) -> Result<(NodeRef, NodeRef), GraphError> {
        let p = tape.slice(s, 0, 1)?;
        let v = tape.slice(s, 1, 2)?;
        let dp = tape.scale(v, self.dt)?;
        let p2 = tape.add(p, dp)?;
        let dv = tape.scale(a, self.dt)?;
        let v2 = tape.add(v, dv)?;
        let next = tape.concat(&[p2, v2])?;

        let cp = weighted_sq_sum(tape, p, self.position_weight)?;
        let cv = weighted_sq_sum(tape, v, self.velocity_weight)?;
        let ca = weighted_sq_sum(tape, a, self.action_weight)?;
        let c = tape.add(cp, cv)?;
        let c = tape.add(c, ca)?;
        let r = tape.scale(c, -1.0)?;
        Ok((next, r))
    }
}

/// Torque-limited pendulum with state `(cos φ, sin φ, φ̇)`; φ = 0 is upright.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothPendulum {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_speed: f64,
    /// Speed below which the smooth velocity limit is the identity.
    pub speed_knee: f64,
    pub max_torque: f64,
    pub episode_length: usize,
    pub hard_clamp: bool,
}

impl Default for SmoothPendulum {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            speed_knee: 6.0,
            max_torque: 2.0,
            episode_length: 200,
            hard_clamp: false,
        }
    }
}

impl DiffEnv for SmoothPendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn bounds(&self) -> ActionBounds {
        ActionBounds::symmetric(1, self.max_torque)
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn episode_length(&self) -> usize {
        self.episode_length
    }
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let phi: f64 = rng.gen_range(-PI..=PI);
        let w: f64 = rng.gen_range(-1.0..=1.0);
        vec![phi.cos(), phi.sin(), w]
    }
    fn step(
        &self,
        tape: &mut Tape,
        s: NodeRef,
        a: NodeRef,
    ) -> Result<(NodeRef, NodeRef), GraphError> {
        let c = tape.slice(s, 0, 1)?;
        let sn = tape.slice(s, 1, 2)?;
        let w = tape.slice(s, 2, 3)?;

        // φ̈ = -(g/l) sin(φ + π) + a/(m l²) = (g/l) sin φ + a/(m l²)
        let grav = tape.scale(sn, self.gravity / self.length)?;
        let torque = tape.scale(a, 1.0 / (self.mass * self.length * self.length))?;
        let acc = tape.add(grav, torque)?;
        let dw = tape.scale(acc, self.dt)?;
        let w_raw = tape.add(w, dw)?;
        let w2 = if self.hard_clamp {
            tape.clamp(w_raw, -self.max_speed, self.max_speed)?
        } else {
            // identity up to the knee, then a tanh roll-off saturating at the
            // max speed; value and first two derivatives are continuous
            let inner = tape.clamp(w_raw, -self.speed_knee, self.speed_knee)?;
            let excess = tape.sub(w_raw, inner)?;
            let room = self.max_speed - self.speed_knee;
            let x = tape.scale(excess, 1.0 / room)?;
            let t = tape.tanh(x)?;
            let t = tape.scale(t, room)?;
            tape.add(inner, t)?
        };
        // φ' = φ + dt·φ̇', expanded with angle-addition identities
        let dphi = tape.scale(w2, self.dt)?;
        let cd = tape.cos(dphi)?;
        let sd = tape.sin(dphi)?;
        let c_cd = tape.mul(c, cd)?;
        let s_sd = tape.mul(sn, sd)?;
        let c2 = tape.sub(c_cd, s_sd)?;
        let s_cd = tape.mul(sn, cd)?;
        let c_sd = tape.mul(c, sd)?;
        let s2 = tape.add(s_cd, c_sd)?;
        let next = tape.concat(&[c2, s2, w2])?;

        // angle_err² = 2(1 - cos φ)
        let one_minus = tape.scale(c, -1.0)?;
        let one_minus = tape.shift(one_minus, 1.0)?;
        let ang = tape.scale(one_minus, 2.0)?;
        let cw = weighted_sq_sum(tape, w, 0.1)?;
        let ca = weighted_sq_sum(tape, a, 0.001)?;
        let cost = tape.add(ang, cw)?;
        let cost = tape.add(cost, ca)?;
        let r = tape.scale(cost, -1.0)?;
        Ok((next, r))
    }
}

/// One-step bandit with reward `-(a - a*)²` from a fixed state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBandit {
    pub target: f64,
    pub state: f64,
}

impl Default for QuadraticBandit {
    fn default() -> Self {
        Self {
            target: 0.3,
            state: 1.0,
        }
    }
}

impl DiffEnv for QuadraticBandit {
    fn name(&self) -> &'static str {
        "bandit"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn bounds(&self) -> ActionBounds {
        ActionBounds::symmetric(1, 1.0)
    }
    fn dt(&self) -> f64 {
        1.0
    }
    fn episode_length(&self) -> usize {
        1
    }
    fn reset(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![self.state]
    }
    fn step(
        &self,
        tape: &mut Tape,
        s: NodeRef,
        a: NodeRef,
    ) -> Result<(NodeRef, NodeRef), GraphError> {
        let d = tape.shift(a, -self.target)?;
        let sq = tape.square(d)?;
        let r = tape.scale(sq, -1.0)?;
        Ok((s, r))
    }
}

/// Two-step scalar chain `s' = 0.9 s + 0.5 a`, `r = -(s² + 0.1 a²)`, `s₀ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainQuadratic {
    pub decay: f64,
    pub gain: f64,
    pub action_weight: f64,
    pub start: f64,
    pub steps: usize,
}

impl Default for ChainQuadratic {
    fn default() -> Self {
        Self {
            decay: 0.9,
            gain: 0.5,
            action_weight: 0.1,
            start: 1.0,
            steps: 2,
        }
    }
}

impl DiffEnv for ChainQuadratic {
    fn name(&self) -> &'static str {
        "chain"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn bounds(&self) -> ActionBounds {
        ActionBounds::symmetric(1, 1.0)
    }
    fn dt(&self) -> f64 {
        1.0
    }
    fn episode_length(&self) -> usize {
        self.steps
    }
    fn reset(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![self.start]
    }
    fn step(
        &self,
        tape: &mut Tape,
        s: NodeRef,
        a: NodeRef,
    ) -> Result<(NodeRef, NodeRef), GraphError> {
        let ds = tape.scale(s, self.decay)?;
        let da = tape.scale(a, self.gain)?;
        let next = tape.add(ds, da)?;
        let cs = tape.square(s)?;
        let ca = weighted_sq_sum(tape, a, self.action_weight)?;
        let c = tape.add(cs, ca)?;
        let r = tape.scale(c, -1.0)?;
        Ok((next, r))
    }
}
