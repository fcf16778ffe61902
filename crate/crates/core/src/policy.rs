//! Reparameterized tanh-squashed Gaussian actor.
//!
//! An action is `scale * tanh(mu(s) + sigma(s) * eps) + offset` with both
//! `mu` and `log sigma` produced by one network. The pre-squash value is
//! called `u` throughout.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Axis, NodeRef, Tape};
use crate::nn::{Mlp, MlpSpec, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Stored actions are kept this fraction of the half-range inside the bounds.
pub const BOUND_MARGIN: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn symmetric(dim: usize, limit: f64) -> Self {
        Self {
            low: vec![-limit; dim],
            high: vec![limit; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn scale(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    pub fn offset(&self) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| 0.5 * (h + l))
            .collect()
    }
}

/// Behavior-policy statistics for a batch of states (row-major, rows ×
/// action dim).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Log-density of the taken action, one per row.
    pub log_prob: Vec<f64>,
}

/// Nodes produced when drawing actions on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SampleNodes {
    pub mu: NodeRef,
    pub log_std: NodeRef,
    pub pre_squash: NodeRef,
    pub action: NodeRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SquashedNormalPolicy {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
    bounds: ActionBounds,
    scale: Vec<f64>,
    offset: Vec<f64>,
    log_std_range: (f64, f64),
}

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
pub fn log1m_tanh_sq(u: f64) -> f64 {
    let a = -2.0 * u;
    let sp = if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    };
    2.0 * (LN_2 - u - sp)
}

impl SquashedNormalPolicy {
    /// Builds the actor. Hidden layers use gain 1, the head gain 0.01.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        bounds: ActionBounds,
        hidden: &[usize],
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let action_dim = bounds.dim();
        let net = Mlp::new(
            MlpSpec {
                input: state_dim,
                hidden: hidden.to_vec(),
                output: 2 * action_dim,
                layer_norm,
                head_gain: 0.01,
            },
            rng,
        );
        Self::from_net(net, bounds)
    }

    pub fn from_net(net: Mlp, bounds: ActionBounds) -> Self {
        let action_dim = bounds.dim();
        assert_eq!(
            net.spec().output,
            2 * action_dim,
            "head must emit mean and log-std"
        );
        Self {
            state_dim: net.spec().input,
            action_dim,
            scale: bounds.scale(),
            offset: bounds.offset(),
            bounds,
            net,
            log_std_range: (LOG_STD_MIN, LOG_STD_MAX),
        }
    }

    /// Replaces the log-std clamp interval (default `[-5, 2]`).
    pub fn with_log_std_range(mut self, lo: f64, hi: f64) -> Self {
        assert!(lo < hi, "empty log-std range");
        self.log_std_range = (lo, hi);
        self
    }

    pub fn log_std_range(&self) -> (f64, f64) {
        self.log_std_range
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.net.flat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.net.set_flat(flat)
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeRef> {
        self.net.bind(tape)
    }

    pub fn bind_const(&self, tape: &mut Tape) -> Vec<NodeRef> {
        self.net.bind_const(tape)
    }

    /// Mean and clamped log-std nodes for a batch of states.
    pub fn heads(
        &self,
        tape: &mut Tape,
        bound: &[NodeRef],
        states: NodeRef,
    ) -> Result<(NodeRef, NodeRef)> {
        let out = self.net.forward(tape, bound, states)?;
        let a = self.action_dim;
        let mu = tape.slice(out, 0, a)?;
        let raw = tape.slice(out, a, 2 * a)?;
        let log_std = tape.clamp(raw, self.log_std_range.0, self.log_std_range.1)?;
        Ok((mu, log_std))
    }

    /// Squashes pre-squash values `u` into actions.
    pub fn squash(&self, tape: &mut Tape, u: NodeRef) -> Result<NodeRef> {
        let t = tape.tanh(u)?;
        let scale = tape.constant((1, self.action_dim), self.scale.clone());
        let offset = tape.constant((1, self.action_dim), self.offset.clone());
        let s = tape.mul(t, scale)?;
        Ok(tape.add(s, offset)?)
    }

    /// Reparameterized draw `a = scale·tanh(mu + sigma·eps) + offset` for a
    /// batch, with `eps` given row-major (rows × action dim).
    pub fn sample(
        &self,
        tape: &mut Tape,
        bound: &[NodeRef],
        states: NodeRef,
        eps: &[f64],
    ) -> Result<SampleNodes> {
        let (mu, log_std) = self.heads(tape, bound, states)?;
        self.sample_from_heads(tape, mu, log_std, eps)
    }

    pub fn sample_from_heads(
        &self,
        tape: &mut Tape,
        mu: NodeRef,
        log_std: NodeRef,
        eps: &[f64],
    ) -> Result<SampleNodes> {
        assert_eq!(eps.len(), mu.len(), "noise must match the action batch");
        let e = tape.constant(mu.shape(), eps.to_vec());
        let sigma = tape.exp(log_std)?;
        let se = tape.mul(sigma, e)?;
        let u = tape.add(mu, se)?;
        let action = self.squash(tape, u)?;
        Ok(SampleNodes {
            mu,
            log_std,
            pre_squash: u,
            action,
        })
    }

    /// Per-row `log pi(a|s)` from pre-squash value, mean and log-std nodes.
    pub fn log_prob_node(
        &self,
        tape: &mut Tape,
        u: NodeRef,
        mu: NodeRef,
        log_std: NodeRef,
    ) -> Result<NodeRef> {
        // Gaussian part: -0.5 z² - log σ - ½ log 2π, z = (u - μ)·exp(-log σ)
        let diff = tape.sub(u, mu)?;
        let neg_ls = tape.scale(log_std, -1.0)?;
        let inv_sigma = tape.exp(neg_ls)?;
        let z = tape.mul(diff, inv_sigma)?;
        let z2 = tape.square(z)?;
        let half_z2 = tape.scale(z2, -0.5)?;
        let g = tape.sub(half_z2, log_std)?;
        let g = tape.shift(g, -HALF_LN_2PI)?;
        // Squash correction: log(1 - tanh² u) = 2 (ln 2 - u - softplus(-2u))
        let m2u = tape.scale(u, -2.0)?;
        let sp = tape.softplus(m2u)?;
        let us = tape.add(u, sp)?;
        let corr = tape.scale(us, -2.0)?;
        let corr = tape.shift(corr, 2.0 * LN_2)?;
        let log_scale: Vec<f64> = self.scale.iter().map(|s| s.ln()).collect();
        let ls = tape.constant((1, self.action_dim), log_scale);
        let corr = tape.add(corr, ls)?;
        let lp = tape.sub(g, corr)?;
        Ok(tape.sum(lp, Axis::Rows)?)
    }

    /// Mean and std for a batch of states.
    pub fn distribution(&self, states: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.net.eval(states, rows)?;
        let a = self.action_dim;
        let mut mu = Vec::with_capacity(rows * a);
        let mut sigma = Vec::with_capacity(rows * a);
        for r in 0..rows {
            let row = &out[r * 2 * a..(r + 1) * 2 * a];
            mu.extend_from_slice(&row[..a]);
            let (lo, hi) = self.log_std_range;
            sigma.extend(row[a..].iter().map(|l| l.clamp(lo, hi).exp()));
        }
        Ok((mu, sigma))
    }

    /// Clamps an action strictly inside the bounds and maps it to its
    /// pre-squash value. Returns whether clamping happened.
    pub fn unsquash(&self, a: f64, dim: usize) -> (f64, bool) {
        let y = (a - self.offset[dim]) / self.scale[dim];
        let lim = 1.0 - BOUND_MARGIN;
        let clamped = y.clamp(-lim, lim);
        (clamped.atanh(), clamped != y)
    }

    /// Keeps a freshly squashed action inside the stored-action margin.
    pub fn clamp_action(&self, a: f64, dim: usize) -> f64 {
        let lim = 1.0 - BOUND_MARGIN;
        let y = ((a - self.offset[dim]) / self.scale[dim]).clamp(-lim, lim);
        self.scale[dim] * y + self.offset[dim]
    }

    /// Noise that regenerates `actions` under the current parameters given
    /// precomputed `mu` and `sigma`. Returns the noise and the number of
    /// clamped entries.
    pub fn inverse_with(&self, actions: &[f64], mu: &[f64], sigma: &[f64]) -> (Vec<f64>, usize) {
        let a = self.action_dim;
        let mut clamps = 0;
        let eps = actions
            .iter()
            .enumerate()
            .map(|(k, &act)| {
                let (u, c) = self.unsquash(act, k % a);
                clamps += c as usize;
                (u - mu[k]) / sigma[k]
            })
            .collect();
        (eps, clamps)
    }

    /// `eps_reg = (atanh((a - offset)/scale) - mu(s)) / sigma(s)`.
    pub fn inverse(
        &self,
        states: &[f64],
        actions: &[f64],
        rows: usize,
    ) -> Result<(Vec<f64>, usize)> {
        let (mu, sigma) = self.distribution(states, rows)?;
        Ok(self.inverse_with(actions, &mu, &sigma))
    }

    /// Per-row log-density from precomputed statistics.
    pub fn log_prob_with(&self, actions: &[f64], mu: &[f64], sigma: &[f64]) -> Vec<f64> {
        let a = self.action_dim;
        actions
            .chunks(a)
            .enumerate()
            .map(|(r, row)| {
                let mut lp = 0.0;
                for (d, &act) in row.iter().enumerate() {
                    let k = r * a + d;
                    let (u, _) = self.unsquash(act, d);
                    let z = (u - mu[k]) / sigma[k];
                    lp += -0.5 * z * z - sigma[k].ln() - HALF_LN_2PI;
                    lp -= self.scale[d].ln() + log1m_tanh_sq(u);
                }
                lp
            })
            .collect()
    }

    pub fn log_prob(&self, states: &[f64], actions: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (mu, sigma) = self.distribution(states, rows)?;
        Ok(self.log_prob_with(actions, &mu, &sigma))
    }

    /// Single-sample entropy estimate `-log pi(a|s)` per row.
    pub fn entropy_estimate(
        &self,
        states: &[f64],
        actions: &[f64],
        rows: usize,
    ) -> Result<Vec<f64>> {
        Ok(self
            .log_prob(states, actions, rows)?
            .into_iter()
            .map(|l| -l)
            .collect())
    }

    /// Draws actions without recording gradients. Returns actions (clamped
    /// inside the margin) and the behavior statistics.
    pub fn act(&self, states: &[f64], rows: usize, eps: &[f64]) -> Result<(Vec<f64>, PolicyStats)> {
        let (mu, sigma) = self.distribution(states, rows)?;
        let a = self.action_dim;
        let actions: Vec<f64> = (0..rows * a)
            .map(|k| {
                let d = k % a;
                let raw = self.scale[d] * (mu[k] + sigma[k] * eps[k]).tanh() + self.offset[d];
                self.clamp_action(raw, d)
            })
            .collect();
        let log_prob = self.log_prob_with(&actions, &mu, &sigma);
        Ok((
            actions,
            PolicyStats {
                mu,
                sigma,
                log_prob,
            },
        ))
    }

    /// Deterministic action `scale·tanh(mu(s)) + offset`.
    pub fn mode(&self, states: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (mu, _) = self.distribution(states, rows)?;
        let a = self.action_dim;
        Ok(mu
            .iter()
            .enumerate()
            .map(|(k, m)| self.scale[k % a] * m.tanh() + self.offset[k % a])
            .collect())
    }
}

/// Per-row `KL(old ‖ new)` between diagonal Gaussians where the new
/// distribution is on the tape and the old one is constant:
/// `Σ log(σ_new/σ_old) + (σ_old² + (μ_old - μ_new)²) / (2σ_new²) - ½`.
pub fn kl_gaussian(
    tape: &mut Tape,
    old_mu: &[f64],
    old_sigma: &[f64],
    mu: NodeRef,
    log_std: NodeRef,
) -> Result<NodeRef> {
    let shape = mu.shape();
    let om = tape.constant(shape, old_mu.to_vec());
    let old_var: Vec<f64> = old_sigma.iter().map(|s| s * s).collect();
    let ov = tape.constant(shape, old_var);
    let old_log_std: Vec<f64> = old_sigma.iter().map(|s| s.ln()).collect();
    let ols = tape.constant(shape, old_log_std);

    let log_ratio = tape.sub(log_std, ols)?;
    let d = tape.sub(om, mu)?;
    let d2 = tape.square(d)?;
    let num = tape.add(ov, d2)?;
    let m2 = tape.scale(log_std, -2.0)?;
    let inv_var = tape.exp(m2)?;
    let q = tape.mul(num, inv_var)?;
    let q = tape.scale(q, 0.5)?;
    let kl = tape.add(log_ratio, q)?;
    let kl = tape.shift(kl, -0.5)?;
    Ok(tape.sum(kl, Axis::Rows)?)
}

/// Closed-form `KL(N(mu_old, sigma_old²) ‖ N(mu_new, sigma_new²))` for one dimension.
pub fn kl_scalar(mu_old: f64, sigma_old: f64, mu_new: f64, sigma_new: f64) -> f64 {
    (sigma_new / sigma_old).ln()
        + (sigma_old * sigma_old + (mu_old - mu_new).powi(2)) / (2.0 * sigma_new * sigma_new)
        - 0.5
}

/// Differential entropy of `tanh(N(mu, sigma²))` by trapezoid quadrature
/// over the pre-squash variable (unit scale).
pub fn squashed_entropy_quadrature(mu: f64, sigma: f64, points: usize) -> f64 {
    let lo = mu - 12.0 * sigma;
    let hi = mu + 12.0 * sigma;
    let h = (hi - lo) / (points - 1) as f64;
    let mut acc = 0.0;
    for i in 0..points {
        let u = lo + h * i as f64;
        let z = (u - mu) / sigma;
        let logp_u = -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln();
        let logp_a = logp_u - log1m_tanh_sq(u);
        let w = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
        acc += w * logp_u.exp() * (-logp_a);
    }
    acc * h
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn inverse_round_trips_sample(
            s in prop::collection::vec(-2.0f64..2.0, 3),
            eps in prop::collection::vec(-3.0f64..3.0, 2),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SquashedNormalPolicy::new(3, ActionBounds { low: vec![-1.0, 0.0], high: vec![1.0, 3.0] }, &[6], true, &mut rng);
            let (a, _) = p.act(&s, 1, &eps).unwrap();
            let (back, clamps) = p.inverse(&s, &a, 1).unwrap();
            prop_assert_eq!(clamps, 0);
            for (x, y) in back.iter().zip(&eps) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
