//! Ground truth for the estimator and optimality checks: a discounted
//! Riccati solver, dense quadrature of the reparameterized surrogate
//! gradient on the one-dimensional tasks, and the estimator lab that
//! compares Monte Carlo estimators against it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::{rpo_gradient, TrainError, TrainerConfig};
use crate::envs::{ChainQuadratic, DiffEnv, DoubleIntegrator, EnvKind, QuadraticBandit};
use crate::graph::{GraphError, Tape};
use crate::nn::NnError;
use crate::policy::SquashedNormalPolicy;
use crate::rng;
use crate::rollout::{self, EnvBatch, RolloutBuffer, RolloutConfig, RolloutError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("Riccati iteration did not converge in {iterations} iterations (last change {change:e})")]
    Divergence { iterations: usize, change: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("quadrature refinement changed the estimate by {change:e} (tolerance {tolerance:e})")]
    GridRefinement { change: f64, tolerance: f64 },
    #[error("estimator lab supports bandit and chain, not {0}")]
    UnsupportedEnv(&'static str),
    #[error("oracle policies must be linear with one state and one action dimension")]
    NotLinear,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

pub const RICCATI_MAX_ITERS: usize = 100_000;
pub const QUADRATURE_LIMIT: f64 = 8.0;
pub const QUADRATURE_POINTS: usize = 4096;
pub const QUADRATURE_TOL: f64 = 1e-8;

/// Fixed point of the discounted Riccati recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub gamma: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl LqrSolution {
    /// Optimal discounted return `-s₀ᵀ P s₀` for reward `-(sᵀQs + aᵀRa)`.
    pub fn value(&self, s0: &[f64]) -> f64 {
        let s = DMatrix::from_column_slice(s0.len(), 1, s0);
        -(s.transpose() * &self.p * &s)[(0, 0)]
    }

    /// Optimal action `-K s`.
    pub fn action(&self, s: &[f64]) -> Vec<f64> {
        let s = DMatrix::from_column_slice(s.len(), 1, s);
        (-&self.k * s).iter().copied().collect()
    }
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let btp = b.transpose() * p;
    let inner = r + gamma * &btp * b;
    let k = inner.try_inverse()? * (gamma * &btp * a);
    let next = q + gamma * a.transpose() * p * a - gamma * a.transpose() * p * b * &k;
    let sym = 0.5 * (&next + next.transpose());
    Some((sym, k))
}

/// Iterates `P ← Q + γAᵀPA − γAᵀPB·K`, `K = (R + γBᵀPB)⁻¹γBᵀPA` from
/// `P = Q` to its fixed point.
pub fn lqr_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
) -> Result<LqrSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(OracleError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let singular = || OracleError::Dimension("R + γBᵀPB is singular".into());
    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for it in 1..=RICCATI_MAX_ITERS {
        let (next, _) = riccati_map(a, b, q, r, gamma, &p).ok_or_else(singular)?;
        change = (&next - &p).amax();
        p = next;
        if !change.is_finite() {
            break;
        }
        if change <= 1e-15 * (1.0 + p.amax()) {
            let (fixed, k) = riccati_map(a, b, q, r, gamma, &p).ok_or_else(singular)?;
            let residual = (&fixed - &p).amax();
            return Ok(LqrSolution {
                p,
                k,
                gamma,
                residual,
                iterations: it,
            });
        }
    }
    Err(OracleError::Divergence {
        iterations: RICCATI_MAX_ITERS,
        change,
    })
}

/// LQR solution for the double integrator's quadratic reward.
pub fn double_integrator_lqr(env: &DoubleIntegrator, gamma: f64) -> Result<LqrSolution> {
    let (a, b, q, r) = env.lq_matrices();
    lqr_solve(
        &DMatrix::from_row_slice(2, 2, &a),
        &DMatrix::from_row_slice(2, 1, &b),
        &DMatrix::from_row_slice(2, 2, &q),
        &DMatrix::from_row_slice(1, 1, &r),
        gamma,
    )
}

/// Closed-form view of a policy without hidden layers on a scalar state
/// and action: `μ = w_μ s + b_μ`, `log σ = clamp(w_σ s + b_σ)`. Parameters
/// are ordered as the policy's flat vector `[w_μ, w_σ, b_μ, b_σ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearGaussian {
    pub theta: [f64; 4],
    pub scale: f64,
    pub offset: f64,
    /// `false` drops the tanh (`a = μ + σε`), for closed-form checks.
    pub squash: bool,
    pub log_std_range: (f64, f64),
}

impl LinearGaussian {
    pub fn from_policy(p: &SquashedNormalPolicy) -> Result<Self> {
        let spec = p.net().spec();
        if p.state_dim() != 1 || p.action_dim() != 1 || !spec.hidden.is_empty() {
            return Err(OracleError::NotLinear);
        }
        let f = p.flat();
        Ok(Self {
            theta: [f[0], f[1], f[2], f[3]],
            scale: p.bounds().scale()[0],
            offset: p.bounds().offset()[0],
            squash: true,
            log_std_range: p.log_std_range(),
        })
    }

    fn raw_log_std(&self, s: f64) -> f64 {
        self.theta[1] * s + self.theta[3]
    }

    pub fn mu(&self, s: f64) -> f64 {
        self.theta[0] * s + self.theta[2]
    }

    pub fn sigma(&self, s: f64) -> f64 {
        let (lo, hi) = self.log_std_range;
        self.raw_log_std(s).clamp(lo, hi).exp()
    }

    fn log_std_active(&self, s: f64) -> f64 {
        let (lo, hi) = self.log_std_range;
        let l = self.raw_log_std(s);
        if l >= lo && l <= hi {
            1.0
        } else {
            0.0
        }
    }

    fn squash_slope(&self, u: f64) -> f64 {
        if self.squash {
            let t = u.tanh();
            self.scale * (1.0 - t * t)
        } else {
            self.scale
        }
    }

    pub fn action(&self, s: f64, eps: f64) -> f64 {
        let u = self.mu(s) + self.sigma(s) * eps;
        if self.squash {
            self.scale * u.tanh() + self.offset
        } else {
            self.scale * u + self.offset
        }
    }

    /// `∂a/∂θ` at fixed noise.
    pub fn action_grad(&self, s: f64, eps: f64) -> [f64; 4] {
        let sigma = self.sigma(s);
        let d = self.squash_slope(self.mu(s) + sigma * eps);
        let dls = d * sigma * eps * self.log_std_active(s);
        [d * s, dls * s, d, dls]
    }

    /// `∂a/∂s` at fixed noise.
    pub fn action_state_grad(&self, s: f64, eps: f64) -> f64 {
        let sigma = self.sigma(s);
        let d = self.squash_slope(self.mu(s) + sigma * eps);
        d * (self.theta[0] + sigma * eps * self.theta[1] * self.log_std_active(s))
    }
}

/// Tasks with a quadrature oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum SurrogateTask {
    Bandit(QuadraticBandit),
    Chain(ChainQuadratic),
}

impl SurrogateTask {
    pub fn from_kind(kind: EnvKind) -> Result<Self> {
        match kind {
            EnvKind::Bandit => Ok(Self::Bandit(QuadraticBandit::default())),
            EnvKind::Chain => Ok(Self::Chain(ChainQuadratic::default())),
            other => Err(OracleError::UnsupportedEnv(other.as_str())),
        }
    }

    pub fn env(&self) -> Box<dyn DiffEnv> {
        match self {
            Self::Bandit(e) => Box::new(e.clone()),
            Self::Chain(e) => Box::new(e.clone()),
        }
    }
}

/// Trapezoid nodes and weights of `∫ φ(ε) f(ε) dε` on `[-8, 8]`.
fn gauss_grid(points: usize) -> Vec<(f64, f64)> {
    let h = 2.0 * QUADRATURE_LIMIT / (points - 1) as f64;
    let norm = (2.0 * std::f64::consts::PI).sqrt();
    (0..points)
        .map(|i| {
            let e = -QUADRATURE_LIMIT + h * i as f64;
            let end = if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
            (e, end * h * (-0.5 * e * e).exp() / norm)
        })
        .collect()
}

fn axpy(acc: &mut [f64; 4], w: f64, x: [f64; 4]) {
    for k in 0..4 {
        acc[k] += w * x[k];
    }
}

fn surrogate_at(task: &SurrogateTask, old: &LinearGaussian, new: &LinearGaussian, gamma: f64, points: usize) -> [f64; 4] {
    let grid = gauss_grid(points);
    let mut out = [0.0; 4];
    match task {
        SurrogateTask::Bandit(env) => {
            let s = env.state;
            for &(e, w) in &grid {
                let a = new.action(s, e);
                axpy(&mut out, w * (-2.0 * (a - env.target)), new.action_grad(s, e));
            }
        }
        SurrogateTask::Chain(env) => {
            let (s0, aw) = (env.start, env.action_weight);
            // ∂Q_old(s₀, a₀)/∂a₀ includes the old policy's reaction at s₁
            let dq0 = |a0: f64| {
                let s1 = env.decay * s0 + env.gain * a0;
                let mut dv1 = 0.0;
                for &(e1, w1) in &grid {
                    let a1 = old.action(s1, e1);
                    dv1 += w1 * (-2.0 * s1 - 2.0 * aw * a1 * old.action_state_grad(s1, e1));
                }
                -2.0 * aw * a0 + gamma * env.gain * dv1
            };
            for &(e0, w0) in &grid {
                let a0 = new.action(s0, e0);
                axpy(&mut out, w0 * dq0(a0), new.action_grad(s0, e0));
            }
            // second step: states from the behavior policy, actions from the new one
            for &(e0, w0) in &grid {
                let s1 = env.decay * s0 + env.gain * old.action(s0, e0);
                for &(e1, w1) in &grid {
                    let a1 = new.action(s1, e1);
                    axpy(&mut out, gamma * w0 * w1 * (-2.0 * aw * a1), new.action_grad(s1, e1));
                }
            }
        }
    }
    out
}

/// Quadrature value of the reparameterized surrogate gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureEstimate {
    pub gradient: Vec<f64>,
    pub points: usize,
    pub truncation: f64,
    /// Largest change when the grid spacing is halved.
    pub refinement_change: f64,
}

/// `E_{s∼d_old} E_ε[∇_θ a · ∇_a Q_old(s, a)]` at `a = f_new(ε; s)`, with the
/// second chain step weighted by `γ`. The grid is refined once and the
/// estimate rejected if the two disagree beyond `1e-8`.
pub fn surrogate_grad_true(
    task: &SurrogateTask,
    old: &LinearGaussian,
    new: &LinearGaussian,
    gamma: f64,
    points: usize,
) -> Result<QuadratureEstimate> {
    let coarse = surrogate_at(task, old, new, gamma, points);
    let fine_points = 2 * points - 1;
    let fine = surrogate_at(task, old, new, gamma, fine_points);
    let change = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if !(change < QUADRATURE_TOL) {
        return Err(OracleError::GridRefinement {
            change,
            tolerance: QUADRATURE_TOL,
        });
    }
    Ok(QuadratureEstimate {
        gradient: fine.to_vec(),
        points: fine_points,
        truncation: QUADRATURE_LIMIT,
        refinement_change: change,
    })
}

/// Estimator lab settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub env: EnvKind,
    pub samples: usize,
    pub seed: u64,
    /// Std of the Gaussian perturbation from `θ_old` to `θ_new`.
    pub perturbation: f64,
    pub gamma: f64,
    /// `[w_μ, w_σ, b_μ, b_σ]` of the behavior policy.
    pub theta_old: [f64; 4],
    pub quadrature_points: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Bandit,
            samples: 100_000,
            seed: 0,
            perturbation: 0.015,
            gamma: 0.99,
            theta_old: [0.1, 0.05, -0.2, 0.4f64.ln()],
            quadrature_points: QUADRATURE_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    /// `(mean - truth) / std_error` per component.
    pub deviation_se: Vec<f64>,
    pub variance: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabReport {
    pub env: EnvKind,
    pub samples: usize,
    pub seed: u64,
    pub theta_old: Vec<f64>,
    pub theta_new: Vec<f64>,
    pub truth_on_policy: QuadratureEstimate,
    pub truth_off_policy: QuadratureEstimate,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub estimators: Vec<EstimatorSummary>,
}

/// Linear policy with the given flat parameters on a task.
pub fn linear_policy(env: &dyn DiffEnv, theta: &[f64; 4]) -> Result<SquashedNormalPolicy> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = SquashedNormalPolicy::new(env.state_dim(), env.bounds(), &[], false, &mut rng);
    p.set_flat(theta)?;
    Ok(p)
}

fn summarize(name: &str, xs: &[Vec<f64>], truth: &[f64]) -> EstimatorSummary {
    let n = xs.len() as f64;
    let dim = truth.len();
    let mut mean = vec![0.0; dim];
    for x in xs {
        for k in 0..dim {
            mean[k] += x[k] / n;
        }
    }
    let mut variance = vec![0.0; dim];
    for x in xs {
        for k in 0..dim {
            variance[k] += (x[k] - mean[k]).powi(2) / (n - 1.0);
        }
    }
    let std_error: Vec<f64> = variance.iter().map(|v| (v / n).sqrt()).collect();
    let deviation_se = (0..dim)
        .map(|k| {
            let d = mean[k] - truth[k];
            if std_error[k] > 0.0 {
                d / std_error[k]
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    EstimatorSummary {
        name: name.to_string(),
        mean,
        std_error,
        deviation_se,
        variance,
        truth: truth.to_vec(),
    }
}

/// Configuration that turns the RPO epoch gradient into the plain
/// ρ-weighted surrogate gradient.
fn surrogate_config() -> TrainerConfig {
    TrainerConfig {
        clip_gate: false,
        lambda_clip: 1.0,
        lambda_kl: 0.0,
        lambda_ent: 0.0,
        ..TrainerConfig::default()
    }
}

/// Per-sample cached-gradient estimate (ascent direction) for one
/// trajectory. The buffer's gradients carry the batch's `1/N`, undone here.
pub fn cached_gradient_sample(
    policy: &SquashedNormalPolicy,
    sample: &RolloutBuffer,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let out = rpo_gradient(policy, &surrogate_config(), sample, 0)?;
    Ok(out.grad.iter().map(|g| -g * batch_size as f64).collect())
}

/// Per-sample score-function estimate
/// `Σ_t γ^t ρ_t ∇_θ log π_new(a_t|s_t) Q̂_t` with `Q̂_t` the sampled reward-to-go.
pub fn reinforce_sample(policy: &SquashedNormalPolicy, sample: &RolloutBuffer, gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = sample.len();
    let ad = sample.action_dim;
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape);
    let s = tape.constant((h, sample.state_dim), sample.states.clone());
    let (mu, log_std) = policy.heads(&mut tape, &bound, s)?;
    let u: Vec<f64> = sample
        .actions
        .iter()
        .enumerate()
        .map(|(k, &a)| policy.unsquash(a, k % ad).0)
        .collect();
    let u = tape.constant((h, ad), u);
    let lp = policy.log_prob_node(&mut tape, u, mu, log_std)?;
    let rho: Vec<f64> = tape
        .value(lp)
        .iter()
        .zip(&sample.log_prob_old)
        .map(|(n, o)| (n - o).exp())
        .collect();
    let mut to_go = vec![0.0; h];
    let mut acc = 0.0;
    for t in (0..h).rev() {
        acc = sample.env_rewards[t] + gamma * acc;
        to_go[t] = acc;
    }
    let seed: Vec<f64> = (0..h).map(|t| gamma.powi(t as i32) * rho[t] * to_go[t]).collect();
    let adj = tape.backward(&[(lp, seed)])?;
    Ok((adj.flatten(&bound), rho))
}

/// Runs the three estimators on `samples` fresh trajectories of `θ_old` and
/// compares each with the quadrature truth.
pub fn estimator_lab(cfg: &LabConfig) -> Result<LabReport> {
    let task = SurrogateTask::from_kind(cfg.env)?;
    let env = task.env();
    let mut streams = rng::seed_everything(cfg.seed);
    let theta_new: [f64; 4] = {
        let mut t = cfg.theta_old;
        for x in t.iter_mut() {
            let z: f64 = streams.init.sample(StandardNormal);
            *x += cfg.perturbation * z;
        }
        t
    };
    let old = linear_policy(env.as_ref(), &cfg.theta_old)?;
    let new = linear_policy(env.as_ref(), &theta_new)?;
    let lg_old = LinearGaussian::from_policy(&old)?;
    let lg_new = LinearGaussian::from_policy(&new)?;
    let truth_on = surrogate_grad_true(&task, &lg_old, &lg_old, cfg.gamma, cfg.quadrature_points)?;
    let truth_off = surrogate_grad_true(&task, &lg_old, &lg_new, cfg.gamma, cfg.quadrature_points)?;

    let horizon = env.episode_length();
    let n = cfg.samples;
    let mut batch = EnvBatch::new(env, n, &mut streams.env_reset);
    let rcfg = RolloutConfig {
        horizon,
        gamma: cfg.gamma,
        temperature: 0.0,
        terminal_value: false,
    };
    let buf = rollout::collect(
        &mut batch,
        &old,
        None,
        &rcfg,
        &mut streams.policy_noise,
        &mut streams.env_reset,
        false,
    )?
    .buffer;

    let mut xa = Vec::with_capacity(n);
    let mut xb = Vec::with_capacity(n);
    let mut xc = Vec::with_capacity(n);
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let sample = buf.subset(&[i]);
        xa.push(cached_gradient_sample(&old, &sample, n)?);
        xb.push(cached_gradient_sample(&new, &sample, n)?);
        let (g, rho) = reinforce_sample(&new, &sample, cfg.gamma)?;
        for r in rho {
            rmin = rmin.min(r);
            rmax = rmax.max(r);
        }
        xc.push(g);
    }
    Ok(LabReport {
        env: cfg.env,
        samples: n,
        seed: cfg.seed,
        theta_old: cfg.theta_old.to_vec(),
        theta_new: theta_new.to_vec(),
        estimators: vec![
            summarize("cached_on_policy", &xa, &truth_on.gradient),
            summarize("cached_off_policy_unclipped", &xb, &truth_off.gradient),
            summarize("reinforce_off_policy", &xc, &truth_off.gradient),
        ],
        truth_on_policy: truth_on,
        truth_off_policy: truth_off,
        ratio_min: rmin,
        ratio_max: rmax,
    })
}
