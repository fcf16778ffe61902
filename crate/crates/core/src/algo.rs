//! Trainers: RPO and the SHAC, SAPO and PPO baselines.
//!
//! RPO collects one short-horizon batch, caches `∇_a` of the bootstrapped
//! return for every stored action, and then runs `M` policy epochs. Each
//! epoch regenerates the stored actions from the current parameters
//! (`ε_reg = f_θ⁻¹(a; s)`), seeds the regenerated action nodes with the
//! ρ-weighted, gated cached gradients, and adds KL and entropy terms before a
//! single AdamW step. Critics are then regressed on TD-λ targets.

use std::collections::VecDeque;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::DiffEnv;
use crate::graph::{GraphError, NodeRef, Tape};
use crate::nn::{
    clip_grad_norm, l2_norm, AdamWConfig, AdamWState, LrSchedule, NnError, ScheduleKind,
};
use crate::policy::{kl_gaussian, kl_scalar, SquashedNormalPolicy, LOG_STD_MAX, LOG_STD_MIN};
use crate::rng::{seed_everything, RngStreams};
use crate::rollout::{self, Collected, EnvBatch, RolloutBuffer, RolloutConfig, RolloutError};
use crate::value::{CriticTraining, DoubleCritic, ValueError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Value(#[from] ValueError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Rpo,
    Shac,
    Sapo,
    Ppo,
}

impl TrainerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainerKind::Rpo => "rpo",
            TrainerKind::Shac => "shac",
            TrainerKind::Sapo => "sapo",
            TrainerKind::Ppo => "ppo",
        }
    }
}

impl std::str::FromStr for TrainerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rpo" => Ok(Self::Rpo),
            "shac" => Ok(Self::Shac),
            "sapo" => Ok(Self::Sapo),
            "ppo" => Ok(Self::Ppo),
            other => Err(format!("unknown trainer '{other}'")),
        }
    }
}

/// All trainer hyperparameters. Use [`TrainerConfig::for_kind`] for the
/// defaults of each method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub kind: TrainerKind,
    /// Number of collect/update iterations `K`.
    pub iterations: usize,
    pub horizon: usize,
    pub gamma: f64,
    /// TD-λ / GAE mixing.
    pub lambda: f64,
    pub policy_epochs: usize,
    pub critic_epochs: usize,
    pub critic_minibatches: usize,
    pub c_low: f64,
    pub c_high: f64,
    /// Gate cached gradients outside `[1 - c_low, 1 + c_high]`. Off keeps the
    /// ρ weighting but drops the gate.
    pub clip_gate: bool,
    pub lambda_clip: f64,
    pub lambda_kl: f64,
    pub lambda_ent: f64,
    /// Symmetric ratio clip of the PPO baseline.
    pub ppo_clip: f64,
    pub normalize_advantages: bool,
    /// Include `γ^h V̄(s_end)` in the differentiated window objective.
    pub terminal_value: bool,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub schedule: ScheduleKind,
    /// Exponential schedule: final rate over initial rate.
    pub lr_final_ratio: f64,
    pub kl_target: f64,
    pub kl_multiplier: f64,
    pub actor_optim: AdamWConfig,
    pub critic_optim: AdamWConfig,
    pub grad_clip: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub layer_norm: bool,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Entropy-bonus temperature in the reward; 0 disables the bonus.
    pub init_temperature: f64,
    pub adapt_temperature: bool,
    pub temperature_lr: f64,
    /// Defaults to `-dim(A)/2` when unset.
    pub target_entropy: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::for_kind(TrainerKind::Rpo)
    }
}

impl TrainerConfig {
    pub fn for_kind(kind: TrainerKind) -> Self {
        let base = Self {
            kind,
            iterations: 400,
            horizon: 32,
            gamma: 0.99,
            lambda: 0.95,
            policy_epochs: 5,
            critic_epochs: 32,
            critic_minibatches: 4,
            c_low: 0.8,
            c_high: 1.0,
            clip_gate: true,
            lambda_clip: 1.0,
            lambda_kl: 0.4,
            lambda_ent: 0.2,
            ppo_clip: 0.2,
            normalize_advantages: true,
            terminal_value: true,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            schedule: ScheduleKind::Exponential,
            lr_final_ratio: 0.01,
            kl_target: 0.008,
            kl_multiplier: 1.5,
            actor_optim: AdamWConfig::default(),
            critic_optim: AdamWConfig::default(),
            grad_clip: 0.5,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            layer_norm: true,
            log_std_min: LOG_STD_MIN,
            log_std_max: LOG_STD_MAX,
            init_temperature: 0.01,
            adapt_temperature: true,
            temperature_lr: 5e-4,
            target_entropy: None,
        };
        match kind {
            TrainerKind::Rpo => base,
            TrainerKind::Shac => Self {
                policy_epochs: 1,
                critic_epochs: 16,
                lambda_kl: 0.0,
                lambda_ent: 0.0,
                actor_lr: 2e-3,
                schedule: ScheduleKind::Linear,
                init_temperature: 0.0,
                adapt_temperature: false,
                ..base
            },
            TrainerKind::Sapo => Self {
                policy_epochs: 1,
                critic_epochs: 16,
                lambda_kl: 0.0,
                lambda_ent: 0.0,
                actor_lr: 2e-3,
                schedule: ScheduleKind::Linear,
                init_temperature: 1.0,
                temperature_lr: 5e-3,
                ..base
            },
            TrainerKind::Ppo => {
                let betas = AdamWConfig {
                    beta1: 0.9,
                    beta2: 0.999,
                    ..AdamWConfig::default()
                };
                Self {
                    critic_epochs: 5,
                    lambda_kl: 0.0,
                    lambda_ent: 0.0,
                    schedule: ScheduleKind::KlAdaptive,
                    actor_optim: betas,
                    critic_optim: betas,
                    log_std_min: 0.1f64.ln(),
                    log_std_max: 0.0,
                    init_temperature: 0.0,
                    adapt_temperature: false,
                    terminal_value: false,
                    ..base
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.c_low > 0.0 && self.c_low <= 1.0) {
            return fail("c_low must lie in (0, 1]");
        }
        if self.c_high < 0.0 {
            return fail("c_high must be non-negative");
        }
        if self.policy_epochs == 0 || self.horizon == 0 || self.iterations == 0 {
            return fail("policy_epochs, horizon and iterations must be at least 1");
        }
        if self.critic_minibatches == 0 {
            return fail("critic_minibatches must be at least 1");
        }
        let coefs = [
            self.lambda_clip,
            self.lambda_kl,
            self.lambda_ent,
            self.init_temperature,
            self.temperature_lr,
        ];
        if coefs.iter().any(|c| !(*c >= 0.0)) {
            return fail("coefficients must be non-negative");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.grad_clip > 0.0) {
            return fail("learning rates and grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return fail("gamma and lambda must lie in [0, 1]");
        }
        if self.log_std_min >= self.log_std_max {
            return fail("log_std_min must be below log_std_max");
        }
        Ok(())
    }

    /// Importance weight applied to a cached gradient.
    pub fn clip_weight(&self, rho: f64) -> f64 {
        clip_weight(rho, self.c_low, self.c_high, self.clip_gate)
    }
}

/// `ρ` inside `[1 - c_low, 1 + c_high]` (bounds inclusive), else 0. Without
/// the gate every transition keeps its `ρ`.
pub fn clip_weight(rho: f64, c_low: f64, c_high: f64, gate: bool) -> f64 {
    if !gate || (rho >= 1.0 - c_low && rho <= 1.0 + c_high) {
        rho
    } else {
        0.0
    }
}

/// Diagnostics of one policy epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub clip_fraction: f64,
    /// Mean and max over transitions of the Gaussian KL to the behavior policy.
    pub kl_mean: f64,
    pub kl_max: f64,
    /// Largest per-transition KL derivative w.r.t. the mean and log-std heads.
    pub kl_head_grad_max: f64,
    pub entropy: f64,
    /// Every cached gradient was gated out.
    pub surrogate_noop: bool,
    pub regen_clamps: usize,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
}

/// Loss gradient (for minimization) of one epoch with its diagnostics.
#[derive(Debug, Clone)]
pub struct EpochOutput {
    pub grad: Vec<f64>,
    pub metrics: EpochMetrics,
}

/// One row of training diagnostics per iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateMetrics {
    pub iteration: usize,
    pub env_steps: u64,
    /// Mean undiscounted return of recently completed training episodes.
    pub mean_return: f64,
    pub episodes_completed: usize,
    pub objective: f64,
    /// KL between the policy before and after this iteration's updates.
    pub kl_mean: f64,
    pub kl_raw_max: f64,
    pub ratio_mean: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub actor_lr: f64,
    pub critic_loss: f64,
    pub temperature: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub action_clamps: usize,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Deterministic,
    Stochastic,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "stochastic" => Ok(Self::Stochastic),
            other => Err(format!("unknown eval mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_discounted_return: f64,
}

const RECENT_EPISODES: usize = 32;

/// Owns every piece of mutable training state.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainerConfig,
    policy: SquashedNormalPolicy,
    critics: DoubleCritic,
    actor_opt: AdamWState,
    actor_schedule: LrSchedule,
    temp_opt: AdamWState,
    log_alpha: f64,
    batch: EnvBatch,
    streams: RngStreams,
    iteration: usize,
    recent_returns: VecDeque<f64>,
    episodes_completed: usize,
}

impl Trainer {
    pub fn new(
        env: Box<dyn DiffEnv>,
        num_envs: usize,
        cfg: TrainerConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut streams = seed_everything(seed);
        let policy = SquashedNormalPolicy::new(
            env.state_dim(),
            env.bounds(),
            &cfg.actor_hidden,
            cfg.layer_norm,
            &mut streams.init,
        )
        .with_log_std_range(cfg.log_std_min, cfg.log_std_max);
        let mut rng_a = ChaCha8Rng::seed_from_u64(streams.init.gen());
        let mut rng_b = ChaCha8Rng::seed_from_u64(streams.init.gen());
        let critics = DoubleCritic::new(
            env.state_dim(),
            &cfg.critic_hidden,
            cfg.layer_norm,
            cfg.critic_optim,
            &mut rng_a,
            &mut rng_b,
        );
        let batch = EnvBatch::new(env, num_envs, &mut streams.env_reset);
        let mut actor_schedule = LrSchedule::new(cfg.schedule, cfg.actor_lr);
        actor_schedule.final_ratio = cfg.lr_final_ratio;
        actor_schedule.kl_target = cfg.kl_target;
        actor_schedule.kl_multiplier = cfg.kl_multiplier;
        let temp_cfg = AdamWConfig {
            weight_decay: 0.0,
            ..cfg.actor_optim
        };
        Ok(Self {
            actor_opt: AdamWState::new(policy.num_params(), cfg.actor_optim),
            temp_opt: AdamWState::new(1, temp_cfg),
            log_alpha: if cfg.init_temperature > 0.0 {
                cfg.init_temperature.ln()
            } else {
                f64::NEG_INFINITY
            },
            cfg,
            policy,
            critics,
            actor_schedule,
            batch,
            streams,
            iteration: 0,
            recent_returns: VecDeque::new(),
            episodes_completed: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &SquashedNormalPolicy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut SquashedNormalPolicy {
        &mut self.policy
    }

    pub fn critics(&self) -> &DoubleCritic {
        &self.critics
    }

    pub fn critics_mut(&mut self) -> &mut DoubleCritic {
        &mut self.critics
    }

    pub fn batch(&self) -> &EnvBatch {
        &self.batch
    }

    pub fn batch_mut(&mut self) -> &mut EnvBatch {
        &mut self.batch
    }

    pub fn env(&self) -> &dyn DiffEnv {
        self.batch.env()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn env_steps(&self) -> u64 {
        self.batch.total_steps()
    }

    /// Current entropy-bonus temperature (0 when disabled).
    pub fn temperature(&self) -> f64 {
        if self.cfg.init_temperature > 0.0 {
            self.log_alpha.exp()
        } else {
            0.0
        }
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg
            .target_entropy
            .unwrap_or(-(self.policy.action_dim() as f64) / 2.0)
    }

    /// Collects one window with the current policy and critics.
    pub fn collect(&mut self, param_grad: bool) -> Result<Collected> {
        let cfg = RolloutConfig {
            horizon: self.cfg.horizon,
            gamma: self.cfg.gamma,
            temperature: self.temperature(),
            terminal_value: self.cfg.terminal_value,
        };
        Ok(rollout::collect(
            &mut self.batch,
            &self.policy,
            Some(&self.critics),
            &cfg,
            &mut self.streams.policy_noise,
            &mut self.streams.env_reset,
            param_grad,
        )?)
    }

    /// Runs one iteration of the configured method.
    pub fn iterate(&mut self) -> Result<UpdateMetrics> {
        let out = match self.cfg.kind {
            TrainerKind::Rpo => self.rpo_iteration(),
            TrainerKind::Shac | TrainerKind::Sapo => self.shac_baseline_iteration(),
            TrainerKind::Ppo => self.ppo_baseline_iteration(),
        }?;
        self.iteration += 1;
        Ok(out)
    }

    /// RPO loss gradient for one epoch; see [`rpo_gradient`].
    pub fn policy_epoch(&self, buf: &RolloutBuffer, epoch: usize) -> Result<EpochOutput> {
        rpo_gradient(&self.policy, &self.cfg, buf, epoch)
    }

    /// Gradient of the mean Gaussian KL to the behavior policy alone.
    pub fn kl_gradient(&self, buf: &RolloutBuffer) -> Result<Vec<f64>> {
        let b = buf.len();
        let mut tape = Tape::new();
        let bound = self.policy.bind(&mut tape);
        let s = tape.constant((b, buf.state_dim), buf.states.clone());
        let (mu, log_std) = self.policy.heads(&mut tape, &bound, s)?;
        let kl = kl_gaussian(&mut tape, &buf.mu_old, &buf.sigma_old, mu, log_std)?;
        let adj = tape.backward(&[(kl, vec![1.0 / b as f64; b])])?;
        Ok(adj.flatten(&bound))
    }

    fn apply_actor_gradient(&mut self, mut grad: Vec<f64>, lr: f64) -> Result<(f64, f64)> {
        let pre = clip_grad_norm(&mut grad, self.cfg.grad_clip);
        let post = l2_norm(&grad);
        let mut flat = self.policy.flat();
        self.actor_opt.step(&mut flat, &grad, lr)?;
        self.policy.set_flat(&flat)?;
        Ok((pre, post))
    }

    fn rpo_epochs(&mut self, buf: &RolloutBuffer, lr: f64) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.policy_epochs);
        for m in 0..self.cfg.policy_epochs {
            let EpochOutput { grad, mut metrics } = self.policy_epoch(buf, m)?;
            let (pre, post) = self.apply_actor_gradient(grad, lr)?;
            metrics.grad_norm_pre = pre;
            metrics.grad_norm_post = post;
            out.push(metrics);
        }
        Ok(out)
    }

    /// Collect, cache action-gradients, `M` policy epochs, `L` critic epochs.
    pub fn rpo_iteration(&mut self) -> Result<UpdateMetrics> {
        let before = self.policy.clone();
        let opt_before = self.actor_opt.clone();
        let buf = self.collect(false)?.buffer;
        let lr = self
            .actor_schedule
            .rate(self.iteration, self.cfg.iterations, None)?;
        let epochs = match self.rpo_epochs(&buf, lr) {
            Ok(e) => e,
            Err(e) => {
                self.policy = before;
                self.actor_opt = opt_before;
                return Err(e);
            }
        };
        self.finish_iteration(buf, before, lr, epochs)
    }

    /// One policy step along the direct short-horizon gradient. With a
    /// positive temperature this is the entropy-regularized (SAPO-style)
    /// variant.
    pub fn shac_baseline_iteration(&mut self) -> Result<UpdateMetrics> {
        let before = self.policy.clone();
        let collected = self.collect(true)?;
        let grad: Vec<f64> = collected
            .policy_grad
            .unwrap_or_default()
            .iter()
            .map(|g| -g)
            .collect();
        let buf = collected.buffer;
        let lr = self
            .actor_schedule
            .rate(self.iteration, self.cfg.iterations, None)?;
        let (pre, post) = self.apply_actor_gradient(grad, lr)?;
        let entropy = buf.entropy.iter().sum::<f64>() / buf.len() as f64;
        let epoch = EpochMetrics {
            epoch: 0,
            ratio_mean: 1.0,
            ratio_min: 1.0,
            ratio_max: 1.0,
            clip_fraction: 0.0,
            kl_mean: 0.0,
            kl_max: 0.0,
            kl_head_grad_max: 0.0,
            entropy,
            surrogate_noop: false,
            regen_clamps: 0,
            grad_norm_pre: pre,
            grad_norm_post: post,
        };
        self.finish_iteration(buf, before, lr, vec![epoch])
    }

    /// Gradient of the clipped likelihood-ratio loss for one PPO epoch.
    pub fn ppo_epoch(
        &self,
        buf: &RolloutBuffer,
        advantages: &[f64],
        epoch: usize,
    ) -> Result<EpochOutput> {
        let b = buf.len();
        let (sd, ad) = (buf.state_dim, buf.action_dim);
        let mut tape = Tape::new();
        let bound = self.policy.bind(&mut tape);
        let s = tape.constant((b, sd), buf.states.clone());
        let (mu, log_std) = self.policy.heads(&mut tape, &bound, s)?;
        let u: Vec<f64> = buf
            .actions
            .iter()
            .enumerate()
            .map(|(k, &a)| self.policy.unsquash(a, k % ad).0)
            .collect();
        let u = tape.constant((b, ad), u);
        let lp = self.policy.log_prob_node(&mut tape, u, mu, log_std)?;
        let rho: Vec<f64> = tape
            .value(lp)
            .iter()
            .zip(&buf.log_prob_old)
            .map(|(n, o)| (n - o).exp())
            .collect();
        let eps = self.cfg.ppo_clip;
        let mut clipped = 0usize;
        let seed: Vec<f64> = (0..b)
            .map(|i| {
                let (a, r) = (advantages[i], rho[i]);
                let outside = (a > 0.0 && r > 1.0 + eps) || (a < 0.0 && r < 1.0 - eps);
                if outside {
                    clipped += 1;
                    0.0
                } else {
                    -a * r / b as f64
                }
            })
            .collect();
        let adj = tape.backward(&[(lp, seed)])?;
        let grad = adj.flatten(&bound);
        let lp_v: Vec<f64> = rho
            .iter()
            .zip(&buf.log_prob_old)
            .map(|(r, o)| r.ln() + o)
            .collect();
        let bf = b as f64;
        let metrics = EpochMetrics {
            epoch,
            ratio_mean: rho.iter().sum::<f64>() / bf,
            ratio_min: rho.iter().copied().fold(f64::INFINITY, f64::min),
            ratio_max: rho.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            clip_fraction: clipped as f64 / bf,
            kl_mean: 0.0,
            kl_max: 0.0,
            kl_head_grad_max: 0.0,
            entropy: -lp_v.iter().sum::<f64>() / bf,
            surrogate_noop: clipped == b,
            regen_clamps: 0,
            grad_norm_pre: l2_norm(&grad),
            grad_norm_post: 0.0,
        };
        Ok(EpochOutput { grad, metrics })
    }

    /// GAE advantages on a buffer with the current critics.
    pub fn advantages(&self, buf: &RolloutBuffer) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.critics.v_bar(&buf.states, buf.len())?;
        let v_next = self.critics.v_bar(&buf.next_states, buf.len())?;
        let adv = gae(
            &buf.rewards,
            &v,
            &v_next,
            &buf.dones,
            buf.num_envs,
            buf.horizon,
            self.cfg.gamma,
            self.cfg.lambda,
        );
        let returns = adv.iter().zip(&v).map(|(a, v)| a + v).collect();
        Ok((adv, returns))
    }

    /// Model-free baseline: GAE advantages, clipped likelihood-ratio epochs
    /// and a KL-adaptive learning rate.
    pub fn ppo_baseline_iteration(&mut self) -> Result<UpdateMetrics> {
        let before = self.policy.clone();
        let opt_before = self.actor_opt.clone();
        let buf = self.collect(false)?.buffer;
        let (mut adv, returns) = self.advantages(&buf)?;
        if self.cfg.normalize_advantages {
            normalize(&mut adv);
        }
        let mut lr = self.actor_schedule.current();
        let mut epochs = Vec::with_capacity(self.cfg.policy_epochs);
        for m in 0..self.cfg.policy_epochs {
            let step = self.ppo_epoch(&buf, &adv, m).and_then(|out| {
                let (pre, post) = self.apply_actor_gradient(out.grad, lr)?;
                Ok((out.metrics, pre, post))
            });
            let (mut metrics, pre, post) = match step {
                Ok(x) => x,
                Err(e) => {
                    self.policy = before;
                    self.actor_opt = opt_before;
                    return Err(e);
                }
            };
            metrics.grad_norm_pre = pre;
            metrics.grad_norm_post = post;
            let (kl_mean, kl_max) = mean_kl(&before, &self.policy, &buf)?;
            metrics.kl_mean = kl_mean;
            metrics.kl_max = kl_max;
            epochs.push(metrics);
            lr = self
                .actor_schedule
                .rate(self.iteration, self.cfg.iterations, Some(kl_mean))?;
        }
        let used_lr = lr;
        self.finish_with_targets(buf, returns, before, used_lr, epochs)
    }

    fn update_temperature(&mut self, buf: &RolloutBuffer) -> Result<()> {
        if !(self.cfg.adapt_temperature && self.cfg.init_temperature > 0.0) {
            return Ok(());
        }
        // minimize α·(H_est - H_target) over log α: entropy above the target
        // lowers the temperature
        let h = buf.entropy.iter().sum::<f64>() / buf.len() as f64;
        let g = h - self.target_entropy();
        let mut p = [self.log_alpha];
        self.temp_opt.step(&mut p, &[g], self.cfg.temperature_lr)?;
        self.log_alpha = p[0];
        Ok(())
    }

    fn train_critics(&mut self, buf: &RolloutBuffer, targets: &[f64]) -> Result<f64> {
        let cfg = CriticTraining {
            epochs: self.cfg.critic_epochs,
            minibatch: (buf.len() / self.cfg.critic_minibatches).max(1),
            lr: self.cfg.critic_lr,
            grad_clip: self.cfg.grad_clip,
        };
        let snapshot = self.critics.clone();
        match self
            .critics
            .train(&buf.states, targets, cfg, &mut self.streams.shuffle)
        {
            Ok(trace) => Ok(trace.last().copied().unwrap_or(0.0)),
            Err(e) => {
                self.critics = snapshot;
                Err(e.into())
            }
        }
    }

    fn finish_iteration(
        &mut self,
        buf: RolloutBuffer,
        before: SquashedNormalPolicy,
        lr: f64,
        epochs: Vec<EpochMetrics>,
    ) -> Result<UpdateMetrics> {
        let targets = rollout::value_targets(&buf, &self.critics, self.cfg.gamma, self.cfg.lambda)?;
        self.finish_with_targets(buf, targets, before, lr, epochs)
    }

    fn finish_with_targets(
        &mut self,
        buf: RolloutBuffer,
        targets: Vec<f64>,
        before: SquashedNormalPolicy,
        lr: f64,
        epochs: Vec<EpochMetrics>,
    ) -> Result<UpdateMetrics> {
        let temperature = self.temperature();
        self.update_temperature(&buf)?;
        let critic_loss = self.train_critics(&buf, &targets)?;
        let (kl_mean, kl_raw_max) = mean_kl(&before, &self.policy, &buf)?;

        for r in &buf.completed_episode_returns {
            self.recent_returns.push_back(*r);
            if self.recent_returns.len() > RECENT_EPISODES {
                self.recent_returns.pop_front();
            }
        }
        self.episodes_completed += buf.completed_episode_returns.len();
        let mean_return = if self.recent_returns.is_empty() {
            f64::NAN
        } else {
            self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64
        };
        let m = epochs.len().max(1) as f64;
        let last = epochs.last();
        Ok(UpdateMetrics {
            iteration: self.iteration,
            env_steps: self.batch.total_steps(),
            mean_return,
            episodes_completed: self.episodes_completed,
            objective: buf.objective,
            kl_mean,
            kl_raw_max,
            ratio_mean: epochs.iter().map(|e| e.ratio_mean).sum::<f64>() / m,
            clip_fraction: epochs.iter().map(|e| e.clip_fraction).sum::<f64>() / m,
            entropy: buf.entropy.iter().sum::<f64>() / buf.len() as f64,
            actor_lr: lr,
            critic_loss,
            temperature,
            grad_norm_pre: last.map_or(0.0, |e| e.grad_norm_pre),
            grad_norm_post: last.map_or(0.0, |e| e.grad_norm_post),
            action_clamps: buf.action_clamps,
            epochs,
        })
    }

    /// Evaluates the current policy on fresh episodes drawn from `rng`.
    pub fn evaluate(
        &self,
        episodes: usize,
        mode: EvalMode,
        rng: &mut dyn RngCore,
    ) -> Result<EvalReport> {
        evaluate(
            &self.policy,
            self.env(),
            episodes,
            mode,
            self.cfg.gamma,
            rng,
        )
    }
}

/// Gradient of the RPO policy loss for one epoch on a fixed buffer.
///
/// The stored actions are regenerated from the current parameters; the
/// regenerated action nodes are seeded with `-λ_clip·w(ρ)·g`, the mean KL
/// node with `λ_KL` and the mean log-density of the regenerated actions
/// with `λ_ent` (the negated entropy bonus). `ρ` enters as a constant.
pub fn rpo_gradient(
    policy: &SquashedNormalPolicy,
    cfg: &TrainerConfig,
    buf: &RolloutBuffer,
    epoch: usize,
) -> Result<EpochOutput> {
    let b = buf.len();
    let (sd, ad) = (buf.state_dim, buf.action_dim);
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape);
    let s = tape.constant((b, sd), buf.states.clone());
    let (mu, log_std) = policy.heads(&mut tape, &bound, s)?;
    let mu_v = tape.value(mu).to_vec();
    let sigma_v: Vec<f64> = tape.value(log_std).iter().map(|l| l.exp()).collect();
    let (eps, regen_clamps) = policy.inverse_with(&buf.actions, &mu_v, &sigma_v);
    let nodes = policy.sample_from_heads(&mut tape, mu, log_std, &eps)?;
    let lp_new = policy.log_prob_with(&buf.actions, &mu_v, &sigma_v);

    let rho: Vec<f64> = lp_new
        .iter()
        .zip(&buf.log_prob_old)
        .map(|(n, o)| (n - o).exp())
        .collect();
    let weights: Vec<f64> = rho.iter().map(|&r| cfg.clip_weight(r)).collect();
    let gated = rho
        .iter()
        .zip(&weights)
        .filter(|(r, w)| **w == 0.0 && **r != 0.0)
        .count();
    let action_seed: Vec<f64> = (0..b * ad)
        .map(|k| -cfg.lambda_clip * weights[k / ad] * buf.grads[k])
        .collect();
    let mut seeds: Vec<(NodeRef, Vec<f64>)> = vec![(nodes.action, action_seed)];

    let kl = kl_gaussian(&mut tape, &buf.mu_old, &buf.sigma_old, mu, log_std)?;
    if cfg.lambda_kl > 0.0 {
        seeds.push((kl, vec![cfg.lambda_kl / b as f64; b]));
    }
    if cfg.lambda_ent > 0.0 {
        let lp = policy.log_prob_node(&mut tape, nodes.pre_squash, mu, log_std)?;
        seeds.push((lp, vec![cfg.lambda_ent / b as f64; b]));
    }
    let kl_v = tape.value(kl).to_vec();
    let adj = tape.backward(&seeds)?;
    let grad = adj.flatten(&bound);

    let mut kl_head_grad_max = 0.0f64;
    for k in 0..b * ad {
        let var = sigma_v[k] * sigma_v[k];
        let d = buf.mu_old[k] - mu_v[k];
        let g_mu = d / var;
        let g_ls = 1.0 - (buf.sigma_old[k] * buf.sigma_old[k] + d * d) / var;
        kl_head_grad_max = kl_head_grad_max.max(g_mu.abs()).max(g_ls.abs());
    }
    let bf = b as f64;
    let metrics = EpochMetrics {
        epoch,
        ratio_mean: rho.iter().sum::<f64>() / bf,
        ratio_min: rho.iter().copied().fold(f64::INFINITY, f64::min),
        ratio_max: rho.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        clip_fraction: gated as f64 / bf,
        kl_mean: kl_v.iter().sum::<f64>() / bf,
        kl_max: kl_v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        kl_head_grad_max,
        entropy: -lp_new.iter().sum::<f64>() / bf,
        surrogate_noop: weights.iter().all(|w| *w == 0.0),
        regen_clamps,
        grad_norm_pre: l2_norm(&grad),
        grad_norm_post: 0.0,
    };
    Ok(EpochOutput { grad, metrics })
}

/// Mean and max over buffer states of `KL(old ‖ new)` on the pre-squash
/// Gaussians.
pub fn mean_kl(
    old: &SquashedNormalPolicy,
    new: &SquashedNormalPolicy,
    buf: &RolloutBuffer,
) -> Result<(f64, f64)> {
    let rows = buf.len();
    let (mo, so) = old.distribution(&buf.states, rows)?;
    let (mn, sn) = new.distribution(&buf.states, rows)?;
    let ad = buf.action_dim;
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for r in 0..rows {
        let kl: f64 = (r * ad..(r + 1) * ad)
            .map(|k| kl_scalar(mo[k], so[k], mn[k], sn[k]))
            .sum();
        sum += kl;
        max = max.max(kl);
    }
    Ok((sum / rows as f64, max))
}

/// Generalized advantage estimates on t-major arrays (`t * num_envs + n`).
/// Window ends and time-limit boundaries bootstrap from `next_values`.
#[allow(clippy::too_many_arguments)]
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    num_envs: usize,
    horizon: usize,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    for e in 0..num_envs {
        let mut later = 0.0;
        for t in (0..horizon).rev() {
            let i = t * num_envs + e;
            let delta = rewards[i] + gamma * next_values[i] - values[i];
            let carry = if t == horizon - 1 || dones[i] {
                0.0
            } else {
                gamma * lambda * later
            };
            out[i] = delta + carry;
            later = out[i];
        }
    }
    out
}

/// Standardizes in place; skipped when the spread is negligible.
pub fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-8 {
        xs.iter_mut().for_each(|x| *x = (*x - mean) / std);
    }
}

/// Rolls a batch of episodes from the given start states for `steps` steps.
/// Returns per-episode undiscounted and discounted returns.
pub fn rollout_returns(
    policy: &SquashedNormalPolicy,
    env: &dyn DiffEnv,
    starts: &[f64],
    steps: usize,
    mode: EvalMode,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sd = env.state_dim();
    let rows = starts.len() / sd;
    let ad = env.action_dim();
    let mut s = starts.to_vec();
    let mut ret = vec![0.0; rows];
    let mut disc_ret = vec![0.0; rows];
    let mut disc = 1.0;
    for _ in 0..steps {
        let actions = match mode {
            EvalMode::Deterministic => policy.mode(&s, rows)?,
            EvalMode::Stochastic => {
                let eps: Vec<f64> = (0..rows * ad).map(|_| rng.sample(StandardNormal)).collect();
                policy.act(&s, rows, &eps)?.0
            }
        };
        let (next, r) = env.step_values(&s, &actions, rows)?;
        for i in 0..rows {
            ret[i] += r[i];
            disc_ret[i] += disc * r[i];
        }
        disc *= gamma;
        s = next;
    }
    Ok((ret, disc_ret))
}

/// Mean ± std of undiscounted returns over `episodes` full-length episodes.
pub fn evaluate(
    policy: &SquashedNormalPolicy,
    env: &dyn DiffEnv,
    episodes: usize,
    mode: EvalMode,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<EvalReport> {
    let mut starts = Vec::with_capacity(episodes * env.state_dim());
    for _ in 0..episodes {
        starts.extend(env.reset(rng));
    }
    let (ret, disc) =
        rollout_returns(policy, env, &starts, env.episode_length(), mode, gamma, rng)?;
    let n = episodes.max(1) as f64;
    let mean = ret.iter().sum::<f64>() / n;
    let std = (ret.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport {
        mode,
        episodes,
        mean_return: mean,
        std_return: std,
        mean_discounted_return: disc.iter().sum::<f64>() / n,
    })
}
