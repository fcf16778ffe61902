//! Browser demo: squashed-Gaussian density and ratio explorer, the
//! gradient-estimator lab, and a short training run stepped from the page.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use rpo::algo::{rollout_returns, EvalMode, Trainer, TrainerConfig, TrainerKind};
use rpo::envs::{EnvConfig, EnvKind};
use rpo::oracle::{estimator_lab, LabConfig};
use rpo::policy::{kl_scalar, ActionBounds, SquashedNormalPolicy};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityView {
    pub actions: Vec<f64>,
    pub old_density: Vec<f64>,
    pub new_density: Vec<f64>,
    pub ratio: Vec<f64>,
    /// Gaussian KL(old || new) of the pre-squash distributions.
    pub kl: f64,
    /// Probability under the old policy that ρ lies inside the clip gate.
    pub gated_mass: f64,
}

/// Densities of two one-dimensional squashed Gaussians on `(-1, 1)`, their
/// ratio, KL, and the old-policy mass inside `[1 - c_low, 1 + c_high]`.
pub fn density_view(
    old: (f64, f64),
    new: (f64, f64),
    c_low: f64,
    c_high: f64,
    points: usize,
) -> Result<DensityView, String> {
    if points < 2 {
        return Err("need at least two grid points".into());
    }
    let policy = SquashedNormalPolicy::new(1, ActionBounds::symmetric(1, 1.0), &[], false, &mut ChaCha8Rng::seed_from_u64(0));
    let h = 2.0 / points as f64;
    let actions: Vec<f64> = (0..points).map(|i| -1.0 + (i as f64 + 0.5) * h).collect();
    let (so, sn) = (old.1.exp(), new.1.exp());
    let lp_old = policy.log_prob_with(&actions, &vec![old.0; points], &vec![so; points]);
    let lp_new = policy.log_prob_with(&actions, &vec![new.0; points], &vec![sn; points]);
    let ratio: Vec<f64> = lp_new.iter().zip(&lp_old).map(|(n, o)| (n - o).exp()).collect();
    let old_density: Vec<f64> = lp_old.iter().map(|l| l.exp()).collect();
    let gated_mass = old_density
        .iter()
        .zip(&ratio)
        .filter(|(_, r)| (1.0 - c_low..=1.0 + c_high).contains(*r))
        .map(|(p, _)| p * h)
        .sum();
    Ok(DensityView {
        actions,
        old_density,
        new_density: lp_new.iter().map(|l| l.exp()).collect(),
        ratio,
        kl: kl_scalar(old.0, so, new.0, sn),
        gated_mass,
    })
}

pub fn lab_report(env: &str, samples: usize, seed: u64, perturbation: f64) -> Result<String, String> {
    let env: EnvKind = env.parse()?;
    let cfg = LabConfig {
        env,
        samples,
        seed,
        perturbation,
        ..Default::default()
    };
    let report = estimator_lab(&cfg).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub env_steps: u64,
    pub train_return: f64,
    pub eval_return: f64,
    pub kl_mean: f64,
    pub clip_fraction: f64,
}

/// A small trainer driven one iteration at a time.
#[wasm_bindgen]
pub struct Session {
    trainer: Trainer,
    starts: Vec<f64>,
    steps: usize,
}

impl Session {
    pub fn create(trainer: &str, env: &str, policy_epochs: usize, seed: u64) -> Result<Session, String> {
        let kind: TrainerKind = trainer.parse()?;
        let env_cfg = EnvConfig {
            kind: env.parse()?,
            num_envs: 8,
            ..Default::default()
        };
        let mut cfg = TrainerConfig::for_kind(kind);
        cfg.actor_hidden = vec![32, 32];
        cfg.critic_hidden = vec![32, 32];
        cfg.critic_epochs = cfg.critic_epochs.min(8);
        if kind == TrainerKind::Rpo {
            cfg.policy_epochs = policy_epochs.max(1);
        }
        let envb = env_cfg.build();
        let steps = envb.episode_length();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let starts = (0..8).flat_map(|_| envb.reset(&mut rng)).collect();
        let trainer = Trainer::new(envb, env_cfg.num_envs, cfg, seed).map_err(|e| e.to_string())?;
        Ok(Session { trainer, starts, steps })
    }

    pub fn advance(&mut self) -> Result<CurvePoint, String> {
        let m = self.trainer.iterate().map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ret, _) = rollout_returns(
            self.trainer.policy(),
            self.trainer.env(),
            &self.starts,
            self.steps,
            EvalMode::Deterministic,
            self.trainer.config().gamma,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        Ok(CurvePoint {
            iteration: m.iteration,
            env_steps: m.env_steps,
            train_return: m.mean_return,
            eval_return: ret.iter().sum::<f64>() / ret.len() as f64,
            kl_mean: m.kl_mean,
            clip_fraction: m.clip_fraction,
        })
    }
}

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(trainer: &str, env: &str, policy_epochs: usize, seed: u32) -> Result<Session, JsError> {
        Session::create(trainer, env, policy_epochs, seed as u64).map_err(js_err)
    }

    /// Runs one iteration and returns its curve point as JSON.
    pub fn step(&mut self) -> Result<String, JsError> {
        let p = self.advance().map_err(js_err)?;
        Ok(serde_json::to_string(&p)?)
    }
}

#[wasm_bindgen]
pub fn densities(
    mu_old: f64,
    log_std_old: f64,
    mu_new: f64,
    log_std_new: f64,
    c_low: f64,
    c_high: f64,
    points: usize,
) -> Result<String, JsError> {
    let v = density_view((mu_old, log_std_old), (mu_new, log_std_new), c_low, c_high, points).map_err(js_err)?;
    Ok(serde_json::to_string(&v)?)
}

#[wasm_bindgen]
pub fn estimator_lab_json(env: &str, samples: usize, seed: u32, perturbation: f64) -> Result<String, JsError> {
    lab_report(env, samples, seed as u64, perturbation).map_err(js_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_policies() {
        let v = density_view((0.2, -0.5), (0.2, -0.5), 0.8, 1.0, 400).unwrap();
        assert!(v.ratio.iter().all(|r| (r - 1.0).abs() < 1e-12));
        assert_eq!(v.kl, 0.0);
        let mass: f64 = v.old_density.iter().sum::<f64>() * 2.0 / 400.0;
        assert!((v.gated_mass - mass).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one() {
        let v = density_view((0.1, -1.0), (-0.3, -0.7), 0.8, 1.0, 20_000).unwrap();
        for d in [&v.old_density, &v.new_density] {
            let mass: f64 = d.iter().sum::<f64>() * 2.0 / 20_000.0;
            assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        }
        assert!(v.kl > 0.0);
        assert!(v.gated_mass > 0.0 && v.gated_mass < 1.0);
        assert!(density_view((0.0, 0.0), (0.0, 0.0), 0.8, 1.0, 1).is_err());
    }

    #[test]
    fn lab_returns_json() {
        let text = lab_report("bandit", 200, 1, 0.05).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["estimators"].as_array().unwrap().len(), 3);
        assert!(lab_report("pendulum", 200, 1, 0.05).is_err());
    }

    #[test]
    fn session_steps_are_reproducible() {
        let run = || {
            let mut s = Session::create("rpo", "double_integrator", 2, 3).unwrap();
            (0..2).map(|_| s.advance().unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(format!("{a:?}"), format!("{:?}", run()));
        assert!(a[1].env_steps > a[0].env_steps);
        assert!(Session::create("rpo", "moon", 2, 3).is_err());
    }
}
