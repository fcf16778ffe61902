//! End-to-end acceptance checks. Each test writes one `A<n> ... PASS|FAIL`
//! line straight to stderr so it shows up even when output is captured.

use std::f64::consts::PI;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpo::algo::{rollout_returns, rpo_gradient, EvalMode, Trainer, TrainerConfig, TrainerKind};
use rpo::diagnostics::grad_check_suite;
use rpo::envs::{ChainQuadratic, DoubleIntegrator, EnvKind, SmoothPendulum};
use rpo::experiment::{ablation_variants, config_diff, train_seed, ExperimentConfig};
use rpo::nn::l2_norm;
use rpo::oracle::{double_integrator_lqr, estimator_lab, linear_policy, LabConfig};
use rpo::rollout::{collect, td_lambda, EnvBatch, RolloutConfig};

fn report(id: &str, title: &str, pass: bool, detail: String) {
    let line = format!("{id} {title:<40} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn median<T: PartialOrd + Copy>(xs: &[T]) -> T {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn a01_gradient_correctness() {
    let start = Instant::now();
    let reports = grad_check_suite(100, 0);
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let has_return = reports.iter().any(|r| r.name.starts_with("double_integrator_8_step"));
    let pass = failed.is_empty() && has_return && elapsed < Duration::from_secs(30);
    report(
        "A1",
        "gradient correctness",
        pass,
        format!("{} checks, worst rel err {worst:.2e}, {:.1}s, failed {failed:?}", reports.len(), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn a02_cached_gradient_exactness() {
    // Linear policy: μ = w_μ s + b_μ, log σ = w_σ s + b_σ, a = tanh(μ + σ ε).
    let env = ChainQuadratic::default();
    let (gamma, n, horizon) = (0.9, 3, 4);
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let theta = [
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-1.5..-0.5),
        ];
        let policy = linear_policy(&env, &theta).unwrap();
        let mut resets = ChaCha8Rng::seed_from_u64(1);
        let mut noise = ChaCha8Rng::seed_from_u64(trial);
        let mut batch = EnvBatch::new(Box::new(env.clone()), n, &mut resets);
        let cfg = RolloutConfig {
            horizon,
            gamma,
            temperature: 0.0,
            terminal_value: false,
        };
        let b = collect(&mut batch, &policy, None, &cfg, &mut noise, &mut resets, false)
            .unwrap()
            .buffer;
        let [w_mu, w_sig, _, _] = theta;
        // the window holds two complete two-step episodes per env
        for e in 0..n {
            for start in [0, 2] {
                let (i0, i1) = (b.index(start, e), b.index(start + 1, e));
                let (a0, a1) = (b.actions[i0], b.actions[i1]);
                let s1 = b.states[i1];
                assert_eq!(b.states[i0], 1.0);
                assert!((s1 - (0.9 + 0.5 * a0)).abs() < 1e-15);
                let sigma1 = b.sigma_old[i1];
                let da1_ds1 = (1.0 - a1 * a1) * (w_mu + sigma1 * w_sig * b.eps[i1]);
                let g1 = gamma * (-0.2 * a1) / n as f64;
                let g0 = (-0.2 * a0 + gamma * 0.5 * (-2.0 * s1 - 0.2 * a1 * da1_ds1)) / n as f64;
                worst = worst.max((b.grads[i0] - g0).abs()).max((b.grads[i1] - g1).abs());
            }
        }
    }
    let pass = worst < 1e-12;
    report("A2", "cached-gradient exactness", pass, format!("max abs err {worst:.2e}"));
    assert!(pass);
}

fn no_bonus(kind: TrainerKind) -> TrainerConfig {
    TrainerConfig {
        init_temperature: 0.0,
        adapt_temperature: false,
        lambda_ent: 0.0,
        actor_hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        ..TrainerConfig::for_kind(kind)
    }
}

#[test]
fn a03_shac_equivalence() {
    let mut worst_grad: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    for seed in 0..3u64 {
        let rpo_cfg = TrainerConfig {
            policy_epochs: 1,
            clip_gate: false,
            lambda_kl: 0.0,
            ..no_bonus(TrainerKind::Rpo)
        };
        let shac_cfg = TrainerConfig {
            kind: TrainerKind::Shac,
            ..rpo_cfg.clone()
        };
        let mut rpo_t = Trainer::new(Box::new(SmoothPendulum::default()), 8, rpo_cfg, seed).unwrap();
        let mut shac_t = Trainer::new(Box::new(SmoothPendulum::default()), 8, shac_cfg, seed).unwrap();
        assert_eq!(rpo_t.policy().flat(), shac_t.policy().flat());
        // gradient vectors on the first window
        let mut probe_r = Trainer::new(Box::new(SmoothPendulum::default()), 8, rpo_t.config().clone(), seed).unwrap();
        let mut probe_s = Trainer::new(Box::new(SmoothPendulum::default()), 8, shac_t.config().clone(), seed).unwrap();
        let buf = probe_r.collect(false).unwrap().buffer;
        let direct = probe_s.collect(true).unwrap();
        assert_eq!(buf.actions, direct.buffer.actions);
        let cached = probe_r.policy_epoch(&buf, 0).unwrap().grad;
        let shac: Vec<f64> = direct.policy_grad.unwrap().iter().map(|g| -g).collect();
        let scale = l2_norm(&shac).max(1.0);
        for (c, s) in cached.iter().zip(&shac) {
            worst_grad = worst_grad.max((c - s).abs() / scale);
        }
        // and whole iterations
        for _ in 0..3 {
            rpo_t.iterate().unwrap();
            shac_t.iterate().unwrap();
        }
        for (x, y) in rpo_t.policy().flat().iter().zip(shac_t.policy().flat()) {
            worst_param = worst_param.max((x - y).abs());
        }
    }
    let pass = worst_grad < 1e-12 && worst_param < 1e-12;
    report(
        "A3",
        "SHAC equivalence",
        pass,
        format!("grad rel err {worst_grad:.2e}, params after 3 iterations {worst_param:.2e}"),
    );
    assert!(pass);
}

#[test]
fn a04_on_policy_caching_equivalence() {
    let mut worst: f64 = 0.0;
    for (seed, env) in [(0u64, EnvKind::Pendulum), (1, EnvKind::DoubleIntegrator), (2, EnvKind::Chain)] {
        let env_cfg = rpo::envs::EnvConfig { kind: env, ..Default::default() };
        let cfg = no_bonus(TrainerKind::Rpo);
        let mut t = Trainer::new(env_cfg.build(), 8, cfg.clone(), seed).unwrap();
        // check away from initialization too
        for _ in 0..2 {
            t.iterate().unwrap();
        }
        let window = RolloutConfig {
            horizon: cfg.horizon,
            gamma: cfg.gamma,
            temperature: 0.0,
            terminal_value: cfg.terminal_value,
        };
        let run = |param_grad: bool| {
            let mut resets = ChaCha8Rng::seed_from_u64(5);
            let mut noise = ChaCha8Rng::seed_from_u64(6);
            let mut batch = EnvBatch::new(env_cfg.build(), 8, &mut resets);
            batch.set_states(t.batch().states().to_vec());
            collect(&mut batch, t.policy(), Some(t.critics()), &window, &mut noise, &mut resets, param_grad).unwrap()
        };
        let buf = run(false).buffer;
        let direct = run(true);
        assert_eq!(buf.actions, direct.buffer.actions);
        let cached = rpo_gradient(t.policy(), &cfg, &buf, 0).unwrap().grad;
        let want: Vec<f64> = direct.policy_grad.unwrap().iter().map(|g| -g).collect();
        let scale = l2_norm(&want).max(1.0);
        for (c, d) in cached.iter().zip(&want) {
            worst = worst.max((c - d).abs() / scale);
        }
    }
    let pass = worst < 1e-10;
    report("A4", "on-policy caching equivalence", pass, format!("rel err {worst:.2e}"));
    assert!(pass);
}

#[test]
fn a05_off_policy_unbiasedness() {
    let start = Instant::now();
    let mut worst_dev: f64 = 0.0;
    let mut ratio = (f64::INFINITY, f64::NEG_INFINITY);
    let mut details = Vec::new();
    for env in [EnvKind::Bandit, EnvKind::Chain] {
        for seed in 0..3 {
            let lab = estimator_lab(&LabConfig {
                env,
                samples: 100_000,
                seed,
                ..Default::default()
            })
            .unwrap();
            assert_ne!(lab.theta_new, lab.theta_old);
            let est = lab.estimators.iter().find(|e| e.name == "cached_off_policy_unclipped").unwrap();
            let dev = est.deviation_se.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            worst_dev = worst_dev.max(dev);
            ratio = (ratio.0.min(lab.ratio_min), ratio.1.max(lab.ratio_max));
            details.push(format!("{}#{seed}:{dev:.2}", env.as_str()));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_dev < 3.0 && ratio.0 >= 0.2 && ratio.1 <= 2.0 && elapsed < Duration::from_secs(300);
    report(
        "A5",
        "off-policy estimator unbiasedness",
        pass,
        format!(
            "max |dev| {worst_dev:.2} SE [{}], rho in [{:.3}, {:.3}], {:.0}s",
            details.join(" "),
            ratio.0,
            ratio.1,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a06_first_epoch_identities() {
    let mut t = Trainer::new(Box::new(SmoothPendulum::default()), 16, TrainerConfig::default(), 7).unwrap();
    let (mut ratio_err, mut kl, mut kl_grad): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut later_kl = 0.0;
    for _ in 0..50 {
        let m = t.iterate().unwrap();
        let e = &m.epochs[0];
        ratio_err = ratio_err.max((e.ratio_min - 1.0).abs()).max((e.ratio_max - 1.0).abs());
        kl = kl.max(e.kl_max.abs());
        kl_grad = kl_grad.max(e.kl_head_grad_max);
        later_kl += m.epochs.last().unwrap().kl_mean;
    }
    let pass = ratio_err < 1e-9 && kl < 1e-9 && kl_grad < 1e-9 && later_kl > 0.0;
    report(
        "A6",
        "first-epoch identities",
        pass,
        format!("|rho-1| {ratio_err:.1e}, KL {kl:.1e}, KL grad {kl_grad:.1e} over 50 iterations"),
    );
    assert!(pass);
}

/// λ-return written as the explicit mixture of n-step returns.
fn lambda_return(r: &[f64], next_v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = r.len();
    (0..h)
        .map(|t| {
            let n_step = |k: usize| {
                (0..k).map(|j| gamma.powi(j as i32) * r[t + j]).sum::<f64>() + gamma.powi(k as i32) * next_v[t + k - 1]
            };
            let m = h - t;
            let mixed: f64 = (1..m).map(|k| (1.0 - lambda) * lambda.powi(k as i32 - 1) * n_step(k)).sum();
            mixed + lambda.powi(m as i32 - 1) * n_step(m)
        })
        .collect()
}

#[test]
fn a07_td_lambda_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let gamma = rng.gen_range(0.5..1.0);
        let r: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for lambda in [0.0, 1.0, 0.95] {
            let got = td_lambda(&r, &v, &[false; 5], 1, 5, gamma, lambda);
            for (a, b) in got.iter().zip(lambda_return(&r, &v, gamma, lambda)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let pass = worst < 1e-12;
    report("A7", "TD-lambda targets", pass, format!("max abs err {worst:.2e} over 1000 windows"));
    assert!(pass);
}

/// Eight start states on the circle of radius 0.1.
fn lqr_starts() -> Vec<f64> {
    (0..8)
        .flat_map(|k| {
            let a = k as f64 * PI / 4.0;
            [0.1 * a.cos(), 0.1 * a.sin()]
        })
        .collect()
}

#[test]
fn a08_lqr_optimality_gap() {
    let env = DoubleIntegrator::default();
    let cfg = TrainerConfig::default();
    let lqr = double_integrator_lqr(&env, cfg.gamma).unwrap();
    let starts = lqr_starts();
    let opt = starts.chunks(2).map(|s| lqr.value(s)).sum::<f64>() / 8.0;
    let mut gaps = Vec::new();
    let mut slowest: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..5 {
        let start = Instant::now();
        let mut t = Trainer::new(Box::new(env.clone()), 16, cfg.clone(), seed).unwrap();
        for _ in 0..cfg.iterations {
            steps = t.iterate().unwrap().env_steps;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, disc) = rollout_returns(t.policy(), &env, &starts, env.episode_length, EvalMode::Deterministic, cfg.gamma, &mut rng).unwrap();
        let value = disc.iter().sum::<f64>() / 8.0;
        gaps.push((opt - value) / opt.abs());
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    let gap = median(&gaps);
    let pass = gap < 0.05 && slowest < 600.0;
    report(
        "A8",
        "LQR optimality gap",
        pass,
        format!(
            "median gap {:.2}% (seeds {}), oracle {opt:.5}, {steps} steps, slowest seed {slowest:.0}s",
            100.0 * gap,
            gaps.iter().map(|g| format!("{:.2}%", 100.0 * g)).collect::<Vec<_>>().join(" ")
        ),
    );
    assert!(pass);
}

/// Sixteen starts at rest, angles -π + (k + ½)π/8.
fn pendulum_starts() -> Vec<f64> {
    (0..16)
        .flat_map(|k| {
            let phi = -PI + (k as f64 + 0.5) * PI / 8.0;
            [phi.cos(), phi.sin(), 0.0]
        })
        .collect()
}

/// Deterministic return after every iteration as `(env_steps, return)`.
fn pendulum_curve(epochs: usize, seed: u64) -> Vec<(u64, f64)> {
    let env = SmoothPendulum::default();
    let cfg = TrainerConfig {
        policy_epochs: epochs,
        iterations: 200,
        actor_lr: 2e-3,
        actor_hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        ..TrainerConfig::default()
    };
    let starts = pendulum_starts();
    let mut t = Trainer::new(Box::new(env.clone()), 16, cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..cfg.iterations)
        .map(|_| {
            let m = t.iterate().unwrap();
            let (ret, _) = rollout_returns(t.policy(), &env, &starts, env.episode_length, EvalMode::Deterministic, cfg.gamma, &mut rng).unwrap();
            (m.env_steps, ret.iter().sum::<f64>() / 16.0)
        })
        .collect()
}

#[test]
fn a09_sample_reuse_benefit() {
    let epochs = [1usize, 2, 5];
    let curves: Vec<Vec<Vec<(u64, f64)>>> = epochs
        .iter()
        .map(|&m| (0..5).map(|seed| pendulum_curve(m, seed)).collect())
        .collect();
    // threshold: 90% of the way from the initial return to the best M = 1
    // final return, fixed before any crossing is measured
    let all_first: Vec<f64> = curves.iter().flatten().map(|c| c[0].1).collect();
    let initial = all_first.iter().sum::<f64>() / all_first.len() as f64;
    let best_m1 = curves[0].iter().map(|c| c.last().unwrap().1).fold(f64::NEG_INFINITY, f64::max);
    let threshold = initial + 0.9 * (best_m1 - initial);
    let medians: Vec<u64> = curves
        .iter()
        .map(|runs| {
            let hits: Vec<u64> = runs
                .iter()
                .map(|c| c.iter().find(|(_, r)| *r >= threshold).map_or(u64::MAX, |(s, _)| *s))
                .collect();
            median(&hits)
        })
        .collect();
    let pass = medians[2] < medians[0] && medians[2] < medians[1];
    let show = |s: u64| if s == u64::MAX { "never".to_string() } else { s.to_string() };
    report(
        "A9",
        "sample-reuse benefit",
        pass,
        format!(
            "threshold {threshold:.1} (initial {initial:.1}, best M=1 {best_m1:.1}); median steps M=1 {} M=2 {} M=5 {}",
            show(medians[0]),
            show(medians[1]),
            show(medians[2])
        ),
    );
    assert!(pass);
}

#[test]
fn a10_ablation_wiring() {
    let base = ExperimentConfig::resolve(None, &["env.kind=pendulum".into()]).unwrap();
    let variants = ablation_variants(&base).unwrap();
    let full = variants.iter().find(|(n, _)| n == "full").unwrap().1.to_json();
    let expect = [
        ("full", vec![]),
        ("no_kl", vec![("trainer.lambda_kl", serde_json::json!(0.0))]),
        ("epochs_2", vec![("trainer.policy_epochs", serde_json::json!(2))]),
        ("no_clip", vec![("trainer.clip_gate", serde_json::json!(false))]),
    ];
    let mut pass = variants.len() == 4;
    for (name, want) in expect {
        let cfg = &variants.iter().find(|(n, _)| n == name).unwrap().1;
        let diff: Vec<(String, serde_json::Value)> = config_diff(&full, &cfg.to_json()).into_iter().map(|(p, _, b)| (p, b)).collect();
        let want: Vec<(String, serde_json::Value)> = want.into_iter().map(|(p, v)| (p.to_string(), v)).collect();
        pass &= diff == want;
    }
    // the full variant is the base config untouched
    pass &= config_diff(&base.to_json(), &full).is_empty();
    report("A10", "ablation wiring", pass, "four variants, one documented flag each".into());
    assert!(pass);
}

#[test]
fn a11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut rows = 0;
    for kind in ["rpo", "shac", "sapo", "ppo"] {
        let cfg = ExperimentConfig::resolve(
            None,
            &[
                format!("trainer.kind={kind}"),
                "env.kind=pendulum".into(),
                "trainer.iterations=15".into(),
                "trainer.actor_hidden=[16,16]".into(),
                "trainer.critic_hidden=[16,16]".into(),
                "eval.episodes=4".into(),
            ],
        )
        .unwrap();
        let mut csvs = Vec::new();
        for run in ["first", "second"] {
            let out = dir.path().join(kind).join(run);
            train_seed(&cfg, 3, &out, &mut |_| {}).unwrap();
            csvs.push(std::fs::read(out.join("seed_3/metrics.csv")).unwrap());
        }
        rows += String::from_utf8_lossy(&csvs[0]).lines().count() - 1;
        pass &= csvs[0] == csvs[1];
    }
    report("A11", "determinism", pass, format!("4 trainers, {rows} metric rows compared bytewise"));
    assert!(pass);
}
