//! Gradient-correctness suite: every primitive, every environment step, a
//! full double-integrator return and the actor graph, each compared with
//! central differences at random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envs::{DiffEnv, DoubleIntegrator, EnvConfig, EnvKind};
use crate::graph::{grad_check, Axis, GraphError, NodeRef, Shape, Tape};
use crate::nn::{Mlp, MlpSpec};
use crate::policy::{ActionBounds, SquashedNormalPolicy};

/// Relative-error bound every check must meet.
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[NodeRef]) -> Result<NodeRef, GraphError>>;
type Sample = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<(Shape, Vec<f64>)>>;

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> (Shape, Vec<f64>) {
    (shape, (0..shape.0 * shape.1).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Uniform entries kept at least `gap` away from each kink.
fn away_from(rng: &mut ChaCha8Rng, shape: Shape, kinks: &[f64], gap: f64) -> (Shape, Vec<f64>) {
    let v = (0..shape.0 * shape.1)
        .map(|_| loop {
            let x: f64 = rng.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect();
    (shape, v)
}

/// Reduces `y` to `Σ w ⊙ y` with fixed pseudo-random weights so every
/// output entry contributes a distinct amount.
fn project(tape: &mut Tape, y: NodeRef) -> Result<NodeRef, GraphError> {
    let w: Vec<f64> = (0..y.len()).map(|k| 0.5 + ((k * 7919) % 13) as f64 / 13.0).collect();
    let w = tape.constant(y.shape(), w);
    let p = tape.mul(y, w)?;
    tape.sum(p, Axis::All)
}

fn unary(name: &str, lo: f64, hi: f64, f: fn(&mut Tape, NodeRef) -> Result<NodeRef, GraphError>) -> (String, Sample, Build) {
    (
        name.into(),
        Box::new(move |r| vec![uniform(r, (3, 4), lo, hi)]),
        Box::new(move |t, x| {
            let y = f(t, x[0])?;
            project(t, y)
        }),
    )
}

fn binary(name: &str, rhs: Shape, f: fn(&mut Tape, NodeRef, NodeRef) -> Result<NodeRef, GraphError>) -> (String, Sample, Build) {
    (
        name.into(),
        Box::new(move |r| vec![uniform(r, (3, 4), -2.0, 2.0), uniform(r, rhs, -2.0, 2.0)]),
        Box::new(move |t, x| {
            let y = f(t, x[0], x[1])?;
            project(t, y)
        }),
    )
}

/// One case per primitive (and per broadcast pattern of the binary ones).
fn primitive_cases() -> Vec<(String, Sample, Build)> {
    let mut cases = vec![
        binary("add", (3, 4), Tape::add),
        binary("add_row_broadcast", (1, 4), Tape::add),
        binary("sub", (3, 4), Tape::sub),
        binary("sub_col_broadcast", (3, 1), Tape::sub),
        binary("mul", (3, 4), Tape::mul),
        binary("mul_scalar_broadcast", (1, 1), Tape::mul),
        binary("matmul", (4, 2), Tape::matmul),
        unary("tanh", -2.0, 2.0, Tape::tanh),
        unary("atanh", -0.9, 0.9, Tape::atanh),
        unary("sin", -3.0, 3.0, Tape::sin),
        unary("cos", -3.0, 3.0, Tape::cos),
        unary("exp", -2.0, 2.0, Tape::exp),
        unary("log", 0.2, 3.0, Tape::log),
        unary("square", -2.0, 2.0, Tape::square),
        unary("silu", -3.0, 3.0, Tape::silu),
        unary("softplus", -3.0, 3.0, Tape::softplus),
    ];
    cases.push((
        "clamp".into(),
        Box::new(|r| vec![away_from(r, (3, 4), &[-0.5, 0.7], 1e-3)]),
        Box::new(|t, x| {
            let y = t.clamp(x[0], -0.5, 0.7)?;
            project(t, y)
        }),
    ));
    cases.push((
        "normalize".into(),
        Box::new(|r| vec![uniform(r, (3, 5), -2.0, 2.0)]),
        Box::new(|t, x| {
            let y = t.normalize(x[0], 1e-5)?;
            project(t, y)
        }),
    ));
    for (name, axis) in [("sum_all", Axis::All), ("sum_rows", Axis::Rows), ("sum_cols", Axis::Cols)] {
        cases.push((
            name.into(),
            Box::new(|r| vec![uniform(r, (3, 4), -2.0, 2.0)]),
            Box::new(move |t, x| {
                let y = t.sum(x[0], axis)?;
                project(t, y)
            }),
        ));
    }
    cases.push((
        "scale".into(),
        Box::new(|r| vec![uniform(r, (3, 4), -2.0, 2.0)]),
        Box::new(|t, x| {
            let y = t.scale(x[0], -1.7)?;
            project(t, y)
        }),
    ));
    cases.push((
        "shift".into(),
        Box::new(|r| vec![uniform(r, (3, 4), -2.0, 2.0)]),
        Box::new(|t, x| {
            let y = t.shift(x[0], 0.3)?;
            let y = t.square(y)?;
            project(t, y)
        }),
    ));
    cases.push((
        "concat".into(),
        Box::new(|r| vec![uniform(r, (3, 2), -2.0, 2.0), uniform(r, (3, 3), -2.0, 2.0)]),
        Box::new(|t, x| {
            let y = t.concat(&[x[0], x[1]])?;
            project(t, y)
        }),
    ));
    cases.push((
        "slice".into(),
        Box::new(|r| vec![uniform(r, (3, 4), -2.0, 2.0)]),
        Box::new(|t, x| {
            let y = t.slice(x[0], 1, 3)?;
            project(t, y)
        }),
    ));
    cases.push((
        "select_rows".into(),
        Box::new(|r| vec![uniform(r, (3, 4), -2.0, 2.0)]),
        Box::new(|t, x| {
            let y = t.select_rows(x[0], vec![true, false, true], vec![0.5; 12])?;
            let y = t.square(y)?;
            project(t, y)
        }),
    ));
    cases
}

fn run_case(name: &str, points: usize, rng: &mut ChaCha8Rng, sample: &Sample, build: &Build) -> CheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let inputs = sample(rng);
        worst = match grad_check(&inputs, |t, x| build(t, x)) {
            Ok(r) => worst.max(r.max_rel_error),
            Err(_) => f64::INFINITY,
        };
    }
    CheckReport {
        name: name.into(),
        points,
        max_rel_error: worst,
        passed: worst < GRAD_TOL,
    }
}

/// Every primitive at `points` random inputs.
pub fn check_primitives(points: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .iter()
        .map(|(name, sample, build)| run_case(name, points, &mut rng, sample, build))
        .collect()
}

/// One step of every environment (both pendulum velocity limits) at
/// `points` random state-action pairs, differentiating a projection of
/// the next state plus the reward.
pub fn check_env_steps(points: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let configs = [
        (EnvKind::DoubleIntegrator, false),
        (EnvKind::Pendulum, false),
        (EnvKind::Pendulum, true),
        (EnvKind::Bandit, false),
        (EnvKind::Chain, false),
    ];
    for (kind, hard) in configs {
        let env = EnvConfig {
            kind,
            hard_clamp: hard,
            ..Default::default()
        }
        .build();
        let name = format!("step_{}{}", kind.as_str(), if hard { "_hard_clamp" } else { "" });
        let sd = env.state_dim();
        let ad = env.action_dim();
        let bounds = env.bounds();
        let env_ref: &dyn DiffEnv = env.as_ref();
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let mut s = env_ref.reset(&mut rng);
            if kind == EnvKind::Pendulum {
                // cover the whole speed range, including the limiter
                s[2] = rng.gen_range(-10.0..10.0);
            }
            let a: Vec<f64> = (0..ad).map(|d| rng.gen_range(bounds.low[d]..bounds.high[d])).collect();
            let res = grad_check(&[((1, sd), s), ((1, ad), a)], |t, x| {
                let (ns, r) = env_ref.step(t, x[0], x[1])?;
                let p = project(t, ns)?;
                t.add(p, r)
            });
            worst = match res {
                Ok(r) => worst.max(r.max_rel_error),
                Err(_) => f64::INFINITY,
            };
        }
        out.push(CheckReport {
            name,
            points,
            max_rel_error: worst,
            passed: worst < GRAD_TOL,
        });
    }
    out
}

/// Undiscounted `steps`-step double-integrator return as a function of the
/// start state and the whole action sequence.
pub fn check_double_integrator_return(steps: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = DoubleIntegrator::default();
    let s0 = env.reset(&mut rng);
    let actions: Vec<f64> = (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut inputs = vec![((1, 2), s0)];
    inputs.extend(actions.iter().map(|a| ((1, 1), vec![*a])));
    let res = grad_check(&inputs, |t, x| {
        let mut s = x[0];
        let mut total = t.scalar(0.0);
        for a in &x[1..] {
            let (ns, r) = env.step(t, s, *a)?;
            total = t.add(total, r)?;
            s = ns;
        }
        Ok(total)
    });
    let worst = res.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY);
    CheckReport {
        name: format!("double_integrator_{steps}_step_return"),
        points: 1,
        max_rel_error: worst,
        passed: worst < GRAD_TOL,
    }
}

/// Actor graph: reparameterized action plus log-density of the pre-squash
/// sample, as a function of all network parameters and the state.
pub fn check_actor(points: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let net = Mlp::new(
            MlpSpec {
                input: 3,
                hidden: vec![5, 4],
                output: 4,
                layer_norm: true,
                head_gain: 1.0,
            },
            &mut rng,
        );
        let policy = SquashedNormalPolicy::from_net(net, ActionBounds::symmetric(2, 1.5));
        let eps: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let state = uniform(&mut rng, (2, 3), -1.0, 1.0);
        let mut inputs: Vec<(Shape, Vec<f64>)> = policy.net().params().iter().map(|p| (p.shape, p.data.clone())).collect();
        inputs.push(state);
        let np = inputs.len() - 1;
        let res = grad_check(&inputs, |t, x| {
            let nodes = policy
                .sample(t, &x[..np], x[np], &eps)
                .map_err(|e| GraphError::InvalidArgument {
                    op: "actor",
                    reason: e.to_string(),
                })?;
            let lp = policy
                .log_prob_node(t, nodes.pre_squash, nodes.mu, nodes.log_std)
                .map_err(|e| GraphError::InvalidArgument {
                    op: "actor",
                    reason: e.to_string(),
                })?;
            let a = project(t, nodes.action)?;
            let l = t.sum(lp, Axis::All)?;
            t.add(a, l)
        });
        worst = match res {
            Ok(r) => worst.max(r.max_rel_error),
            Err(_) => f64::INFINITY,
        };
    }
    CheckReport {
        name: "actor_sample_and_log_prob".into(),
        points,
        max_rel_error: worst,
        passed: worst < GRAD_TOL,
    }
}

/// The full suite.
pub fn grad_check_suite(points: usize, seed: u64) -> Vec<CheckReport> {
    let mut out = check_primitives(points, seed);
    out.extend(check_env_steps(points, seed.wrapping_add(1)));
    out.push(check_double_integrator_return(8, seed.wrapping_add(2)));
    out.push(check_actor(points.min(20).max(1), seed.wrapping_add(3)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_is_covered() {
        let names: Vec<String> = primitive_cases().into_iter().map(|c| c.0).collect();
        for p in [
            "add", "sub", "mul", "matmul", "tanh", "atanh", "sin", "cos", "exp", "log", "square", "silu", "softplus",
            "clamp", "normalize", "sum_all", "scale", "shift", "concat", "slice", "select_rows",
        ] {
            assert!(names.iter().any(|n| n == p), "{p} missing");
        }
    }

    #[test]
    fn small_suite_passes() {
        for r in grad_check_suite(5, 3) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        // a graph whose forward value ignores the leaf cannot match a
        // function that depends on it
        let sample: Sample = Box::new(|r| vec![uniform(r, (1, 2), -1.0, 1.0)]);
        let build: Build = Box::new(|t, x| {
            let c = t.constant((1, 2), t.value(x[0]).iter().map(|v| v * v).collect());
            let y = t.add(x[0], c)?;
            project(t, y)
        });
        let r = run_case("broken", 3, &mut ChaCha8Rng::seed_from_u64(0), &sample, &build);
        assert!(!r.passed);
    }
}
