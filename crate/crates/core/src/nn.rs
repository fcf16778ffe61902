//! Multi-layer perceptrons, AdamW and learning-rate schedules.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, NodeRef, Shape, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has {got} features, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("kl-adaptive schedule needs an observed KL value")]
    MissingKl,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// A named dense parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// Layer sizes and block options of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub layer_norm: bool,
    /// Orthogonal-init gain of the output head.
    pub head_gain: f64,
}

/// Linear → LayerNorm → SiLU blocks followed by a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Param>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Orthogonal matrix (rows×cols) scaled by `gain`, via Gram–Schmidt on a
/// Gaussian draw.
pub fn orthogonal_init<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    gain: f64,
    rng: &mut R,
) -> Vec<f64> {
    // Orthonormalize along the shorter side.
    let (n, len) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        vecs.push(v);
    }
    let mut w = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            w[i * cols + j] = gain * if rows <= cols { vecs[i][j] } else { vecs[j][i] };
        }
    }
    w
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = Vec::new();
        let mut fan_in = spec.input;
        for (i, &h) in spec.hidden.iter().enumerate() {
            params.push(Param {
                name: format!("l{i}.weight"),
                shape: (fan_in, h),
                data: orthogonal_init(fan_in, h, 1.0, rng),
            });
            params.push(Param {
                name: format!("l{i}.bias"),
                shape: (1, h),
                data: vec![0.0; h],
            });
            if spec.layer_norm {
                params.push(Param {
                    name: format!("l{i}.ln_gain"),
                    shape: (1, h),
                    data: vec![1.0; h],
                });
                params.push(Param {
                    name: format!("l{i}.ln_bias"),
                    shape: (1, h),
                    data: vec![0.0; h],
                });
            }
            fan_in = h;
        }
        params.push(Param {
            name: "head.weight".into(),
            shape: (fan_in, spec.output),
            data: orthogonal_init(fan_in, spec.output, spec.head_gain, rng),
        });
        params.push(Param {
            name: "head.bias".into(),
            shape: (1, spec.output),
            data: vec![0.0; spec.output],
        });
        Self { spec, params }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Σ (in+1)·out over all linear layers plus two affine vectors per
    /// normalized hidden layer.
    pub fn expected_param_count(spec: &MlpSpec) -> usize {
        let mut fan_in = spec.input;
        let mut total = 0;
        for &h in &spec.hidden {
            total += (fan_in + 1) * h;
            if spec.layer_norm {
                total += 2 * h;
            }
            fan_in = h;
        }
        total + (fan_in + 1) * spec.output
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeRef> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.shape, p.data.clone()))
            .collect()
    }

    /// Records the parameters as constants (no adjoint).
    pub fn bind_const(&self, tape: &mut Tape) -> Vec<NodeRef> {
        self.params
            .iter()
            .map(|p| tape.constant(p.shape, p.data.clone()))
            .collect()
    }

    /// Forward pass of a batch (rows = samples) using previously bound
    /// parameter nodes.
    pub fn forward(&self, tape: &mut Tape, bound: &[NodeRef], input: NodeRef) -> Result<NodeRef> {
        if input.cols() != self.spec.input {
            return Err(NnError::InputDim {
                expected: self.spec.input,
                got: input.cols(),
            });
        }
        let mut x = input;
        let mut k = 0;
        for _ in &self.spec.hidden {
            let z = tape.matmul(x, bound[k])?;
            let mut z = tape.add(z, bound[k + 1])?;
            k += 2;
            if self.spec.layer_norm {
                let n = tape.normalize(z, LAYER_NORM_EPS)?;
                let g = tape.mul(n, bound[k])?;
                z = tape.add(g, bound[k + 1])?;
                k += 2;
            }
            x = tape.silu(z)?;
        }
        let z = tape.matmul(x, bound[k])?;
        Ok(tape.add(z, bound[k + 1])?)
    }

    /// Plain evaluation of a batch, returning rows × output values.
    pub fn eval(&self, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        if input.len() != rows * self.spec.input {
            return Err(NnError::InputDim {
                expected: self.spec.input,
                got: input.len() / rows.max(1),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind_const(&mut tape);
        let x = tape.constant((rows, self.spec.input), input.to_vec());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).to_vec())
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.7,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(n: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Decoupled weight decay followed by the bias-corrected Adam step.
    /// Non-finite gradients leave both parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(NnError::BadLearningRate(lr));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ParamCount {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index });
        }
        let AdamWConfig {
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] *= 1.0 - lr * weight_decay;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = l2_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub const DEFAULT_GRAD_CLIP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Exponential,
    KlAdaptive,
}

/// Learning-rate schedule. The KL-adaptive variant is stateful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub initial: f64,
    /// Exponential: ratio of the final rate to the initial one.
    pub final_ratio: f64,
    pub kl_target: f64,
    pub kl_multiplier: f64,
    pub min_rate: f64,
    pub max_rate: f64,
    #[serde(skip)]
    current: Option<f64>,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, initial: f64) -> Self {
        Self {
            kind,
            initial,
            final_ratio: 0.01,
            kl_target: 0.008,
            kl_multiplier: 1.5,
            min_rate: 1e-6,
            max_rate: 1e-2,
            current: None,
        }
    }

    /// Rate for `step` of `total_steps`. For the KL-adaptive schedule the
    /// observed KL of the previous update adjusts the running rate.
    pub fn rate(
        &mut self,
        step: usize,
        total_steps: usize,
        observed_kl: Option<f64>,
    ) -> Result<f64> {
        let total = total_steps.max(1) as f64;
        let s = step.min(total_steps) as f64;
        Ok(match self.kind {
            ScheduleKind::Constant => self.initial,
            ScheduleKind::Linear => self.initial * (1.0 - s / total),
            ScheduleKind::Exponential => {
                let decay = self.final_ratio.powf(1.0 / total);
                self.initial * decay.powf(s)
            }
            ScheduleKind::KlAdaptive => {
                let kl = observed_kl.ok_or(NnError::MissingKl)?;
                let mut rate = self.current.unwrap_or(self.initial);
                if kl < self.kl_target / 2.0 {
                    rate *= self.kl_multiplier;
                } else if kl > 2.0 * self.kl_target {
                    rate /= self.kl_multiplier;
                }
                rate = rate.clamp(self.min_rate, self.max_rate);
                self.current = Some(rate);
                rate
            }
        })
    }

    /// The running rate of a KL-adaptive schedule (or `initial`).
    pub fn current(&self) -> f64 {
        self.current.unwrap_or(self.initial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn param_count_matches_formula() {
        for (hidden, ln) in [
            (vec![64, 64], true),
            (vec![400, 200, 100], true),
            (vec![], false),
            (vec![5], false),
        ] {
            let spec = MlpSpec {
                input: 3,
                hidden,
                output: 2,
                layer_norm: ln,
                head_gain: 1.0,
            };
            let net = Mlp::new(spec.clone(), &mut rng());
            assert_eq!(net.num_params(), Mlp::expected_param_count(&spec));
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let spec = MlpSpec {
            input: 3,
            hidden: vec![4],
            output: 2,
            layer_norm: true,
            head_gain: 1.0,
        };
        let mut net = Mlp::new(spec, &mut rng());
        let zeros = vec![0.0; net.num_params()];
        net.set_flat(&zeros).unwrap();
        let out = net.eval(&[0.3, -1.0, 2.0], 1).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let spec = MlpSpec {
            input: 3,
            hidden: vec![],
            output: 3,
            layer_norm: false,
            head_gain: 1.0,
        };
        let mut net = Mlp::new(spec, &mut rng());
        let mut flat = vec![0.0; 12];
        for i in 0..3 {
            flat[i * 3 + i] = 1.0;
        }
        net.set_flat(&flat).unwrap();
        let x = [0.5, -2.0, 7.0];
        assert_eq!(net.eval(&x, 1).unwrap(), x.to_vec());
    }

    #[test]
    fn input_dimension_checked() {
        let spec = MlpSpec {
            input: 3,
            hidden: vec![4],
            output: 1,
            layer_norm: false,
            head_gain: 1.0,
        };
        let net = Mlp::new(spec, &mut rng());
        assert_eq!(
            net.eval(&[1.0, 2.0], 1).unwrap_err(),
            NnError::InputDim {
                expected: 3,
                got: 2
            }
        );
    }

    #[test]
    fn orthogonal_init_has_orthonormal_rows() {
        let w = orthogonal_init(4, 6, 1.0, &mut rng());
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..6).map(|k| w[i * 6 + k] * w[j * 6 + k]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let spec = MlpSpec {
            input: 3,
            hidden: vec![5, 4],
            output: 2,
            layer_norm: true,
            head_gain: 1.0,
        };
        let net = Mlp::new(spec, &mut rng());
        let mut inputs: Vec<(Shape, Vec<f64>)> = net
            .params()
            .iter()
            .map(|p| (p.shape, p.data.clone()))
            .collect();
        inputs.push(((2, 3), vec![0.3, -0.7, 1.1, 2.0, 0.1, -0.4]));
        let n = inputs.len();
        let report = grad_check(&inputs, |t, leaves| {
            let y = net
                .forward(t, &leaves[..n - 1], leaves[n - 1])
                .map_err(|e| match e {
                    NnError::Graph(g) => g,
                    other => panic!("{other}"),
                })?;
            let sq = t.square(y)?;
            t.sum(sq, crate::graph::Axis::All)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut st = AdamWState::new(2, cfg);
        let mut p = vec![2.0, -4.0];
        st.step(&mut p, &[0.0, 0.0], 0.01).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 0.01 * 0.1), -4.0 * (1.0 - 0.01 * 0.1)]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_scalar_step_matches_recurrence() {
        let cfg = AdamWConfig {
            beta1: 0.7,
            beta2: 0.95,
            weight_decay: 0.0,
            eps: 1e-8,
        };
        let mut st = AdamWState::new(1, cfg);
        let mut p = vec![1.0];
        st.step(&mut p, &[1.0], 1e-3).unwrap();
        // m = 0.3, v = 0.05, m̂ = 0.3/0.3 = 1, v̂ = 0.05/0.05 = 1
        let m_hat = (0.3f64) / (1.0 - 0.7);
        let v_hat = (0.05f64) / (1.0 - 0.95);
        let expected = 1.0 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_defaults_and_rejections() {
        let cfg = AdamWConfig::default();
        assert_eq!((cfg.beta1, cfg.beta2), (0.7, 0.95));
        let mut st = AdamWState::new(1, cfg);
        let mut p = vec![1.0];
        assert!(matches!(
            st.step(&mut p, &[f64::NAN], 1e-3),
            Err(NnError::NonFiniteGradient { index: 0 })
        ));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step, 0);
        assert!(st.step(&mut p, &[1.0], 0.0).is_err());
    }

    #[test]
    fn adamw_is_pure_given_state() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(3, cfg);
        let mut p = vec![0.1, 0.2, 0.3];
        st.step(&mut p, &[0.5, -0.1, 2.0], 1e-2).unwrap();
        let (mut s1, mut s2) = (st.clone(), st.clone());
        let (mut p1, mut p2) = (p.clone(), p.clone());
        s1.step(&mut p1, &[0.3, 0.3, -0.3], 1e-2).unwrap();
        s2.step(&mut p2, &[0.3, 0.3, -0.3], 1e-2).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn clip_grad_norm_cases() {
        let mut small = vec![0.3, 0.0];
        clip_grad_norm(&mut small, DEFAULT_GRAD_CLIP);
        assert_eq!(small, vec![0.3, 0.0]);
        let mut g = vec![3.0, 4.0];
        let pre = clip_grad_norm(&mut g, 0.5);
        assert_eq!(pre, 5.0);
        assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);
        assert!((l2_norm(&g) - 0.5).abs() < 1e-15);
        assert_eq!(DEFAULT_GRAD_CLIP, 0.5);
    }

    #[test]
    fn schedules() {
        let mut lin = LrSchedule::new(ScheduleKind::Linear, 2e-3);
        assert_eq!(lin.rate(0, 100, None).unwrap(), 2e-3);
        assert_eq!(lin.rate(100, 100, None).unwrap(), 0.0);

        let mut exp = LrSchedule::new(ScheduleKind::Exponential, 5e-4);
        let last = exp.rate(100, 100, None).unwrap();
        assert!((last - 5e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let r = exp.rate(s, 100, None).unwrap();
            assert!(r > 0.0 && r < prev);
            prev = r;
        }

        let mut kl = LrSchedule::new(ScheduleKind::KlAdaptive, 5e-4);
        assert_eq!(kl.rate(0, 10, None).unwrap_err(), NnError::MissingKl);
        assert!((kl.rate(0, 10, Some(0.002)).unwrap() - 5e-4 * 1.5).abs() < 1e-18);
        let r = kl.rate(1, 10, Some(0.008)).unwrap();
        assert!((r - 5e-4 * 1.5).abs() < 1e-18);
        let r = kl.rate(2, 10, Some(0.05)).unwrap();
        assert!((r - 5e-4).abs() < 1e-18);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_cap(g in prop::collection::vec(-100.0f64..100.0, 1..20), cap in 1e-3f64..10.0) {
            let mut g = g;
            clip_grad_norm(&mut g, cap);
            prop_assert!(l2_norm(&g) <= cap + 1e-12);
        }
    }
}
