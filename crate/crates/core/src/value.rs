//! Double critic and its regression training.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::graph::{NodeRef, Tape};
use crate::nn::{clip_grad_norm, AdamWConfig, AdamWState, Mlp, MlpSpec, NnError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValueError {
    #[error("critic loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("{states} state rows but {targets} targets")]
    Mismatch { states: usize, targets: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Settings for one round of critic regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticTraining {
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

/// Two value networks of identical architecture and independent weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleCritic {
    nets: [Mlp; 2],
    optims: [AdamWState; 2],
}

impl DoubleCritic {
    /// Each critic is initialized from its own generator.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        layer_norm: bool,
        optim: AdamWConfig,
        rng_a: &mut R,
        rng_b: &mut R,
    ) -> Self {
        let spec = MlpSpec {
            input: state_dim,
            hidden: hidden.to_vec(),
            output: 1,
            layer_norm,
            head_gain: 1.0,
        };
        let a = Mlp::new(spec.clone(), rng_a);
        let b = Mlp::new(spec, rng_b);
        Self::from_nets(a, b, optim)
    }

    pub fn from_nets(a: Mlp, b: Mlp, optim: AdamWConfig) -> Self {
        assert_eq!(a.spec(), b.spec(), "critics must share an architecture");
        let n = a.num_params();
        Self {
            nets: [a, b],
            optims: [AdamWState::new(n, optim), AdamWState::new(n, optim)],
        }
    }

    pub fn nets(&self) -> &[Mlp; 2] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Mlp; 2] {
        &mut self.nets
    }

    pub fn state_dim(&self) -> usize {
        self.nets[0].spec().input
    }

    /// Mean of the two critics for a batch of states.
    pub fn v_bar(&self, states: &[f64], rows: usize) -> Result<Vec<f64>, ValueError> {
        let a = self.nets[0].eval(states, rows)?;
        let b = self.nets[1].eval(states, rows)?;
        Ok(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
    }

    /// `v_bar` recorded on a tape with the critic weights as constants, so
    /// gradients reach the states but never the critic parameters.
    pub fn v_bar_node(&self, tape: &mut Tape, states: NodeRef) -> Result<NodeRef, ValueError> {
        let ba = self.nets[0].bind_const(tape);
        let va = self.nets[0].forward(tape, &ba, states)?;
        let bb = self.nets[1].bind_const(tape);
        let vb = self.nets[1].forward(tape, &bb, states)?;
        let s = tape.add(va, vb).map_err(NnError::from)?;
        Ok(tape.scale(s, 0.5).map_err(NnError::from)?)
    }

    /// Regresses both critics toward the same frozen targets. Returns the
    /// per-epoch mean squared error averaged over the two critics.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        states: &[f64],
        targets: &[f64],
        cfg: CriticTraining,
        rng: &mut R,
    ) -> Result<Vec<f64>, ValueError> {
        let sd = self.state_dim();
        let n = targets.len();
        if states.len() != n * sd {
            return Err(ValueError::Mismatch {
                states: states.len() / sd.max(1),
                targets: n,
            });
        }
        let mb = cfg.minibatch.clamp(1, n.max(1));
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(rng);
            let mut sq_sum = 0.0;
            for chunk in order.chunks(mb) {
                let xs: Vec<f64> = chunk
                    .iter()
                    .flat_map(|&i| states[i * sd..(i + 1) * sd].iter().copied())
                    .collect();
                let ys: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                for k in 0..2 {
                    let (loss_sum, mut grad) = mse_gradient(&self.nets[k], &xs, &ys)?;
                    if !loss_sum.is_finite() {
                        return Err(ValueError::NonFiniteLoss { epoch });
                    }
                    sq_sum += loss_sum;
                    clip_grad_norm(&mut grad, cfg.grad_clip);
                    let mut flat = self.nets[k].flat();
                    self.optims[k].step(&mut flat, &grad, cfg.lr)?;
                    self.nets[k].set_flat(&flat)?;
                }
            }
            trace.push(sq_sum / (2.0 * n as f64));
        }
        Ok(trace)
    }
}

/// Sum of squared errors on a minibatch and the gradient of the mean loss.
fn mse_gradient(net: &Mlp, xs: &[f64], ys: &[f64]) -> Result<(f64, Vec<f64>), ValueError> {
    let rows = ys.len();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.constant((rows, net.spec().input), xs.to_vec());
    let v = net.forward(&mut tape, &bound, x)?;
    let pred = tape.value(v);
    let mut sq = 0.0;
    let seed: Vec<f64> = pred
        .iter()
        .zip(ys)
        .map(|(p, y)| {
            let d = p - y;
            sq += d * d;
            2.0 * d / rows as f64
        })
        .collect();
    let adj = tape.backward(&[(v, seed)]).map_err(NnError::from)?;
    Ok((sq, adj.flatten(&bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn critic(seed_a: u64, seed_b: u64) -> DoubleCritic {
        DoubleCritic::new(
            2,
            &[8, 8],
            true,
            AdamWConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(seed_a),
            &mut ChaCha8Rng::seed_from_u64(seed_b),
        )
    }

    fn zero_head(c: &mut DoubleCritic) {
        for net in c.nets_mut() {
            for p in net.params_mut() {
                if p.name.starts_with("head") {
                    p.data.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
    }

    #[test]
    fn v_bar_is_mean() {
        let mut c = critic(1, 2);
        // identical critics
        let a = c.nets()[0].clone();
        c.nets_mut()[1] = a.clone();
        let s = [0.3, -0.2];
        assert_eq!(c.v_bar(&s, 1).unwrap(), a.eval(&s, 1).unwrap());

        // constant heads 2 and 4
        let mut c = critic(1, 2);
        zero_head(&mut c);
        for (k, val) in [(0, 2.0), (1, 4.0)] {
            let p = c.nets_mut()[k].params_mut().last_mut().unwrap();
            p.data[0] = val;
        }
        assert_eq!(c.v_bar(&s, 1).unwrap(), vec![3.0]);
    }

    #[test]
    fn zero_heads_give_zero_everywhere() {
        let mut c = critic(3, 4);
        zero_head(&mut c);
        let s = [0.1, 0.2, -3.0, 5.0, 0.0, 0.0];
        assert_eq!(c.v_bar(&s, 3).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_targets_only_decay() {
        let mut c = critic(3, 4);
        zero_head(&mut c);
        let before: Vec<Vec<f64>> = c.nets().iter().map(Mlp::flat).collect();
        let states = vec![0.5; 16];
        let cfg = CriticTraining {
            epochs: 3,
            minibatch: 2,
            lr: 1e-2,
            grad_clip: 0.5,
        };
        let trace = c
            .train(&states, &[0.0; 8], cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!(trace.iter().all(|l| *l == 0.0));
        let steps = 3 * 4;
        let factor = (1.0 - 1e-2 * AdamWConfig::default().weight_decay).powi(steps);
        for (net, b) in c.nets().iter().zip(&before) {
            for (x, y) in net.flat().iter().zip(b) {
                assert!((x - y * factor).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_state_loss_decreases() {
        let mut c = critic(5, 6);
        let cfg = CriticTraining {
            epochs: 5,
            minibatch: 1,
            lr: 5e-3,
            grad_clip: 0.5,
        };
        let trace = c
            .train(&[0.4, -0.1], &[1.0], cfg, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for w in trace.windows(2) {
            assert!(w[1] < w[0], "{trace:?}");
        }
    }

    #[test]
    fn seed_permutation_permutes_critics() {
        let ab = critic(10, 20);
        let ba = critic(20, 10);
        assert_eq!(ab.nets()[0], ba.nets()[1]);
        assert_eq!(ab.nets()[1], ba.nets()[0]);
        let s = [0.7, -0.3, 0.1, 0.9];
        assert_eq!(
            ab.v_bar(&s, 2).unwrap(),
            ba.v_bar(&s, 2)
                .unwrap()
                .iter()
                .map(|x| *x)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn v_bar_node_gives_state_gradient_only() {
        let c = critic(1, 2);
        let mut t = Tape::new();
        let s = t.leaf((1, 2), vec![0.2, 0.3]);
        let v = c.v_bar_node(&mut t, s).unwrap();
        assert_eq!(t.value(v), c.v_bar(&[0.2, 0.3], 1).unwrap().as_slice());
        let adj = t.backward(&[(v, vec![1.0])]).unwrap();
        assert!(adj.get(s).iter().any(|g| *g != 0.0));
    }
}
