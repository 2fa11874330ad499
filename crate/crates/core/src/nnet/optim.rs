//! First-order optimizers.

use serde::{Deserialize, Serialize};

use super::{Network, NnetError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Adadelta { rho: f64, eps: f64 },
    RmsProp { lr: f64, alpha: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adadelta() -> Self {
        OptimizerKind::Adadelta { rho: 0.9, eps: 1e-6 }
    }

    pub fn rmsprop(lr: f64) -> Self {
        OptimizerKind::RmsProp {
            lr,
            alpha: 0.99,
            eps: 1e-8,
        }
    }

    /// Monocular fine-tuning setting: SGD, lr 0.005, momentum 0.9.
    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd {
            lr: 0.005,
            momentum: 0.9,
        }
    }
}

/// Optimizer with per-parameter state slots.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<Vec<Tensor>>,
    second: Vec<Vec<Tensor>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &Network) -> Self {
        Self {
            kind,
            steps: 0,
            first: net.zero_grads(),
            second: net.zero_grads(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to `net` given gradients in parameter layout.
    pub fn step(&mut self, net: &mut Network, grads: &[Vec<Tensor>]) -> Result<(), NnetError> {
        let layout_ok = grads.len() == self.first.len()
            && net.layers().len() == self.first.len()
            && grads.iter().zip(&self.first).zip(net.layers()).all(|((g, s), l)| {
                g.len() == s.len()
                    && l.params.len() == s.len()
                    && g.iter()
                        .zip(s)
                        .zip(&l.params)
                        .all(|((a, b), p)| a.shape() == b.shape() && p.shape() == b.shape())
            });
        if !layout_ok {
            return Err(NnetError::StateShapeMismatch(
                "gradients, parameters and optimizer slots disagree".into(),
            ));
        }
        self.steps += 1;
        let t = self.steps as f64;
        for (li, layer) in net.layers_mut().iter_mut().enumerate() {
            for (pi, param) in layer.params.iter_mut().enumerate() {
                let g = grads[li][pi].data();
                let m = self.first[li][pi].data_mut();
                let v = self.second[li][pi].data_mut();
                let w = param.data_mut();
                match self.kind {
                    OptimizerKind::Sgd { lr, momentum } => {
                        for i in 0..w.len() {
                            if momentum == 0.0 {
                                w[i] -= lr * g[i];
                            } else {
                                m[i] = momentum * m[i] + g[i];
                                w[i] -= lr * m[i];
                            }
                        }
                    }
                    OptimizerKind::Adam {
                        lr,
                        beta1,
                        beta2,
                        eps,
                    } => {
                        let c1 = 1.0 - beta1.powf(t);
                        let c2 = 1.0 - beta2.powf(t);
                        for i in 0..w.len() {
                            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                            w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        }
                    }
                    OptimizerKind::Adadelta { rho, eps } => {
                        // m: running E[g²], v: running E[Δ²]
                        for i in 0..w.len() {
                            m[i] = rho * m[i] + (1.0 - rho) * g[i] * g[i];
                            let delta = -((v[i] + eps).sqrt() / (m[i] + eps).sqrt()) * g[i];
                            v[i] = rho * v[i] + (1.0 - rho) * delta * delta;
                            w[i] += delta;
                        }
                    }
                    OptimizerKind::RmsProp { lr, alpha, eps } => {
                        for i in 0..w.len() {
                            m[i] = alpha * m[i] + (1.0 - alpha) * g[i] * g[i];
                            w[i] -= lr * g[i] / (m[i].sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::LayerSpec;

    fn scalar_net(w: f64) -> Network {
        let mut net = Network::new(&[LayerSpec::Linear { inputs: 1, outputs: 1 }], 0).unwrap();
        net.layers_mut()[0].params[0] = Tensor::new(vec![1, 1], vec![w]).unwrap();
        net
    }

    fn grad(g: f64) -> Vec<Vec<Tensor>> {
        vec![vec![
            Tensor::new(vec![1, 1], vec![g]).unwrap(),
            Tensor::zeros(&[1]),
        ]]
    }

    fn weight(net: &Network) -> f64 {
        net.layers()[0].params[0].data()[0]
    }

    #[test]
    fn plain_sgd_step() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1, momentum: 0.0 }, &net);
        opt.step(&mut net, &grad(1.0)).unwrap();
        assert!((weight(&net) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1, momentum: 0.9 }, &net);
        opt.step(&mut net, &grad(1.0)).unwrap();
        assert!((weight(&net) - 0.9).abs() < 1e-12);
        opt.step(&mut net, &grad(1.0)).unwrap();
        assert!((weight(&net) - 0.71).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_matches_formula() {
        let (lr, b1, b2, eps, g) = (0.01, 0.9, 0.999, 1e-8, -3.0);
        let mut net = scalar_net(0.5);
        let mut opt = Optimizer::new(
            OptimizerKind::Adam { lr, beta1: b1, beta2: b2, eps },
            &net,
        );
        opt.step(&mut net, &grad(g)).unwrap();
        let m_hat = ((1.0 - b1) * g) / (1.0 - b1);
        let v_hat = ((1.0 - b2) * g * g) / (1.0 - b2);
        let want = 0.5 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((weight(&net) - want).abs() < 1e-15);
        // Bias correction makes the first step ≈ lr in magnitude.
        assert!(((weight(&net) - 0.5).abs() - lr).abs() < 1e-8);
    }

    #[test]
    fn adadelta_and_rmsprop_descend() {
        for kind in [OptimizerKind::adadelta(), OptimizerKind::rmsprop(0.01)] {
            let mut net = scalar_net(1.0);
            let mut opt = Optimizer::new(kind, &net);
            opt.step(&mut net, &grad(2.0)).unwrap();
            assert!(weight(&net) < 1.0, "{kind:?}");
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut net = scalar_net(1.0);
        let other = Network::new(&[LayerSpec::Linear { inputs: 2, outputs: 1 }], 0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1), &other);
        assert!(matches!(
            opt.step(&mut net, &grad(1.0)),
            Err(NnetError::StateShapeMismatch(_))
        ));
    }
}
