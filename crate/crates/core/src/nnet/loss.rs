//! Objective terms: negative log-likelihood and p-norm weight penalty.

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, NnetError, Tensor};

/// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
///
/// Returns the loss and its gradient with respect to `log_probs`.
pub fn nll_loss(log_probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnetError> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NnetError::ShapeMismatch(format!(
            "log-probabilities {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (b, classes) = (shape[0], shape[1]);
    let mut grad = Tensor::zeros(shape);
    let mut loss = 0.0;
    let scale = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NnetError::LabelOutOfRange { label, classes });
        }
        loss -= log_probs.data()[i * classes + label];
        grad.data_mut()[i * classes + label] = -scale;
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PNorm {
    L1,
    L2,
}

/// `weight·‖w‖_p` over every convolution and linear weight (biases
/// excluded), with gradients in parameter layout. The L1 subgradient at 0
/// is 0, as is the L2 gradient when all weights vanish.
pub fn pnorm_penalty(net: &Network, p: PNorm, weight: f64) -> (f64, Vec<Vec<Tensor>>) {
    let weights = || {
        net.layers()
            .iter()
            .filter(|l| matches!(l.spec, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. }))
            .flat_map(|l| l.params[0].data())
    };
    let norm = match p {
        PNorm::L1 => weights().map(|w| w.abs()).sum::<f64>(),
        PNorm::L2 => weights().map(|w| w * w).sum::<f64>().sqrt(),
    };
    let mut grads = net.zero_grads();
    for (l, g) in net.layers().iter().zip(grads.iter_mut()) {
        if !l.spec.has_params() {
            continue;
        }
        for (gv, &w) in g[0].data_mut().iter_mut().zip(l.params[0].data()) {
            *gv = match p {
                PNorm::L1 if w > 0.0 => weight,
                PNorm::L1 if w < 0.0 => -weight,
                PNorm::L1 => 0.0,
                PNorm::L2 if norm > 0.0 => weight * w / norm,
                PNorm::L2 => 0.0,
            };
        }
    }
    (weight * norm, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_costs_ln2() {
        let lp = Tensor::new(vec![2, 2], vec![0.5f64.ln(); 4]).unwrap();
        for labels in [[0, 1], [1, 1], [0, 0]] {
            let (loss, _) = nll_loss(&lp, &labels).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let lp = Tensor::new(vec![1, 2], vec![0.0, -1e300]).unwrap();
        let (loss, grad) = nll_loss(&lp, &[0]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.data(), &[-1.0, 0.0]);
    }

    #[test]
    fn gradient_is_minus_inverse_batch_at_labels() {
        let lp = Tensor::new(vec![4, 2], vec![-0.1, -2.0, -0.3, -1.0, -3.0, -0.05, -0.7, -0.7]).unwrap();
        let (loss, grad) = nll_loss(&lp, &[0, 1, 1, 0]).unwrap();
        assert!((loss - (0.1 + 1.0 + 0.05 + 0.7) / 4.0).abs() < 1e-15);
        assert_eq!(grad.data(), &[-0.25, 0.0, 0.0, -0.25, 0.0, -0.25, -0.25, 0.0]);
    }

    #[test]
    fn label_out_of_range() {
        let lp = Tensor::zeros(&[1, 2]);
        assert_eq!(
            nll_loss(&lp, &[2]).unwrap_err(),
            NnetError::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn penalty_of_zero_weights_is_zero() {
        let mut net = Network::new(&[LayerSpec::Linear { inputs: 3, outputs: 2 }], 0).unwrap();
        net.layers_mut()[0].params[0].data_mut().fill(0.0);
        for p in [PNorm::L1, PNorm::L2] {
            let (pen, g) = pnorm_penalty(&net, p, 3.0);
            assert_eq!(pen, 0.0);
            assert!(g[0][0].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn l2_penalty_of_three_four_is_five() {
        let mut net = Network::new(&[LayerSpec::Linear { inputs: 2, outputs: 1 }], 0).unwrap();
        net.layers_mut()[0].params[0] = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        net.layers_mut()[0].params[1] = Tensor::new(vec![1], vec![100.0]).unwrap();
        let (pen, g) = pnorm_penalty(&net, PNorm::L2, 0.5);
        assert!((pen - 2.5).abs() < 1e-15);
        assert_eq!(g[0][0].data(), &[0.5 * 0.6, 0.5 * 0.8]);
        assert_eq!(g[0][1].data(), &[0.0]);
        let (pen1, _) = pnorm_penalty(&net, PNorm::L1, 1.0);
        assert_eq!(pen1, 7.0);
    }
}
