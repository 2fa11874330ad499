//! A small layered network with reverse-mode gradients.
//!
//! Only a straight pipeline of layers is supported, which is all the
//! per-view embedding and the classifier heads need. Forward passes can be
//! recorded into a [`Tape`] so several mini-batch chunks can be processed
//! independently and their gradients summed in a fixed order.

pub mod checkpoint;
pub mod gradcheck;
mod layers;
pub mod loss;
pub mod optim;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use layers::LayerSpec;
pub use loss::{nll_loss, pnorm_penalty, PNorm};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;

use layers::Cache;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a recorded training-mode forward pass")]
    NoRecordedForward,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("optimizer state does not match parameter shapes: {0}")]
    StateShapeMismatch(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("truncation depth {depth} out of range for a {layers}-layer network")]
    DepthOutOfRange { depth: usize, layers: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// A layer kind with its parameters (`[weight, bias]` or none).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
    output_shape: Vec<usize>,
}

/// Gradients of a scalar objective with respect to every parameter (grouped
/// per layer, same order as [`Layer::params`]) and to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<Tensor>>,
    pub input: Tensor,
}

impl Gradients {
    /// Adds `other` into `self` element-wise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (ta, tb) in a.iter_mut().zip(b) {
                ta.data_mut()
                    .iter_mut()
                    .zip(tb.data())
                    .for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Adds parameter gradients group-wise.
pub fn add_param_grads(into: &mut [Vec<Tensor>], other: &[Vec<Tensor>]) {
    for (a, b) in into.iter_mut().zip(other) {
        for (ta, tb) in a.iter_mut().zip(b) {
            ta.data_mut()
                .iter_mut()
                .zip(tb.data())
                .for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    seed: u64,
    tape: Option<Tape>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.seed == other.seed
    }
}

impl Network {
    /// Builds a network with fan-in-scaled uniform weights and zero biases.
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self, NnetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let mut params = Vec::new();
            for (i, shape) in spec.param_shapes().into_iter().enumerate() {
                let mut t = Tensor::zeros(&shape);
                if i == 0 {
                    let bound = (6.0 / spec.fan_in() as f64).sqrt();
                    t.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.gen_range(-bound..bound));
                }
                params.push(t);
            }
            layers.push(Layer {
                spec: *spec,
                params,
            });
        }
        check_chain(&layers)?;
        Ok(Self {
            layers,
            seed,
            tape: None,
        })
    }

    /// Assembles a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self, NnetError> {
        for l in &layers {
            l.spec.validate()?;
            let shapes = l.spec.param_shapes();
            if shapes.len() != l.params.len()
                || shapes.iter().zip(&l.params).any(|(s, p)| s.as_slice() != p.shape())
            {
                return Err(NnetError::ShapeMismatch(format!(
                    "parameters of {:?} have the wrong shapes",
                    l.spec
                )));
            }
        }
        check_chain(&layers)?;
        Ok(Self {
            layers,
            seed,
            tape: None,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(Tensor::len)
            .sum()
    }

    /// Bitwise FNV-1a hash of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.layers.iter().flat_map(|l| &l.params).flat_map(|t| t.data()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnetError> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |s, l| l.spec.output_shape(&s))
    }

    /// First `depth` layers as a new network.
    pub fn truncated(&self, depth: usize) -> Result<Network, NnetError> {
        if depth == 0 || depth > self.layers.len() {
            return Err(NnetError::DepthOutOfRange {
                depth,
                layers: self.layers.len(),
            });
        }
        Ok(Network {
            layers: self.layers[..depth].to_vec(),
            seed: self.seed,
            tape: None,
        })
    }

    /// Evaluation-mode forward pass (dropout disabled); never mutates.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnetError> {
        let mut x = input.clone();
        for l in &self.layers {
            x = layers::forward(&l.spec, &l.params, x, None)?.output;
        }
        Ok(x)
    }

    /// Training-mode forward pass returning the tape instead of storing it.
    pub fn forward_record<R: Rng>(
        &self,
        input: &Tensor,
        rng: &mut R,
    ) -> Result<(Tensor, Tape), NnetError> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let out = layers::forward(&l.spec, &l.params, x, Some(rng as &mut dyn rand::RngCore))?;
            caches.push(out.cache);
            x = out.output;
        }
        let output_shape = x.shape().to_vec();
        Ok((x, Tape {
            caches,
            output_shape,
        }))
    }

    /// Back-propagates `grad_output` through a recorded pass.
    pub fn backward_tape(&self, tape: &Tape, grad_output: &Tensor) -> Result<Gradients, NnetError> {
        if tape.caches.len() != self.layers.len() {
            return Err(NnetError::NoRecordedForward);
        }
        if grad_output.shape() != tape.output_shape.as_slice() {
            return Err(NnetError::ShapeMismatch(format!(
                "loss gradient {:?} does not match network output {:?}",
                grad_output.shape(),
                tape.output_shape
            )));
        }
        let mut g = grad_output.clone();
        let mut params = vec![Vec::new(); self.layers.len()];
        for (i, (l, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let (gi, gp) = layers::backward(&l.spec, &l.params, cache, g)?;
            params[i] = gp;
            g = gi;
        }
        Ok(Gradients { params, input: g })
    }

    /// Training-mode forward pass that keeps the tape for [`Network::backward`].
    pub fn forward_train<R: Rng>(&mut self, input: &Tensor, rng: &mut R) -> Result<Tensor, NnetError> {
        let (out, tape) = self.forward_record(input, rng)?;
        self.tape = Some(tape);
        Ok(out)
    }

    /// Consumes the tape stored by [`Network::forward_train`].
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<Gradients, NnetError> {
        let tape = self.tape.take().ok_or(NnetError::NoRecordedForward)?;
        self.backward_tape(&tape, loss_grad)
    }

    /// Zero-valued gradients in parameter layout.
    pub fn zero_grads(&self) -> Vec<Vec<Tensor>> {
        self.layers
            .iter()
            .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect()
    }
}

/// Checks that declared channel and feature counts agree along the pipeline.
fn check_chain(layers: &[Layer]) -> Result<(), NnetError> {
    let mut channels: Option<usize> = None;
    let mut features: Option<usize> = None;
    for l in layers {
        match l.spec {
            LayerSpec::Conv2d { in_ch, out_ch, .. } => {
                if let Some(c) = channels {
                    if c != in_ch {
                        return Err(NnetError::InvalidLayer(format!(
                            "conv expects {in_ch} channels but receives {c}"
                        )));
                    }
                }
                channels = Some(out_ch);
            }
            LayerSpec::Linear { inputs, outputs } => {
                if let Some(f) = features {
                    if f != inputs {
                        return Err(NnetError::InvalidLayer(format!(
                            "linear expects {inputs} features but receives {f}"
                        )));
                    }
                }
                features = Some(outputs);
            }
            LayerSpec::Flatten => {
                channels = None;
                features = None;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Side length of MiniEmbed input patches.
pub const MINI_EMBED_INPUT: usize = 32;

/// Conv(3→8)-ReLU-MaxPool-Conv(8→16)-ReLU-MaxPool-Flatten: 1024 features
/// from a 3×32×32 patch.
pub fn mini_embed_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 8,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::Conv2d {
            in_ch: 8,
            out_ch: 16,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
    ]
}

/// MiniEmbed followed by a temporary two-way classifier, used for
/// monocular training.
pub fn mono_classifier_layers() -> Vec<LayerSpec> {
    let mut specs = mini_embed_layers();
    specs.push(LayerSpec::Linear {
        inputs: 1024,
        outputs: 2,
    });
    specs.push(LayerSpec::LogSoftmax);
    specs
}

/// Truncation depths of MiniEmbed standing in for the 11/15/20/23-layer
/// GoogLeNet cut points.
pub const DEPTH_PRESETS: [(u32, usize); 4] = [(11, 3), (15, 5), (20, 6), (23, 7)];

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_identity() -> Network {
        let mut net = Network::new(&[LayerSpec::Linear { inputs: 2, outputs: 2 }], 0).unwrap();
        net.layers_mut()[0].params[0] = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        net
    }

    #[test]
    fn identity_linear_is_identity() {
        let net = linear_identity();
        let x = Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Network::new(&[LayerSpec::Relu], 0).unwrap();
        let x = Tensor::new(vec![1, 3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_input() {
        let mut net = Network::new(&[LayerSpec::Relu], 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![-0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.forward_train(&x, &mut rng).unwrap();
        let g = net.backward(&Tensor::filled(&[1, 2], 1.0)).unwrap();
        assert_eq!(g.input.data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut net = linear_identity();
        let err = net.backward(&Tensor::zeros(&[1, 2])).unwrap_err();
        assert_eq!(err, NnetError::NoRecordedForward);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = linear_identity();
        let err = net.forward(&Tensor::zeros(&[1, 3])).unwrap_err();
        assert!(matches!(err, NnetError::ShapeMismatch(_)));
    }

    #[test]
    fn inconsistent_chain_is_rejected() {
        let err = Network::new(
            &[
                LayerSpec::Linear { inputs: 4, outputs: 3 },
                LayerSpec::Linear { inputs: 2, outputs: 1 },
            ],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, NnetError::InvalidLayer(_)));
    }

    #[test]
    fn mini_embed_yields_1024_features() {
        let net = Network::new(&mini_embed_layers(), 1).unwrap();
        assert_eq!(net.output_shape(&[5, 3, 32, 32]).unwrap(), vec![5, 1024]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let net = Network::new(
            &[LayerSpec::Linear { inputs: 3, outputs: 4 }, LayerSpec::LogSoftmax],
            9,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 3], vec![10.0, -3.0, 0.5, 400.0, 2.0, -800.0]).unwrap();
        let y = net.forward(&x).unwrap();
        for i in 0..2 {
            let s: f64 = y.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_leaves_parameters_alone() {
        let net = Network::new(&mono_classifier_layers(), 3).unwrap();
        let before = net.checksum();
        let x = Tensor::filled(&[2, 3, 32, 32], 0.25);
        net.forward(&x).unwrap();
        assert_eq!(before, net.checksum());
    }

    #[test]
    fn dropout_is_inactive_in_eval_and_scales_in_training() {
        let net = Network::new(&[LayerSpec::Dropout { rate: 0.5 }], 0).unwrap();
        let x = Tensor::filled(&[1, 1000], 1.0);
        assert_eq!(net.forward(&x).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (y, _) = net.forward_record(&x, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn truncation_bounds() {
        let net = Network::new(&mono_classifier_layers(), 0).unwrap();
        assert_eq!(net.truncated(7).unwrap().len(), 7);
        assert!(matches!(
            net.truncated(10),
            Err(NnetError::DepthOutOfRange { depth: 10, layers: 9 })
        ));
        assert!(net.truncated(0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::new(&mono_classifier_layers(), 11).unwrap();
        let b = Network::new(&mono_classifier_layers(), 11).unwrap();
        let c = Network::new(&mono_classifier_layers(), 12).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }
}
