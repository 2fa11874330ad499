//! Finite-difference checks of whole networks through the training loss.

use mvocc::multiview::HeadSpec;
use mvocc::nnet::gradcheck::{central_difference, max_relative_error};
use mvocc::nnet::{nll_loss, LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (out, _) = net.forward_record(x, &mut rng).unwrap();
    nll_loss(&out, labels).unwrap().0
}

/// Largest relative error over all parameters and the input.
fn check(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (out, tape) = net.forward_record(x, &mut rng).unwrap();
    let (_, g) = nll_loss(&out, labels).unwrap();
    let grads = net.backward_tape(&tape, &g).unwrap();
    let shape = x.shape().to_vec();
    let numeric = central_difference(x.data(), 1e-4, |v| {
        loss(net, &Tensor::new(shape.clone(), v.to_vec()).unwrap(), labels)
    });
    let mut worst = max_relative_error(grads.input.data(), &numeric);
    for (li, layer) in net.layers().iter().enumerate() {
        for (k, p) in layer.params.iter().enumerate() {
            let pshape = p.shape().to_vec();
            let numeric = central_difference(p.data(), 1e-4, |v| {
                let mut probe = net.clone();
                probe.layers_mut()[li].params[k] = Tensor::new(pshape.clone(), v.to_vec()).unwrap();
                loss(&probe, x, labels)
            });
            worst = worst.max(max_relative_error(grads.params[li][k].data(), &numeric));
        }
    }
    worst
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn small_convnet_matches_finite_differences() {
    let specs = [
        LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Linear { inputs: 12, outputs: 2 },
        LayerSpec::LogSoftmax,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..3 {
        let net = Network::new(&specs, seed).unwrap();
        let x = random_input(&mut rng, &[2, 2, 4, 4]);
        let err = check(&net, &x, &[0, 1]);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn head_with_dropout_matches_finite_differences() {
    let mut specs = HeadSpec { hidden: vec![6, 4] }.layers(9);
    specs.insert(2, LayerSpec::Dropout { rate: 0.3 });
    let net = Network::new(&specs, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(&mut rng, &[3, 9]);
    let err = check(&net, &x, &[1, 0, 1]);
    assert!(err < 1e-4, "{err:e}");
}
