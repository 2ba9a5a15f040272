//! Central finite differences against analytic gradients, in f64, across
//! every layer kind over random small shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbprune_core::loss::softmax_cross_entropy;
use xbprune_core::{Activation, LayerSpec, Network, Shape3};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_net(rng: &mut ChaCha8Rng) -> (Network<f64>, usize) {
    let c0 = rng.random_range(1..=3);
    let c1 = rng.random_range(1..=4);
    let c2 = rng.random_range(1..=3);
    let hw = rng.random_range(9..=12);
    let k1 = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let h1 = (hw + 2 * pad - k1) / stride + 1;
    let p1 = h1 / 2;
    let h2 = p1 - 1; // 2x2 kernel, no padding
    let hidden = rng.random_range(2..=6);
    let classes = rng.random_range(2..=5);
    let specs = vec![
        LayerSpec::Conv { in_channels: c0, out_channels: c1, kernel: k1, stride, padding: pad },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: 2 },
        LayerSpec::Conv { in_channels: c1, out_channels: c2, kernel: 2, stride: 1, padding: 0 },
        LayerSpec::Flatten,
        LayerSpec::Fc { in_features: c2 * h2 * h2, out_features: hidden },
        LayerSpec::Relu,
        LayerSpec::Fc { in_features: hidden, out_features: classes },
    ];
    let mut net = Network::from_specs(Shape3::new(c0, hw, hw), &specs).unwrap();
    net.init_kaiming(rng);
    for l in 0..net.num_weighted() {
        for b in net.bias_mut(l).iter_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    (net, classes)
}

fn loss(net: &Network<f64>, x: &Activation<f64>, y: &[usize]) -> f64 {
    softmax_cross_entropy(&net.logits(x).unwrap(), y).0
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

#[test]
fn analytic_gradients_match_finite_differences_over_20_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut net, classes) = random_net(&mut rng);
        let s = net.input_shape();
        let batch = 3;
        let data: Vec<f64> = (0..batch * s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Activation::from_nchw(batch, s.channels, s.height, s.width, &data);
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let fwd = net.forward(&x, true).unwrap();
        let (_, dlogits) = softmax_cross_entropy(fwd.logits(), &y);
        let grads = net.backward(&fwd, &dlogits).unwrap();

        for l in 0..net.num_weighted() {
            for i in 0..net.weight(l).len() {
                let orig = net.weight(l).values[i];
                net.weight_mut(l).values[i] = orig + EPS;
                let up = loss(&net, &x, &y);
                net.weight_mut(l).values[i] = orig - EPS;
                let down = loss(&net, &x, &y);
                net.weight_mut(l).values[i] = orig;
                let numeric = (up - down) / (2.0 * EPS);
                let e = rel_err(grads.weights[l][i], numeric);
                assert!(e < TOL, "seed {seed} layer {l} weight {i}: analytic {} numeric {numeric} rel {e}", grads.weights[l][i]);
            }
            for i in 0..net.bias(l).len() {
                let orig = net.bias(l)[i];
                net.bias_mut(l)[i] = orig + EPS;
                let up = loss(&net, &x, &y);
                net.bias_mut(l)[i] = orig - EPS;
                let down = loss(&net, &x, &y);
                net.bias_mut(l)[i] = orig;
                let numeric = (up - down) / (2.0 * EPS);
                let e = rel_err(grads.biases[l][i], numeric);
                assert!(e < TOL, "seed {seed} layer {l} bias {i}: analytic {} numeric {numeric} rel {e}", grads.biases[l][i]);
            }
        }
    }
}

#[test]
fn lenet5_gradients_match_finite_differences_on_sampled_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let net32: Network<f32> = Network::lenet5(&mut rng);
    let mut net = net32.cast::<f64>();
    let data: Vec<f64> = (0..2 * 784).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Activation::from_nchw(2, 1, 28, 28, &data);
    let y = [3usize, 7];
    let fwd = net.forward(&x, true).unwrap();
    let (_, dlogits) = softmax_cross_entropy(fwd.logits(), &y);
    let grads = net.backward(&fwd, &dlogits).unwrap();
    for l in 0..net.num_weighted() {
        for _ in 0..10 {
            let i = rng.random_range(0..net.weight(l).len());
            let orig = net.weight(l).values[i];
            net.weight_mut(l).values[i] = orig + EPS;
            let up = loss(&net, &x, &y);
            net.weight_mut(l).values[i] = orig - EPS;
            let down = loss(&net, &x, &y);
            net.weight_mut(l).values[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            if numeric.abs() < 1e-9 && grads.weights[l][i].abs() < 1e-9 {
                continue;
            }
            assert!(rel_err(grads.weights[l][i], numeric) < TOL, "layer {l} weight {i}");
        }
    }
}
