//! Backprop against central finite differences of an independently written loss.

use eigenstream_core::linalg::Matrix;
use eigenstream_core::network::{Activation, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straightforward forward pass and cross-entropy, sharing no code with the crate.
fn reference_loss(weights: &[Matrix], act: Activation, x: &[f64], label: usize) -> f64 {
    let mut h = x.to_vec();
    for (l, w) in weights.iter().enumerate() {
        let mut z = vec![0.0; w.rows()];
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = (0..w.cols()).map(|j| w.get(i, j) * h[j]).sum();
        }
        if l + 1 < weights.len() {
            for v in &mut z {
                *v = match act {
                    Activation::Relu => v.max(0.0),
                    Activation::Sigmoid => 1.0 / (1.0 + (-*v).exp()),
                };
            }
        }
        h = z;
    }
    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = h.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    lse - h[label]
}

fn relative_error(dims: &[usize], act: Activation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::init(dims, act, seed).unwrap();
    let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(0.0..1.0)).collect();
    let label = rng.random_range(0..dims[dims.len() - 1]);
    let (trace, _) = net.forward(&x).unwrap();
    let (loss, grads) = net.backward_label(trace, label).unwrap();
    assert!((loss - reference_loss(net.all_weights(), act, &x, label)).abs() < 1e-12);

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (l, g) in grads.iter().enumerate() {
        let analytic = g.gradient();
        let w = net.weights(l);
        let mut num = Matrix::zeros(w.rows(), w.cols());
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let mut plus = net.all_weights().to_vec();
                let mut minus = net.all_weights().to_vec();
                plus[l].set(i, j, w.get(i, j) + h);
                minus[l].set(i, j, w.get(i, j) - h);
                let fd = (reference_loss(&plus, act, &x, label) - reference_loss(&minus, act, &x, label)) / (2.0 * h);
                num.set(i, j, fd);
            }
        }
        let mut diff = analytic.clone();
        diff.add_scaled(-1.0, &num).unwrap();
        let scale = analytic.frobenius_norm().max(num.frobenius_norm()).max(1e-12);
        worst = worst.max(diff.frobenius_norm() / scale);
    }
    worst
}

#[test]
fn backprop_matches_finite_differences() {
    let shapes: [&[usize]; 4] = [&[3, 2], &[5, 4, 3], &[8, 6, 5, 4], &[20, 15, 10]];
    for act in [Activation::Relu, Activation::Sigmoid] {
        for (k, dims) in shapes.iter().enumerate() {
            for seed in 0..3 {
                let err = relative_error(dims, act, 100 * k as u64 + seed);
                assert!(err < 1e-5, "{act:?} {dims:?} seed {seed}: relative error {err:e}");
            }
        }
    }
}

#[test]
fn batched_backprop_matches_per_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = [12, 9, 7, 10];
    let n = 13;
    let pixels: Vec<f64> = (0..n * dims[0]).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let data = eigenstream_core::mnist::Dataset::new(dims[0], pixels, labels).unwrap();
    for act in [Activation::Relu, Activation::Sigmoid] {
        let net = Mlp::init(&dims, act, 4).unwrap();
        let idx: Vec<usize> = (0..n).rev().collect();
        let block = net.backprop_block(&data, &idx).unwrap();
        let mut loss = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            let (trace, _) = net.forward(data.image(i)).unwrap();
            let (l, grads) = net.backward_label(trace, data.label(i)).unwrap();
            loss += l;
            for (layer, g) in grads.iter().enumerate() {
                for (a, b) in block.inputs[layer].row(r).iter().zip(g.x.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
                for (a, b) in block.deltas[layer].row(r).iter().zip(g.delta.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!((loss - block.loss_sum).abs() < 1e-10);
    }
}
