//! Bias-free dense MLP with softmax cross-entropy.
//!
//! Layer `l` holds a weight matrix `W_l` of shape `a_l × b_l` mapping its
//! input activation `x_l` (dim `b_l`) to `z_l = W_l x_l` (dim `a_l`). Hidden
//! layers apply the configured activation; the last layer feeds a softmax.
//! Backpropagation yields, per layer, the pair `(x_l, δ_l)` whose outer
//! product `δ_l x_lᵀ` is the gradient of the sample loss with respect to `W_l`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::mnist::Dataset;

/// Floor applied to the target probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + libm::exp(-z)),
        }
    }

    /// Derivative expressed through the activation's output. ReLU'(0) = 0.
    #[inline]
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => h * (1.0 - h),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// Input activation and backpropagated error of one layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub x: Vector,
    pub delta: Vector,
}

impl GradSample {
    pub fn gradient(&self) -> Matrix {
        linalg::outer(&self.delta, &self.x)
    }
}

/// Per-layer inputs of one forward pass, plus the output distribution.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[l]` is the activation entering layer `l`.
    pub inputs: Vec<Vector>,
    pub probs: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    activation: Activation,
    seed: u64,
    matrix_updates: u64,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(alloc::format!(
            "network needs at least two layer sizes, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    Ok(())
}

impl Mlp {
    /// Weights uniform in `±sqrt(6 / (a + b))`, drawn from a ChaCha8 stream seeded with `seed`.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| {
                let (b, a) = (w[0], w[1]);
                let r = libm::sqrt(6.0 / (a + b) as f64);
                let data = (0..a * b).map(|_| rng.random_range(-r..r)).collect();
                Matrix::from_vec(a, b, data).expect("shape is consistent")
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            activation,
            seed,
            matrix_updates: 0,
        })
    }

    /// Rebuilds a network from explicit weights (e.g. a checkpoint).
    pub fn from_weights(dims: &[usize], activation: Activation, seed: u64, weights: Vec<Matrix>) -> Result<Self> {
        validate_dims(dims)?;
        check_dim("Mlp::from_weights layers", dims.len() - 1, weights.len())?;
        for (l, w) in weights.iter().enumerate() {
            check_dim("Mlp::from_weights rows", dims[l + 1], w.rows())?;
            check_dim("Mlp::from_weights cols", dims[l], w.cols())?;
            if !w.is_finite() {
                return Err(Error::NonFinite("checkpoint weights"));
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            activation,
            seed,
            matrix_updates: 0,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn all_weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    /// Number of weight-array writes applied so far.
    pub fn matrix_updates(&self) -> u64 {
        self.matrix_updates
    }

    /// FNV-1a over the bit patterns of all weights.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in &self.weights {
            for v in w.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn forward(&self, x: &[f64]) -> Result<(ForwardTrace, Vector)> {
        check_dim("Mlp::forward", self.dims[0], x.len())?;
        let last = self.layers() - 1;
        let mut inputs = Vec::with_capacity(self.layers());
        inputs.push(Vector::from_slice(x));
        let mut logits = Vec::new();
        for (l, w) in self.weights.iter().enumerate() {
            let mut z = vec![0.0; w.rows()];
            linalg::matvec_into(w, &inputs[l], &mut z);
            if l == last {
                logits = z;
            } else {
                let act = self.activation;
                z.iter_mut().for_each(|v| *v = act.apply(*v));
                inputs.push(Vector::new(z));
            }
        }
        softmax_in_place(&mut logits);
        let probs = Vector::new(logits);
        Ok((
            ForwardTrace {
                inputs,
                probs: probs.clone(),
            },
            probs,
        ))
    }

    /// Loss and per-layer gradient factors for a one-hot `target`.
    pub fn backward(&self, trace: ForwardTrace, target: &[f64]) -> Result<(f64, Vec<GradSample>)> {
        check_dim("Mlp::backward target", self.classes(), target.len())?;
        let ones = target.iter().filter(|&&t| t == 1.0).count();
        let zeros = target.iter().filter(|&&t| t == 0.0).count();
        if ones != 1 || ones + zeros != target.len() {
            return Err(Error::Config("malformed one-hot target".into()));
        }
        let label = target.iter().position(|&t| t == 1.0).expect("checked");
        self.backward_label(trace, label)
    }

    pub fn backward_label(&self, trace: ForwardTrace, label: usize) -> Result<(f64, Vec<GradSample>)> {
        if label >= self.classes() {
            return Err(Error::Config(alloc::format!("label {label} out of range")));
        }
        check_dim("Mlp::backward trace", self.layers(), trace.inputs.len())?;
        let ForwardTrace { inputs, probs } = trace;
        let loss = -libm::log(probs[label].max(PROB_FLOOR));

        let mut delta = probs.into_vec();
        delta[label] -= 1.0;
        let mut deltas: Vec<Vector> = Vec::with_capacity(self.layers());
        for l in (0..self.layers()).rev() {
            let next = if l > 0 {
                let w = &self.weights[l];
                let mut g = vec![0.0; w.cols()];
                linalg::matvec_t_into(w, &delta, &mut g);
                let act = self.activation;
                for (gi, &h) in g.iter_mut().zip(inputs[l].iter()) {
                    *gi *= act.derivative_from_output(h);
                }
                Some(g)
            } else {
                None
            };
            deltas.push(Vector::new(core::mem::take(&mut delta)));
            if let Some(g) = next {
                delta = g;
            }
        }
        deltas.reverse();
        let samples = inputs
            .into_iter()
            .zip(deltas)
            .map(|(x, delta)| GradSample { x, delta })
            .collect();
        Ok((loss, samples))
    }

    /// `W_layer += scale · u vᵀ`, counted as one matrix update.
    pub fn apply_rank1(&mut self, layer: usize, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        self.check_layer(layer)?;
        let w = &mut self.weights[layer];
        check_dim("apply_rank1 u", w.rows(), u.len())?;
        check_dim("apply_rank1 v", w.cols(), v.len())?;
        if !scale.is_finite() || !u.iter().chain(v).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("rank-1 update"));
        }
        w.add_outer_unchecked(scale, u, v);
        self.matrix_updates += 1;
        Ok(())
    }

    /// `W_layer += delta_w`, counted as one matrix update.
    pub fn apply_dense(&mut self, layer: usize, delta_w: &Matrix) -> Result<()> {
        self.check_layer(layer)?;
        if !delta_w.is_finite() {
            return Err(Error::NonFinite("dense update"));
        }
        self.weights[layer].add_scaled(1.0, delta_w)?;
        self.matrix_updates += 1;
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < self.layers() {
            Ok(())
        } else {
            Err(Error::Dimension {
                op: "layer index",
                expected: self.layers(),
                got: layer,
            })
        }
    }

    pub fn weights_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
    }

    /// Mean cross-entropy and accuracy over a dataset, computed in blocks.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        check_dim("Mlp::evaluate", self.dims[0], data.dim())?;
        const BLOCK: usize = 256;
        let n = data.len();
        let mut loss = 0.0;
        let mut correct = 0usize;
        let widest = self.dims.iter().copied().max().unwrap_or(0);
        let mut buf_a = vec![0.0; BLOCK * widest];
        let mut buf_b = vec![0.0; BLOCK * widest];
        let last = self.layers() - 1;
        let mut start = 0;
        while start < n {
            let m = BLOCK.min(n - start);
            let mut k = self.dims[0];
            let mut input: &[f64] = &data.pixels()[start * k..(start + m) * k];
            for (l, w) in self.weights.iter().enumerate() {
                let out = &mut buf_a[..m * w.rows()];
                linalg::gemm_nt_slices(m, k, w.rows(), input, w.data(), out);
                if l != last {
                    let act = self.activation;
                    out.iter_mut().for_each(|v| *v = act.apply(*v));
                }
                core::mem::swap(&mut buf_a, &mut buf_b);
                k = w.rows();
                input = &buf_b[..m * k];
            }
            for (i, row) in input.chunks_exact(k).enumerate() {
                let label = data.label(start + i);
                let mut p = row.to_vec();
                softmax_in_place(&mut p);
                loss += -libm::log(p[label].max(PROB_FLOOR));
                if argmax(&p) == label {
                    correct += 1;
                }
            }
            start += m;
        }
        let loss = loss / n.max(1) as f64;
        Ok(Evaluation {
            loss,
            accuracy: correct as f64 / n.max(1) as f64,
        })
    }
}

/// Gradient factors for a block of samples.
///
/// Row `i` of `inputs[l]` and of `deltas[l]` is the pair `(x_l, δ_l)` of the
/// block's `i`-th sample, so `deltas[l]ᵀ inputs[l]` is the summed gradient.
#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub inputs: Vec<Matrix>,
    pub deltas: Vec<Matrix>,
    pub loss_sum: f64,
}

impl BlockGrad {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Mlp {
    /// Forward and backward pass over the samples `indices` of `data` at once.
    pub fn backprop_block(&self, data: &Dataset, indices: &[usize]) -> Result<BlockGrad> {
        check_dim("Mlp::backprop_block", self.dims[0], data.dim())?;
        let n = indices.len();
        let layers = self.layers();
        let last = layers - 1;
        let mut x0 = Matrix::zeros(n, self.dims[0]);
        for (r, &i) in indices.iter().enumerate() {
            x0.row_mut(r).copy_from_slice(data.image(i));
        }
        let mut inputs = Vec::with_capacity(layers);
        inputs.push(x0);
        let mut out = Matrix::zeros(0, 0);
        for (l, w) in self.weights.iter().enumerate() {
            let mut z = Matrix::zeros(n, w.rows());
            linalg::gemm_nt(1.0, &inputs[l], w, 0.0, &mut z)?;
            if l == last {
                out = z;
            } else {
                let act = self.activation;
                z.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
                inputs.push(z);
            }
        }
        let mut loss_sum = 0.0;
        for (r, &i) in indices.iter().enumerate() {
            let row = out.row_mut(r);
            softmax_in_place(row);
            let label = data.label(i);
            loss_sum += -libm::log(row[label].max(PROB_FLOOR));
            row[label] -= 1.0;
        }
        let mut deltas = vec![out];
        for l in (1..layers).rev() {
            let w = &self.weights[l];
            let mut g = Matrix::zeros(n, w.cols());
            linalg::gemm_nn(1.0, deltas.last().expect("nonempty"), w, 0.0, &mut g)?;
            let act = self.activation;
            for (gi, &h) in g.data_mut().iter_mut().zip(inputs[l].data()) {
                *gi *= act.derivative_from_output(h);
            }
            deltas.push(g);
        }
        deltas.reverse();
        Ok(BlockGrad {
            inputs,
            deltas,
            loss_sum,
        })
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_net(dims: &[usize]) -> Mlp {
        let weights = dims.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect();
        Mlp::from_weights(dims, Activation::Relu, 0, weights).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = Mlp::init(&[784, 100, 10], Activation::Relu, 7).unwrap();
        let b = Mlp::init(&[784, 100, 10], Activation::Relu, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.layers(), 2);
        assert_eq!((a.weights(0).rows(), a.weights(0).cols()), (100, 784));
        assert_eq!((a.weights(1).rows(), a.weights(1).cols()), (10, 100));
        let c = Mlp::init(&[784, 100, 10], Activation::Relu, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        let r = libm::sqrt(6.0 / 884.0);
        assert!(a.weights(0).data().iter().all(|w| w.abs() <= r));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(Mlp::init(&[4], Activation::Relu, 0), Err(Error::Config(_))));
        assert!(Mlp::init(&[], Activation::Relu, 0).is_err());
        assert!(Mlp::init(&[3, 0, 2], Activation::Relu, 0).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_output_and_ln10_loss() {
        let net = zero_net(&[5, 4, 10]);
        let (trace, p) = net.forward(&[0.3, 0.1, 0.0, 1.0, 0.5]).unwrap();
        assert!(p.iter().all(|&q| (q - 0.1).abs() < 1e-15));
        let (loss, samples) = net.backward(trace, &crate::mnist::one_hot(4)).unwrap();
        assert!((loss - core::f64::consts::LN_10).abs() < 1e-12);
        assert_eq!(samples.len(), 2);
        assert_eq!((samples[0].x.len(), samples[0].delta.len()), (5, 4));
        assert_eq!((samples[1].x.len(), samples[1].delta.len()), (4, 10));
    }

    #[test]
    fn confident_prediction_has_near_zero_loss() {
        let w = Matrix::from_rows(&[&[50.0, 0.0], &[0.0, 50.0]]);
        let net = Mlp::from_weights(&[2, 2], Activation::Relu, 0, alloc::vec![w]).unwrap();
        let (trace, p) = net.forward(&[1.0, 0.0]).unwrap();
        assert_eq!(argmax(&p), 0);
        let (loss, _) = net.backward_label(trace, 0).unwrap();
        assert!(loss < 1e-20);
        let (_, p) = net.forward(&[0.1, 0.7]).unwrap();
        assert_eq!(argmax(&p), 1);
    }

    #[test]
    fn forward_and_backward_validate_shapes() {
        let net = Mlp::init(&[3, 2], Activation::Sigmoid, 1).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let (trace, _) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(net.backward(trace.clone(), &[0.5, 0.5]).is_err());
        assert!(net.backward(trace.clone(), &[1.0]).is_err());
        assert!(net.backward_label(trace, 2).is_err());
    }

    #[test]
    fn rank1_and_dense_updates() {
        let mut net = Mlp::init(&[3, 2], Activation::Relu, 1).unwrap();
        let before = net.clone();
        net.apply_rank1(0, 0.0, &[1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(net.weights(0), before.weights(0));
        net.apply_rank1(0, 0.3, &[1.0, -2.0], &[0.5, 1.0, 2.0]).unwrap();
        net.apply_rank1(0, -0.3, &[1.0, -2.0], &[0.5, 1.0, 2.0]).unwrap();
        for (a, b) in net.weights(0).data().iter().zip(before.weights(0).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(net.matrix_updates(), 3);

        let mut dense = net.clone();
        let mut d = linalg::outer(&[1.0, -2.0], &[0.5, 1.0, 2.0]);
        d.scale(0.7);
        dense.apply_dense(0, &d).unwrap();
        net.apply_rank1(0, 0.7, &[1.0, -2.0], &[0.5, 1.0, 2.0]).unwrap();
        for (a, b) in net.weights(0).data().iter().zip(dense.weights(0).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        dense.apply_dense(0, &Matrix::zeros(2, 3)).unwrap();
        assert!(dense.apply_dense(0, &Matrix::zeros(3, 2)).is_err());
        assert!(dense.apply_rank1(1, 1.0, &[1.0, 1.0], &[1.0, 1.0, 1.0]).is_err());
        assert!(dense.apply_rank1(0, f64::NAN, &[1.0, 1.0], &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn evaluate_matches_per_sample_forward() {
        let net = Mlp::init(&[6, 5, 10], Activation::Sigmoid, 3).unwrap();
        let n = 300;
        let pixels: Vec<f64> = (0..n * 6).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        let data = Dataset::new(6, pixels, labels).unwrap();
        let ev = net.evaluate(&data).unwrap();
        let mut loss = 0.0;
        let mut correct = 0;
        for i in 0..n {
            let (trace, p) = net.forward(data.image(i)).unwrap();
            if argmax(&p) == data.label(i) {
                correct += 1;
            }
            loss += net.backward_label(trace, data.label(i)).unwrap().0;
        }
        assert!((ev.loss - loss / n as f64).abs() < 1e-12);
        assert_eq!(ev.accuracy, correct as f64 / n as f64);
    }
}
