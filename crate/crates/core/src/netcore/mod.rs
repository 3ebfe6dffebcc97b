//! Minimal layer-based neural network with exact reverse-mode gradients.
//!
//! The layer set is fixed and small (dense, conv2d, relu, sigmoid,
//! flatten); there is no taping or dynamic graph. Each layer owns its
//! parameters, gradient accumulators, and forward cache, so a model
//! instance is single-threaded during forward/backward, while distinct
//! instances can train in parallel with independent RNG streams.

mod adam;
mod gradcheck;
mod io;
mod layers;
mod loss;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckReport, GradCheckTarget, NetworkLossTarget, ParamCheck};
pub use io::{load_params_into, save_params, NetIoError};
pub use layers::{Conv2d, Dense, Flatten, Layer, Relu, Sigmoid};
pub use loss::cross_entropy;

use crate::linalg::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape chain break at layer {layer}: input {got:?}, expected width {want}")]
    ShapeChain {
        layer: usize,
        got: (usize, usize),
        want: usize,
    },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("label {label} out of range for {classes} classes (row {row})")]
    BadLabel {
        label: usize,
        classes: usize,
        row: usize,
    },
    #[error("gradient shape {got:?} does not match logits {want:?}")]
    GradShape { got: (usize, usize), want: (usize, usize) },
}

/// One minibatch: row-per-sample inputs plus integer class labels.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Minibatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Self {
        assert!(inputs.rows() >= 1, "minibatch must be non-empty");
        assert_eq!(inputs.rows(), labels.len(), "inputs and labels must pair up");
        Minibatch { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A sequence of layers trained end to end.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    /// Run the stack, populating each layer's cache for backward.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur).map_err(|e| match e {
                NetError::ShapeChain { got, want, .. } => NetError::ShapeChain { layer: i, got, want },
                other => other,
            })?;
        }
        Ok(cur)
    }

    /// Backpropagate from the logits gradient; accumulates parameter
    /// gradients and returns the input gradient for upstream chaining.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor, NetError> {
        let mut cur = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    /// Visit every `(parameter, gradient)` pair in a stable order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &Tensor)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut net = self.clone();
        net.visit_params(&mut |p, _| n += p.data().len());
        n
    }

    /// Snapshot of all parameter tensors, for checkpointing.
    pub fn param_snapshot(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut net = self.clone();
        net.visit_params(&mut |p, _| out.push(p.clone()));
        out
    }

    pub fn restore_snapshot(&mut self, snap: &[Tensor]) {
        let mut i = 0;
        self.visit_params(&mut |p, _| {
            *p = snap[i].clone();
            i += 1;
        });
        assert_eq!(i, snap.len(), "snapshot layout mismatch");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Tensor;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weight_dense_maps_to_zero() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut dense = Dense::new(4, 3, &mut rng);
        dense.w = Tensor::zeros(4, 3);
        dense.b = Tensor::zeros(1, 3);
        let mut net = Network::new(vec![Layer::Dense(dense)]);
        let x = random_tensor(&mut rng, 5, 4);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn identity_dense_reproduces_input() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut dense = Dense::new(3, 3, &mut rng);
        dense.w = Tensor::identity(3);
        dense.b = Tensor::zeros(1, 3);
        let mut net = Network::new(vec![Layer::Dense(dense)]);
        let x = random_tensor(&mut rng, 4, 3);
        let y = net.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    /// Straight-line recomputation of relu(xW1 + b1)W2 + b2 with raw loops.
    #[test]
    fn two_layer_forward_matches_straight_line_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let d1 = Dense::new(4, 6, &mut rng);
        let d2 = Dense::new(6, 3, &mut rng);
        let (w1, b1) = (d1.w.clone(), d1.b.clone());
        let (w2, b2) = (d2.w.clone(), d2.b.clone());
        let mut net = Network::new(vec![
            Layer::Dense(d1),
            Layer::Relu(Relu::default()),
            Layer::Dense(d2),
        ]);
        let x = random_tensor(&mut rng, 5, 4);
        let got = net.forward(&x).unwrap();

        for r in 0..5 {
            let mut hidden = vec![0.0; 6];
            for j in 0..6 {
                let mut s = b1.get(0, j);
                for k in 0..4 {
                    s += x.get(r, k) * w1.get(k, j);
                }
                hidden[j] = if s > 0.0 { s } else { 0.0 };
            }
            for c in 0..3 {
                let mut s = b2.get(0, c);
                for j in 0..6 {
                    s += hidden[j] * w2.get(j, c);
                }
                assert!((got.get(r, c) - s).abs() < 1e-12, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn shape_chain_break_is_reported() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut net = Network::new(vec![Layer::Dense(Dense::new(4, 3, &mut rng))]);
        let x = random_tensor(&mut rng, 2, 5);
        assert!(matches!(net.forward(&x), Err(NetError::ShapeChain { .. })));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut net = Network::new(vec![Layer::Dense(Dense::new(2, 2, &mut rng))]);
        let g = Tensor::zeros(1, 2);
        assert!(matches!(net.backward(&g), Err(NetError::BackwardBeforeForward)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut net = Network::new(vec![
            Layer::Dense(Dense::new(3, 5, &mut rng)),
            Layer::Sigmoid(Sigmoid::default()),
            Layer::Dense(Dense::new(5, 2, &mut rng)),
        ]);
        let x = random_tensor(&mut rng, 4, 3);
        let y = net.forward(&x).unwrap();
        net.backward(&Tensor::zeros(4, 2)).unwrap();
        let _ = y;
        net.visit_params(&mut |_, g| assert_eq!(g.max_abs(), 0.0));
    }

    /// Dense gradient structure on a 2x2 against the hand derivation
    /// grad_W = x^T grad_y.
    #[test]
    fn dense_gradient_structure() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut dense = Dense::new(2, 2, &mut rng);
        dense.b = Tensor::zeros(1, 2);
        let mut net = Network::new(vec![Layer::Dense(dense)]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        net.forward(&x).unwrap();
        let g = Tensor::from_rows(&[vec![0.3, -0.7]]);
        net.backward(&g).unwrap();
        let want = x.transpose().matmul(&g).unwrap();
        if let Layer::Dense(d) = &net.layers[0] {
            for (a, b) in d.gw.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-15);
            }
            // grad_b = column sums of grad_y.
            assert!((d.gb.get(0, 0) - 0.3).abs() < 1e-15);
            assert!((d.gb.get(0, 1) + 0.7).abs() < 1e-15);
        } else {
            unreachable!();
        }
    }

    /// Full-network finite-difference check through every layer kind.
    #[test]
    fn full_net_gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = StdRng::seed_from_u64(100 + seed);
            let net = Network::new(vec![
                Layer::Conv2d(Conv2d::new(1, 2, 3, 6, 6, &mut rng)),
                Layer::Relu(Relu::default()),
                Layer::Flatten(Flatten::default()),
                Layer::Dense(Dense::new(2 * 4 * 4, 5, &mut rng)),
                Layer::Sigmoid(Sigmoid::default()),
                Layer::Dense(Dense::new(5, 3, &mut rng)),
            ]);
            let x = random_tensor(&mut rng, 4, 36);
            let labels = vec![0usize, 2, 1, 0];
            let mut target = gradcheck::NetworkLossTarget::new(net, x, labels);
            let report = grad_check(&mut target, 1e-5, 1e-4);
            assert!(
                report.failures.is_empty(),
                "max rel err {} at {:?}",
                report.max_rel_err,
                report.failures
            );
        }
    }

    #[test]
    fn training_loss_decreases_on_separable_toy() {
        // Full-batch descent on a linearly separable 2-class set; after the
        // first 10 steps the loss must decrease monotonically in at least
        // 9/10 seeds.
        let mut ok = 0;
        for seed in 0..10u64 {
            let mut rng = StdRng::seed_from_u64(200 + seed);
            let n = 40;
            let mut x = Tensor::zeros(n, 2);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                let cx = if class == 0 { -1.0 } else { 1.0 };
                x.set(i, 0, cx + rng.random_range(-0.3..0.3));
                x.set(i, 1, rng.random_range(-0.3..0.3));
                labels.push(class);
            }
            let mut net = Network::new(vec![Layer::Dense(Dense::new(2, 2, &mut rng))]);
            let mut adam = AdamState::new(1e-2);
            let mut losses = Vec::new();
            for _ in 0..60 {
                let logits = net.forward(&x).unwrap();
                let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
                losses.push(loss);
                net.zero_grads();
                net.backward(&grad).unwrap();
                adam.step_with(|f| net.visit_params(f));
            }
            if losses.windows(2).skip(10).all(|w| w[1] <= w[0] + 1e-12) {
                ok += 1;
            }
        }
        assert!(ok >= 9, "monotone decrease in only {ok}/10 seeds");
    }
}
