//! Bias-corrected first-order optimizer with per-parameter moments.

use crate::linalg::Tensor;

/// Optimizer state: one (first, second) moment pair per parameter tensor,
/// lazily shaped on the first step. The visit order of parameters must stay
/// stable across steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
    cursor: usize,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
            cursor: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One full update: the closure must visit every `(param, grad)` pair
    /// exactly once, in the same order every step.
    pub fn step_with(&mut self, visit: impl FnOnce(&mut dyn FnMut(&mut Tensor, &Tensor))) {
        self.step += 1;
        self.cursor = 0;
        let mut apply = |p: &mut Tensor, g: &Tensor| self.update_one(p, g);
        visit(&mut apply);
    }

    fn update_one(&mut self, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "param/grad shape mismatch");
        if self.cursor == self.moments.len() {
            self.moments.push((
                Tensor::zeros(param.rows(), param.cols()),
                Tensor::zeros(param.rows(), param.cols()),
            ));
        }
        let (m, v) = &mut self.moments[self.cursor];
        assert_eq!(m.shape(), param.shape(), "parameter order changed between steps");
        self.cursor += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
            vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = AdamState::new(1e-2);
        let mut p = Tensor::from_rows(&[vec![1.0, -2.0]]);
        let g = Tensor::zeros(1, 2);
        for _ in 0..5 {
            adam.step_with(|f| f(&mut p, &g));
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_closed_form_on_scalar() {
        // After bias correction the first update is
        // -lr * g / (|g| + eps * sqrt(1 - beta2)) up to the eps placement;
        // with the standard formulation: m_hat = g, v_hat = g^2, so the
        // step is -lr * g / (|g| + eps).
        let mut adam = AdamState::new(0.1);
        let mut p = Tensor::from_rows(&[vec![0.0]]);
        let g = Tensor::from_rows(&[vec![3.0]]);
        adam.step_with(|f| f(&mut p, &g));
        let want = -0.1 * 3.0 / (3.0 + 1e-8);
        assert!((p.get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = ||w - w*||^2, gradient 2(w - w*).
        let target = [0.7, -1.3, 0.2];
        let mut adam = AdamState::new(5e-2);
        let mut w = Tensor::zeros(1, 3);
        for _ in 0..200 {
            let g = Tensor::from_fn(1, 3, |_, c| 2.0 * (w.get(0, c) - target[c]));
            adam.step_with(|f| f(&mut w, &g));
        }
        for c in 0..3 {
            assert!(
                (w.get(0, c) - target[c]).abs() < 1e-3,
                "component {c}: {} vs {}",
                w.get(0, c),
                target[c]
            );
        }
    }
}
