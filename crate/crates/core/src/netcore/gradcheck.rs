//! Central finite-difference verification of analytic gradients.

use super::{cross_entropy, NetError, Network};
use crate::linalg::Tensor;

/// Anything whose scalar loss and flat parameter vector can be probed.
///
/// `loss` must be deterministic in the parameters. Parameters sitting on a
/// nondifferentiable kink (clamp or rectifier corners) can be excluded via
/// `skip_param`; numeric and analytic derivatives legitimately disagree
/// there.
pub trait GradCheckTarget {
    fn param_count(&self) -> usize;
    fn get_param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, v: f64);
    /// Forward-only loss at the current parameters.
    fn loss(&mut self) -> f64;
    /// Loss plus the analytic gradient for every parameter.
    fn loss_and_grads(&mut self) -> (f64, Vec<f64>);
    fn skip_param(&self, _i: usize) -> bool {
        false
    }
    /// Magnitude below which the comparison turns absolute. Central
    /// differences at step 1e-5 on an O(1) loss resolve about 1e-9 of
    /// absolute gradient, so targets with long cancellation-prone forward
    /// passes may override this upward.
    fn rel_err_floor(&self) -> f64 {
        REL_ERR_FLOOR
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    /// Indices whose relative error exceeds the tolerance.
    pub failures: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Default relative error floor: below this magnitude the comparison is
/// effectively absolute, which keeps finite-difference rounding noise
/// (~1e-10 for O(1) losses at step 1e-5) from dominating near-zero
/// gradients.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn grad_check(target: &mut dyn GradCheckTarget, step: f64, tolerance: f64) -> GradCheckReport {
    assert!(step > 0.0);
    let (_, analytic) = target.loss_and_grads();
    let n = target.param_count();
    assert_eq!(analytic.len(), n);
    let mut per_param = Vec::with_capacity(n);
    let mut max_rel_err: f64 = 0.0;
    let mut failures = Vec::new();
    let floor = target.rel_err_floor();
    for i in 0..n {
        if target.skip_param(i) {
            per_param.push(ParamCheck {
                index: i,
                analytic: analytic[i],
                numeric: f64::NAN,
                rel_err: 0.0,
                skipped: true,
            });
            continue;
        }
        let orig = target.get_param(i);
        target.set_param(i, orig + step);
        let up = target.loss();
        target.set_param(i, orig - step);
        let down = target.loss();
        target.set_param(i, orig);
        let numeric = (up - down) / (2.0 * step);
        let rel_err =
            (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        if rel_err > tolerance {
            failures.push(i);
        }
        max_rel_err = max_rel_err.max(rel_err);
        per_param.push(ParamCheck {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_err,
            skipped: false,
        });
    }
    GradCheckReport {
        per_param,
        max_rel_err,
        failures,
        tolerance,
    }
}

/// A network plus a fixed minibatch under cross-entropy, viewed as a
/// gradient-check target.
pub struct NetworkLossTarget {
    pub net: Network,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    layout: Vec<(usize, usize)>,
}

impl NetworkLossTarget {
    pub fn new(net: Network, inputs: Tensor, labels: Vec<usize>) -> Self {
        let mut layout = Vec::new();
        let mut probe = net.clone();
        probe.visit_params(&mut |p, _| layout.push(p.shape()));
        NetworkLossTarget {
            net,
            inputs,
            labels,
            layout,
        }
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let mut rem = i;
        for (t, &(r, c)) in self.layout.iter().enumerate() {
            if rem < r * c {
                return (t, rem);
            }
            rem -= r * c;
        }
        panic!("parameter index {i} out of range");
    }

    fn forward_loss(&mut self) -> Result<f64, NetError> {
        let logits = self.net.forward(&self.inputs)?;
        let (loss, _) = cross_entropy(&logits, &self.labels)?;
        Ok(loss)
    }
}

impl GradCheckTarget for NetworkLossTarget {
    fn param_count(&self) -> usize {
        self.layout.iter().map(|(r, c)| r * c).sum()
    }

    fn get_param(&self, i: usize) -> f64 {
        let (t, off) = self.locate(i);
        let mut val = 0.0;
        let mut idx = 0;
        let mut net = self.net.clone();
        net.visit_params(&mut |p, _| {
            if idx == t {
                val = p.data()[off];
            }
            idx += 1;
        });
        val
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let (t, off) = self.locate(i);
        let mut idx = 0;
        self.net.visit_params(&mut |p, _| {
            if idx == t {
                p.data_mut()[off] = v;
            }
            idx += 1;
        });
    }

    fn loss(&mut self) -> f64 {
        self.forward_loss().expect("shapes fixed at construction")
    }

    fn loss_and_grads(&mut self) -> (f64, Vec<f64>) {
        let logits = self.net.forward(&self.inputs).expect("shapes fixed");
        let (loss, grad) = cross_entropy(&logits, &self.labels).expect("labels validated");
        self.net.zero_grads();
        self.net.backward(&grad).expect("forward just ran");
        let mut flat = Vec::with_capacity(self.param_count());
        self.net.visit_params(&mut |_, g| flat.extend_from_slice(g.data()));
        (loss, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Dense, Layer};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// w |-> ||Xw - y||^2 / n is exactly quadratic, so central differences
    /// are exact up to rounding.
    struct LinearLeastSquares {
        w: Vec<f64>,
        x: Tensor,
        y: Vec<f64>,
    }

    impl GradCheckTarget for LinearLeastSquares {
        fn param_count(&self) -> usize {
            self.w.len()
        }
        fn get_param(&self, i: usize) -> f64 {
            self.w[i]
        }
        fn set_param(&mut self, i: usize, v: f64) {
            self.w[i] = v;
        }
        fn loss(&mut self) -> f64 {
            let n = self.x.rows();
            let mut total = 0.0;
            for r in 0..n {
                let pred: f64 = (0..self.w.len()).map(|c| self.x.get(r, c) * self.w[c]).sum();
                total += (pred - self.y[r]).powi(2);
            }
            total / n as f64
        }
        fn loss_and_grads(&mut self) -> (f64, Vec<f64>) {
            let n = self.x.rows();
            let mut grads = vec![0.0; self.w.len()];
            for r in 0..n {
                let pred: f64 = (0..self.w.len()).map(|c| self.x.get(r, c) * self.w[c]).sum();
                let resid = 2.0 * (pred - self.y[r]) / n as f64;
                for c in 0..self.w.len() {
                    grads[c] += resid * self.x.get(r, c);
                }
            }
            (self.loss(), grads)
        }
    }

    #[test]
    fn exactly_linear_model_has_tiny_error() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = Tensor::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut target = LinearLeastSquares {
            w: vec![0.3, -0.2, 0.9],
            x,
            y,
        };
        let report = grad_check(&mut target, 1e-5, 1e-4);
        assert!(report.passed());
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn report_flags_exceeding_parameters_by_index() {
        // A target that lies about one gradient component.
        struct Liar(LinearLeastSquares);
        impl GradCheckTarget for Liar {
            fn param_count(&self) -> usize {
                self.0.param_count()
            }
            fn get_param(&self, i: usize) -> f64 {
                self.0.get_param(i)
            }
            fn set_param(&mut self, i: usize, v: f64) {
                self.0.set_param(i, v)
            }
            fn loss(&mut self) -> f64 {
                self.0.loss()
            }
            fn loss_and_grads(&mut self) -> (f64, Vec<f64>) {
                let (l, mut g) = self.0.loss_and_grads();
                g[1] += 1.0;
                (l, g)
            }
        }
        let mut rng = StdRng::seed_from_u64(10);
        let x = Tensor::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut target = Liar(LinearLeastSquares {
            w: vec![0.1, 0.2, 0.3],
            x,
            y,
        });
        let report = grad_check(&mut target, 1e-5, 1e-4);
        assert_eq!(report.failures, vec![1]);
    }

    #[test]
    fn skipped_parameters_are_marked_not_probed() {
        struct SkipAll(LinearLeastSquares);
        impl GradCheckTarget for SkipAll {
            fn param_count(&self) -> usize {
                self.0.param_count()
            }
            fn get_param(&self, i: usize) -> f64 {
                self.0.get_param(i)
            }
            fn set_param(&mut self, i: usize, v: f64) {
                self.0.set_param(i, v)
            }
            fn loss(&mut self) -> f64 {
                self.0.loss()
            }
            fn loss_and_grads(&mut self) -> (f64, Vec<f64>) {
                self.0.loss_and_grads()
            }
            fn skip_param(&self, i: usize) -> bool {
                i == 0
            }
        }
        let x = Tensor::from_fn(4, 2, |r, c| (r + c) as f64);
        let mut target = SkipAll(LinearLeastSquares {
            w: vec![0.5, 0.5],
            x,
            y: vec![1.0; 4],
        });
        let report = grad_check(&mut target, 1e-5, 1e-4);
        assert!(report.per_param[0].skipped);
        assert!(!report.per_param[1].skipped);
    }

    #[test]
    fn network_target_round_trips_params() {
        let mut rng = StdRng::seed_from_u64(11);
        let net = Network::new(vec![Layer::Dense(Dense::new(3, 2, &mut rng))]);
        let x = Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut target = NetworkLossTarget::new(net, x, vec![0, 1, 0, 1]);
        let v = target.get_param(5);
        target.set_param(5, v + 1.0);
        assert!((target.get_param(5) - (v + 1.0)).abs() < 1e-15);
        target.set_param(5, v);
    }
}
