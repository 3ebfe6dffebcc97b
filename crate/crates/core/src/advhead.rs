//! Reverse-gradient alternatives to the projection head.
//!
//! Both variants train the raw-branch logits `F_P` on the task while
//! pushing the encoder representation to carry no information a small
//! discriminator can exploit:
//!
//! * ADV: a softmax discriminator tries to predict the texture branch's
//!   class vote (argmax of `F_G`, detached) from `F_P`; the main model
//!   receives the sign-flipped discriminator gradient through a gradient
//!   reversal layer.
//! * ADVE: a regression discriminator tries to predict the texture
//!   representation `g` itself from `h`; the encoder receives the
//!   sign-flipped regression gradient.
//!
//! Updates alternate: one discriminator step, then one main step per
//! minibatch. Discriminator targets are detached, so its training never
//! touches texture-branch parameters.

use crate::hexhead::argmax_rows;
use crate::linalg::Tensor;
use crate::netcore::{cross_entropy, AdamState, Dense, Layer, NetError, Network, Relu};
use rand::rngs::StdRng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdvError {
    #[error("reversal scale must be nonnegative, got {0}")]
    NegativeScale(f64),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Identity in the forward pass; backward multiplies the incoming gradient
/// by `-scale`.
#[derive(Debug, Clone, Copy)]
pub struct GradReversal {
    pub scale: f64,
}

impl GradReversal {
    pub fn new(scale: f64) -> Result<Self, AdvError> {
        if scale < 0.0 {
            return Err(AdvError::NegativeScale(scale));
        }
        Ok(GradReversal { scale })
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    pub fn backward(&self, grad: &Tensor) -> Tensor {
        grad.scale(-self.scale)
    }
}

/// Small MLP mapping a protected representation to its targets: regression
/// targets for ADVE, class-alignment targets for ADV. One hidden layer,
/// width 64, rectified.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub net: Network,
}

pub const DISC_HIDDEN_WIDTH: usize = 64;

impl Discriminator {
    pub fn new(input: usize, output: usize, rng: &mut StdRng) -> Self {
        Discriminator {
            net: Network::new(vec![
                Layer::Dense(Dense::new(input, DISC_HIDDEN_WIDTH, rng)),
                Layer::Relu(Relu::default()),
                Layer::Dense(Dense::new(DISC_HIDDEN_WIDTH, output, rng)),
            ]),
        }
    }

    /// Purely linear variant, for convergence baselines.
    pub fn linear(input: usize, output: usize, rng: &mut StdRng) -> Self {
        Discriminator {
            net: Network::new(vec![Layer::Dense(Dense::new(input, output, rng))]),
        }
    }

    /// Mean-over-batch squared error, summed over output dimensions.
    fn mse(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
        let n = pred.rows() as f64;
        let diff = pred.sub(target).expect("prediction/target shapes agree");
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
        (loss, diff.scale(2.0 / n))
    }

    /// One optimizer step minimizing squared error on a detached batch.
    pub fn mse_update(
        &mut self,
        input: &Tensor,
        target: &Tensor,
        adam: &mut AdamState,
    ) -> Result<f64, AdvError> {
        let pred = self.net.forward(input)?;
        let (loss, grad) = Self::mse(&pred, target);
        self.net.zero_grads();
        self.net.backward(&grad)?;
        adam.step_with(|f| self.net.visit_params(f));
        Ok(loss)
    }

    /// Squared-error loss and its gradient w.r.t. the input, parameters
    /// frozen.
    pub fn mse_input_gradient(
        &mut self,
        input: &Tensor,
        target: &Tensor,
    ) -> Result<(f64, Tensor), AdvError> {
        let pred = self.net.forward(input)?;
        let (loss, grad) = Self::mse(&pred, target);
        self.net.zero_grads();
        let grad_in = self.net.backward(&grad)?;
        self.net.zero_grads();
        Ok((loss, grad_in))
    }

    /// One optimizer step minimizing cross-entropy on detached inputs.
    pub fn ce_update(
        &mut self,
        input: &Tensor,
        labels: &[usize],
        adam: &mut AdamState,
    ) -> Result<f64, AdvError> {
        let pred = self.net.forward(input)?;
        let (loss, grad) = cross_entropy(&pred, labels)?;
        self.net.zero_grads();
        self.net.backward(&grad)?;
        adam.step_with(|f| self.net.visit_params(f));
        Ok(loss)
    }

    /// Cross-entropy loss and its gradient w.r.t. the input, parameters
    /// frozen.
    pub fn ce_input_gradient(
        &mut self,
        input: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, Tensor), AdvError> {
        let pred = self.net.forward(input)?;
        let (loss, grad) = cross_entropy(&pred, labels)?;
        self.net.zero_grads();
        let grad_in = self.net.backward(&grad)?;
        self.net.zero_grads();
        Ok((loss, grad_in))
    }
}

/// Result of one adversarial coupling step.
#[derive(Debug, Clone)]
pub struct AdversarialStep {
    pub disc_loss: f64,
    /// Reversed gradient to add into the protected representation's
    /// upstream gradient.
    pub reversed_grad: Tensor,
}

/// ADVE coupling: the discriminator regresses `g_repr` from `h_repr`
/// (both detached for its own update), then the encoder representation
/// receives the sign-flipped regression gradient.
pub fn adve_step(
    h_repr: &Tensor,
    g_repr: &Tensor,
    disc: &mut Discriminator,
    disc_adam: &mut AdamState,
    reversal: GradReversal,
) -> Result<AdversarialStep, AdvError> {
    let disc_loss = disc.mse_update(h_repr, g_repr, disc_adam)?;
    let (_, grad_h) = disc.mse_input_gradient(h_repr, g_repr)?;
    Ok(AdversarialStep {
        disc_loss,
        reversed_grad: reversal.backward(&grad_h),
    })
}

/// ADV coupling: the discriminator classifies the texture branch's vote
/// (argmax of detached `F_G`) from `F_P`, then `F_P` receives the
/// sign-flipped classification gradient.
pub fn adv_step(
    f_p: &Tensor,
    f_g_detached: &Tensor,
    disc: &mut Discriminator,
    disc_adam: &mut AdamState,
    reversal: GradReversal,
) -> Result<AdversarialStep, AdvError> {
    let pseudo_labels = argmax_rows(f_g_detached);
    let disc_loss = disc.ce_update(f_p, &pseudo_labels, disc_adam)?;
    let (_, grad_fp) = disc.ce_input_gradient(f_p, &pseudo_labels)?;
    Ok(AdversarialStep {
        disc_loss,
        reversed_grad: reversal.backward(&grad_fp),
    })
}
