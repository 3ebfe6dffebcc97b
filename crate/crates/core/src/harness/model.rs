//! The composite model one method code wires up: encoder, optional texture
//! branch, block decoder, and (for the reverse-gradient variants) a
//! discriminator with its own optimizer.

use super::{ArchConfig, ConfigError, EncoderKind, ExperimentConfig, MethodCode};
use crate::advhead::{adv_step, adve_step, Discriminator, GradReversal};
use crate::hexhead::{
    argmax_rows, build_outputs, column_normalize, column_normalize_backward, hex_backward,
    hex_loss, predict, project_with_fallback, Decoder, GBranch, HexLossGrads, HexMode, HexOutputs,
};
use crate::linalg::Tensor;
use crate::netcore::{
    cross_entropy, AdamState, Conv2d, Dense, Flatten, Layer, Network, Relu,
};
use crate::nglcm::NglcmLayer;
use crate::seeding;

/// Training objective selected by the method code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Task cross-entropy on the raw-branch logits; no texture machinery.
    Baseline,
    /// Projection-head training in the given mode.
    Hex(HexMode),
    /// Reverse-gradient on the raw logits against the texture vote.
    Adv,
    /// Reverse-gradient on the encoder representation against the texture
    /// representation.
    Adve,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub loss: f64,
    /// The projection fell back to the ridge path this step.
    pub used_ridge: bool,
    pub disc_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Network,
    pub g_branch: Option<GBranch>,
    pub decoder: Decoder,
    pub objective: Objective,
    pub disc: Option<Discriminator>,
    pub disc_adam: Option<AdamState>,
    pub lambda_loss: f64,
    pub adv_scale: f64,
    pub force_zero_g: bool,
    pub detach_projection: bool,
    pub side: usize,
    pub classes: usize,
    /// Encoder representation width.
    pub h_width: usize,
}

fn build_encoder(arch: &ArchConfig, side: usize, rng: &mut rand::rngs::StdRng) -> (Network, usize) {
    match &arch.encoder {
        EncoderKind::Mlp { hidden } => {
            assert!(!hidden.is_empty(), "encoder needs at least one layer");
            let mut layers = Vec::new();
            let mut width = side * side;
            for &h in hidden {
                layers.push(Layer::Dense(Dense::new(width, h, rng)));
                layers.push(Layer::Relu(Relu::default()));
                width = h;
            }
            (Network::new(layers), width)
        }
        EncoderKind::Cnn {
            channels,
            kernel,
            repr_width,
        } => {
            let (c1, c2) = *channels;
            let conv1 = Conv2d::new(1, c1, *kernel, side, side, rng);
            let (h1, w1) = (conv1.out_height(), conv1.out_width());
            let conv2 = Conv2d::new(c1, c2, *kernel, h1, w1, rng);
            let flat = c2 * conv2.out_height() * conv2.out_width();
            let layers = vec![
                Layer::Conv2d(conv1),
                Layer::Relu(Relu::default()),
                Layer::Conv2d(conv2),
                Layer::Relu(Relu::default()),
                Layer::Flatten(Flatten::default()),
                Layer::Dense(Dense::new(flat, *repr_width, rng)),
                Layer::Relu(Relu::default()),
            ];
            (Network::new(layers), *repr_width)
        }
    }
}

/// Build the model a method code names. Every component initializes from
/// its own named stream of the master seed, so wirings that share a
/// component initialize it identically.
pub fn wire_method(config: &ExperimentConfig, side: usize, classes: usize) -> Result<Model, ConfigError> {
    config.validate()?;
    let mut enc_rng = seeding::stream(config.seed, "encoder");
    let (encoder, h_width) = build_encoder(&config.arch, side, &mut enc_rng);

    let objective = match config.method {
        MethodCode::B => Objective::Baseline,
        MethodCode::M | MethodCode::H => Objective::Hex(HexMode::Hex),
        MethodCode::N => Objective::Hex(HexMode::AblationN),
        MethodCode::V => Objective::Hex(HexMode::HexAdv),
        MethodCode::L => Objective::Hex(HexMode::HexAll),
        MethodCode::A => Objective::Adv,
        MethodCode::E => Objective::Adve,
    };

    let has_g = !matches!(config.method, MethodCode::B);
    let g_width = if has_g { config.arch.g_width } else { 0 };
    let mut dec_rng = seeding::stream(config.seed, "decoder");
    let decoder = Decoder::new(h_width, g_width, classes, &mut dec_rng);

    let g_branch = if has_g {
        let mut g_rng = seeding::stream(config.seed, "texture-branch");
        Some(if config.method == MethodCode::M {
            GBranch::mlp(side * side, config.arch.g_width, &mut g_rng)
        } else {
            let nglcm = NglcmLayer::new(config.arch.levels, side, config.arch.direction, &mut g_rng);
            GBranch::nglcm(nglcm, config.arch.g_width, &mut g_rng)
        })
    } else {
        None
    };

    let (disc, disc_adam) = match objective {
        Objective::Adv => {
            let mut rng = seeding::stream(config.seed, "discriminator");
            (
                Some(Discriminator::new(classes, classes, &mut rng)),
                Some(AdamState::new(config.learning_rate)),
            )
        }
        Objective::Adve => {
            let mut rng = seeding::stream(config.seed, "discriminator");
            (
                Some(Discriminator::new(h_width, config.arch.g_width, &mut rng)),
                Some(AdamState::new(config.learning_rate)),
            )
        }
        _ => (None, None),
    };

    Ok(Model {
        encoder,
        g_branch,
        decoder,
        objective,
        disc,
        disc_adam,
        lambda_loss: config.lambda_loss,
        adv_scale: config.adv_scale,
        force_zero_g: config.force_zero_g,
        detach_projection: config.detach_projection,
        side,
        classes,
        h_width,
    })
}

impl Model {
    /// Encoder representation, column-normalized per minibatch; also
    /// returns the pre-normalization representation for the backward pass.
    fn encode(&mut self, x_raw: &Tensor) -> Result<(Tensor, Tensor), ConfigError> {
        let x = x_raw.scale(1.0 / 255.0);
        let h = self.encoder.forward(&x)?;
        let h_norm = column_normalize(&h);
        Ok((h, h_norm))
    }

    fn texture(&mut self, x_raw: &Tensor) -> Result<Option<(Tensor, Tensor)>, ConfigError> {
        match self.g_branch.as_mut() {
            None => Ok(None),
            Some(_) if self.force_zero_g => {
                let zeros = Tensor::zeros(x_raw.rows(), self.decoder.w_g.rows());
                Ok(Some((zeros.clone(), zeros)))
            }
            Some(g) => {
                let repr = g.forward(x_raw)?;
                let norm = column_normalize(&repr);
                Ok(Some((repr, norm)))
            }
        }
    }

    /// One optimizer step on one minibatch.
    pub fn train_step(
        &mut self,
        x_raw: &Tensor,
        labels: &[usize],
        adam: &mut AdamState,
    ) -> Result<StepStats, ConfigError> {
        let stats = self.forward_backward(x_raw, labels)?;
        adam.step_with(|f| self.visit_params(f));
        Ok(stats)
    }

    /// Loss and accumulated parameter gradients for one minibatch, without
    /// the optimizer update. For the reverse-gradient objectives this also
    /// advances the discriminator by its one alternating step.
    pub fn forward_backward(&mut self, x_raw: &Tensor, labels: &[usize]) -> Result<StepStats, ConfigError> {
        self.zero_grads();
        let (h, h_norm) = self.encode(x_raw)?;
        let mut stats = StepStats::default();

        let grad_h_norm = match self.objective {
            Objective::Baseline => {
                let logits = self.decoder.decode(Some(&h_norm), None, h_norm.rows())?;
                let (loss, grad) = cross_entropy(&logits, labels)?;
                stats.loss = loss;
                let (gh, _) = self.decoder.backward(Some(&h_norm), None, &grad)?;
                gh.expect("h branch was live")
            }
            Objective::Hex(mode) => {
                let (g, g_norm) = self.texture(x_raw)?.expect("hex wiring carries a texture branch");
                let (f_a, f_g, f_p) = build_outputs(&h_norm, &g_norm, &self.decoder)?;
                let needs_projection = mode != HexMode::AblationN;
                let (f_l, cache) = if needs_projection {
                    let (f_l, cache) = project_with_fallback(&f_a, &f_g)?;
                    stats.used_ridge = !cache.exact;
                    (f_l, Some(cache))
                } else {
                    (f_a.clone(), None)
                };
                let outputs = HexOutputs {
                    f_a: f_a.clone(),
                    f_g,
                    f_p,
                    f_l,
                };
                let (loss, grads) = hex_loss(&outputs, labels, mode, self.lambda_loss)?;
                stats.loss = loss;
                let HexLossGrads {
                    grad_f_l,
                    grad_f_g,
                    grad_f_a,
                } = grads;

                let mut total_f_a = grad_f_a;
                let mut total_f_g = grad_f_g;
                if let Some(gl) = grad_f_l {
                    let cache = cache.as_ref().expect("projection ran for this mode");
                    let (ga, gg) = hex_backward(cache, &gl, self.detach_projection)?;
                    total_f_a = Some(match total_f_a {
                        Some(t) => t.add(&ga)?,
                        None => ga,
                    });
                    total_f_g = Some(match total_f_g {
                        Some(t) => t.add(&gg)?,
                        None => gg,
                    });
                }

                let mut grad_h_norm = Tensor::zeros(h_norm.rows(), h_norm.cols());
                let mut grad_g_norm = Tensor::zeros(g_norm.rows(), g_norm.cols());
                if let Some(ga) = total_f_a {
                    let (gh, gg) = self.decoder.backward(Some(&h_norm), Some(&g_norm), &ga)?;
                    grad_h_norm = grad_h_norm.add(&gh.expect("h live"))?;
                    grad_g_norm = grad_g_norm.add(&gg.expect("g live"))?;
                }
                if let Some(gg_logits) = total_f_g {
                    let (_, gg) = self.decoder.backward(None, Some(&g_norm), &gg_logits)?;
                    grad_g_norm = grad_g_norm.add(&gg.expect("g live"))?;
                }
                if !self.force_zero_g {
                    let grad_g = column_normalize_backward(&g, &grad_g_norm);
                    self.g_branch
                        .as_mut()
                        .expect("texture branch present")
                        .backward(&grad_g)?;
                }
                grad_h_norm
            }
            Objective::Adv => {
                let (_, g_norm) = self.texture(x_raw)?.expect("adv wiring carries a texture branch");
                let f_g = self.decoder.decode(None, Some(&g_norm), g_norm.rows())?;
                let f_p = self.decoder.decode(Some(&h_norm), None, h_norm.rows())?;
                let reversal = GradReversal::new(self.adv_scale)?;
                let adv = adv_step(
                    &f_p,
                    &f_g,
                    self.disc.as_mut().expect("adv carries a discriminator"),
                    self.disc_adam.as_mut().expect("disc optimizer present"),
                    reversal,
                )?;
                stats.disc_loss = Some(adv.disc_loss);
                let (loss, grad_task) = cross_entropy(&f_p, labels)?;
                stats.loss = loss;
                let grad_f_p = grad_task.add(&adv.reversed_grad)?;
                let (gh, _) = self.decoder.backward(Some(&h_norm), None, &grad_f_p)?;
                gh.expect("h branch was live")
            }
            Objective::Adve => {
                let (_, g_norm) = self.texture(x_raw)?.expect("adve wiring carries a texture branch");
                let reversal = GradReversal::new(self.adv_scale)?;
                let adv = adve_step(
                    &h_norm,
                    &g_norm,
                    self.disc.as_mut().expect("adve carries a discriminator"),
                    self.disc_adam.as_mut().expect("disc optimizer present"),
                    reversal,
                )?;
                stats.disc_loss = Some(adv.disc_loss);
                let f_p = self.decoder.decode(Some(&h_norm), None, h_norm.rows())?;
                let (loss, grad_task) = cross_entropy(&f_p, labels)?;
                stats.loss = loss;
                let (gh, _) = self.decoder.backward(Some(&h_norm), None, &grad_task)?;
                gh.expect("h branch was live").add(&adv.reversed_grad)?
            }
        };

        let grad_h = column_normalize_backward(&h, &grad_h_norm);
        self.encoder.backward(&grad_h)?;
        Ok(stats)
    }

    /// The mode's task loss on a full split, without touching the
    /// discriminator or parameter gradients.
    pub fn evaluate_loss(&mut self, x_raw: &Tensor, labels: &[usize]) -> Result<f64, ConfigError> {
        let (_, h_norm) = self.encode(x_raw)?;
        let loss = match self.objective {
            Objective::Baseline | Objective::Adv | Objective::Adve => {
                let logits = self.decoder.decode(Some(&h_norm), None, h_norm.rows())?;
                cross_entropy(&logits, labels)?.0
            }
            Objective::Hex(mode) => {
                let (_, g_norm) = self.texture(x_raw)?.expect("texture branch present");
                let (f_a, f_g, f_p) = build_outputs(&h_norm, &g_norm, &self.decoder)?;
                let f_l = if mode == HexMode::AblationN {
                    f_a.clone()
                } else {
                    project_with_fallback(&f_a, &f_g)?.0
                };
                let outputs = HexOutputs { f_a, f_g, f_p, f_l };
                hex_loss(&outputs, labels, mode, self.lambda_loss)?.0
            }
        };
        Ok(loss)
    }

    /// Test-time class predictions. Every objective predicts from the
    /// raw-branch logits except the all-logits projection mode, which pays
    /// the texture evaluation to predict from the projected logits.
    pub fn predict_batch(&mut self, x_raw: &Tensor) -> Result<Vec<usize>, ConfigError> {
        let (_, h_norm) = self.encode(x_raw)?;
        if self.objective == Objective::Hex(HexMode::HexAll) {
            let (_, g_norm) = self.texture(x_raw)?.expect("texture branch present");
            let (f_a, f_g, f_p) = build_outputs(&h_norm, &g_norm, &self.decoder)?;
            let (f_l, _) = project_with_fallback(&f_a, &f_g)?;
            let outputs = HexOutputs { f_a, f_g, f_p, f_l };
            return Ok(predict(&outputs, HexMode::HexAll));
        }
        let f_p = self.decoder.decode(Some(&h_norm), None, h_norm.rows())?;
        Ok(argmax_rows(&f_p))
    }

    pub fn accuracy(&mut self, x_raw: &Tensor, labels: &[usize]) -> Result<f64, ConfigError> {
        let pred = self.predict_batch(x_raw)?;
        let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    /// Texture representation for probes, straight from the branch.
    pub fn texture_representation(&mut self, x_raw: &Tensor) -> Result<Tensor, ConfigError> {
        let g = self
            .g_branch
            .as_mut()
            .expect("texture branch present")
            .forward(x_raw)?;
        Ok(g)
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        if let Some(g) = &mut self.g_branch {
            g.zero_grads();
        }
        self.decoder.zero_grads();
    }

    /// All main-model parameters in a stable order (the discriminator owns
    /// its own optimizer and is excluded).
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &Tensor)) {
        self.encoder.visit_params(f);
        if let Some(g) = &mut self.g_branch {
            g.visit_params(f);
        }
        self.decoder.visit_params(f);
    }

    pub fn param_snapshot(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut probe = self.clone();
        probe.visit_params(&mut |p, _| out.push(p.clone()));
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

    /// Parameters every wiring shares with the baseline: encoder, the
    /// raw-branch decoder block, and the bias. Used by trajectory-equality
    /// checks.
    pub fn shared_core_snapshot(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut probe = self.clone();
        probe.encoder.visit_params(&mut |p, _| out.push(p.clone()));
        out.push(self.decoder.w_h.clone());
        out.push(self.decoder.bias.clone());
        out
    }

    /// Forward evaluations of the texture product so far, when the wiring
    /// carries the co-occurrence block.
    pub fn texture_eval_count(&self) -> Option<u64> {
        self.g_branch.as_ref().and_then(|g| g.texture_eval_count())
    }

    /// Hash of the texture-branch threshold parameters, for asserting that
    /// discriminator-only steps leave them untouched.
    pub fn phi_fingerprint(&self) -> Option<u64> {
        match self.g_branch.as_ref()? {
            GBranch::Nglcm { nglcm, .. } => {
                let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
                for phi in [&nglcm.params.phi_a, &nglcm.params.phi_b] {
                    for v in phi.data() {
                        acc ^= v.to_bits();
                        acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
                Some(acc)
            }
            GBranch::Mlp { .. } => None,
        }
    }

    /// One discriminator-only update on a batch, leaving main parameters
    /// alone. Exposed for the ablation checks.
    pub fn disc_only_step(&mut self, x_raw: &Tensor) -> Result<Option<f64>, ConfigError> {
        let (_, h_norm) = self.encode(x_raw)?;
        let Some((_, g_norm)) = self.texture(x_raw)? else {
            return Ok(None);
        };
        match self.objective {
            Objective::Adve => {
                let disc = self.disc.as_mut().expect("adve carries a discriminator");
                let adam = self.disc_adam.as_mut().expect("disc optimizer present");
                Ok(Some(
                    disc.mse_update(&h_norm, &g_norm, adam)?,
                ))
            }
            Objective::Adv => {
                let f_g = self.decoder.decode(None, Some(&g_norm), g_norm.rows())?;
                let f_p = self.decoder.decode(Some(&h_norm), None, h_norm.rows())?;
                let pseudo = argmax_rows(&f_g);
                let disc = self.disc.as_mut().expect("adv carries a discriminator");
                let adam = self.disc_adam.as_mut().expect("disc optimizer present");
                Ok(Some(
                    disc.ce_update(&f_p, &pseudo, adam)?,
                ))
            }
            _ => Ok(None),
        }
    }
}

