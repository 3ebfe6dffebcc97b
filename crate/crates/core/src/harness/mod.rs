//! Experiment runner: wires method variants, trains them on the shift
//! recipes, and emits metrics.
//!
//! Method codes name the model wirings compared in the ablation grid:
//! B baseline (encoder + decoder only), M texture branch replaced by a
//! one-layer MLP, N trained on the combined logits without projection,
//! E/A the reverse-gradient variants, H the projection head, V the
//! projection head with the weighted texture task loss, L the projection
//! head predicting from the projected logits.
//!
//! Every run is fully determined by (config, seed): data generation, all
//! parameter initialization, shuffling, and discriminator updates draw
//! from independently derived named streams.

mod checks;
mod model;
mod run;

pub use checks::{gradient_audit, grl_composite_check, AuditReport, ComponentReport};
pub use model::{wire_method, Model, Objective, StepStats};
pub use run::{
    emit_curves, emit_metrics, emit_summary, generate_dataset, linear_probe_cv, probe_experiment,
    run_experiment, run_grid, EpochMetrics, ProbeResult, ProbeScore, RunResult,
};

use crate::advhead::AdvError;
use crate::datasets::{DataError, ShiftKind, ShiftRecipe};
use crate::glcm::Direction;
use crate::hexhead::HexError;
use crate::linalg::LinalgError;
use crate::netcore::NetError;
use crate::nglcm::NglcmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown method code '{0}' (expected one of B M N E A H V L)")]
    UnknownMethod(String),
    #[error("method {method:?} uses the exact projection path and needs batch_size > classes ({classes}), got {batch_size}")]
    BatchTooSmall {
        method: MethodCode,
        batch_size: usize,
        classes: usize,
    },
    #[error("epochs, batch size, and learning rate must be positive")]
    DegenerateTraining,
    #[error("config key '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error(transparent)]
    Adv(#[from] AdvError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Hex(#[from] HexError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Nglcm(#[from] NglcmError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One-letter ablation-grid method codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodCode {
    B,
    M,
    N,
    E,
    A,
    H,
    V,
    L,
}

impl MethodCode {
    pub const ALL: [MethodCode; 8] = [
        MethodCode::B,
        MethodCode::M,
        MethodCode::N,
        MethodCode::E,
        MethodCode::A,
        MethodCode::H,
        MethodCode::V,
        MethodCode::L,
    ];

    pub fn letter(self) -> &'static str {
        match self {
            MethodCode::B => "B",
            MethodCode::M => "M",
            MethodCode::N => "N",
            MethodCode::E => "E",
            MethodCode::A => "A",
            MethodCode::H => "H",
            MethodCode::V => "V",
            MethodCode::L => "L",
        }
    }

    /// Does this wiring run logits through the exact projection?
    pub fn uses_exact_projection(self) -> bool {
        matches!(self, MethodCode::M | MethodCode::H | MethodCode::V | MethodCode::L)
    }
}

impl std::str::FromStr for MethodCode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B" | "b" => Ok(MethodCode::B),
            "M" | "m" => Ok(MethodCode::M),
            "N" | "n" => Ok(MethodCode::N),
            "E" | "e" => Ok(MethodCode::E),
            "A" | "a" => Ok(MethodCode::A),
            "H" | "h" => Ok(MethodCode::H),
            "V" | "v" => Ok(MethodCode::V),
            "L" | "l" => Ok(MethodCode::L),
            other => Err(ConfigError::UnknownMethod(other.to_string())),
        }
    }
}

/// Encoder family for the raw branch.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderKind {
    /// Dense-ReLU stack with the given hidden widths; the last width is
    /// the representation width.
    Mlp { hidden: Vec<usize> },
    /// Two valid-padding convolutions feeding one dense layer, the
    /// CNN baseline shape.
    Cnn {
        channels: (usize, usize),
        kernel: usize,
        repr_width: usize,
    },
}

/// Architecture knobs shared by all wirings.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub encoder: EncoderKind,
    /// Texture-branch representation width.
    pub g_width: usize,
    /// Gray levels for the co-occurrence block.
    pub levels: usize,
    pub direction: Direction,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder: EncoderKind::Mlp { hidden: vec![64, 32] },
            g_width: 16,
            levels: 16,
            direction: Direction::Deg0,
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub recipe: ShiftRecipe,
    pub method: MethodCode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: ArchConfig,
    /// Weight on the texture task loss in mode V.
    pub lambda_loss: f64,
    /// Gradient-reversal scale for methods E and A.
    pub adv_scale: f64,
    /// Ablation switch: force the texture representation to zero.
    pub force_zero_g: bool,
    /// Stop-gradient through the projection matrix.
    pub detach_projection: bool,
}

impl ExperimentConfig {
    pub fn new(recipe: ShiftRecipe, method: MethodCode, seed: u64) -> Self {
        ExperimentConfig {
            recipe,
            method,
            epochs: 20,
            learning_rate: 5e-4,
            batch_size: 64,
            seed,
            arch: ArchConfig::default(),
            lambda_loss: 1.0,
            adv_scale: 1.0,
            force_zero_g: false,
            detach_projection: false,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.recipe.kind {
            ShiftKind::BackgroundCorrelated { classes, .. } => *classes,
            ShiftKind::FourierPattern { .. } | ShiftKind::Rotation { .. } => 7,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(ConfigError::DegenerateTraining);
        }
        if self.method.uses_exact_projection() && self.batch_size <= self.classes() {
            return Err(ConfigError::BatchTooSmall {
                method: self.method,
                batch_size: self.batch_size,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    /// Short human-readable shift descriptor for metric rows.
    pub fn shift_desc(&self) -> String {
        match &self.recipe.kind {
            ShiftKind::BackgroundCorrelated { rho, .. } => format!("rho={rho}"),
            ShiftKind::FourierPattern { strategy, test_kernel, .. } => {
                format!("{strategy:?}/{test_kernel:?}").to_lowercase()
            }
            ShiftKind::Rotation { angles, .. } => format!("rotation x{}", angles.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::SplitFractions;

    fn recipe(rho: f64, classes: usize) -> ShiftRecipe {
        ShiftRecipe {
            kind: ShiftKind::BackgroundCorrelated {
                classes,
                backgrounds: classes,
                rho,
            },
            side: 16,
            total: 200,
            split: SplitFractions::default_shift(),
        }
    }

    #[test]
    fn method_codes_parse_round_trip() {
        for m in MethodCode::ALL {
            let parsed: MethodCode = m.letter().parse().unwrap();
            assert_eq!(parsed, m);
        }
        assert!("Q".parse::<MethodCode>().is_err());
    }

    #[test]
    fn exact_projection_methods_demand_large_batches() {
        let mut cfg = ExperimentConfig::new(recipe(0.5, 7), MethodCode::H, 1);
        cfg.batch_size = 7;
        assert!(matches!(cfg.validate(), Err(ConfigError::BatchTooSmall { .. })));
        cfg.batch_size = 8;
        assert!(cfg.validate().is_ok());
        // The no-projection ablation tolerates small batches.
        let mut cfg = ExperimentConfig::new(recipe(0.5, 7), MethodCode::N, 1);
        cfg.batch_size = 4;
        assert!(cfg.validate().is_ok());
    }
}
