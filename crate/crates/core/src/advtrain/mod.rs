//! Adversarial and virtual adversarial training.
//!
//! Perturbations live either on the embedded words or on the pre-softmax
//! attention scores, are found either from the supervised loss (AT) or from
//! the KL divergence to the model's own clean prediction (VAT), and are
//! parameterized either directly or through normalized pairwise difference
//! vectors (the interpretable `i*` variants).

mod adam;
mod loss;
mod perturb;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::eval::EvalError;
use crate::model::ModelError;

pub use adam::{Adam, AdamConfig};
pub use loss::{adversarial_term, example_rng, total_loss, vat_loss, LossTerms};
pub use perturb::{
    difference_vectors, embedding_directions, perturb, perturb_attention_at, perturb_attention_iat,
    perturb_attention_ivat, perturb_attention_vat, perturb_word_at, perturb_word_iat, perturb_word_ivat,
    perturb_word_vat, DifferenceMatrix, Perturbation, DEGENERATE_NORM,
};
pub use train::{epsilon_search, train, EpochRecord, EpsilonRow, EpsilonSearch, TrainerConfig, TrainingReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        report: Box<TrainingReport>,
    },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Where a perturbation is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// The embedded word sequence, `[T, d]`.
    Word,
    /// The attention scores before the softmax, `[T]`.
    Attention,
}

/// What the perturbation maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Supervised loss at the true label.
    Adversarial,
    /// KL divergence from the clean prediction; needs no label.
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Vanilla,
    WordAt,
    WordIat,
    WordVat,
    WordIvat,
    AttnAt,
    AttnIat,
    AttnVat,
    AttnIvat,
}

impl Technique {
    pub const ALL: [Technique; 9] = [
        Technique::Vanilla,
        Technique::WordAt,
        Technique::WordIat,
        Technique::WordVat,
        Technique::WordIvat,
        Technique::AttnAt,
        Technique::AttnIat,
        Technique::AttnVat,
        Technique::AttnIvat,
    ];

    pub fn space(self) -> Option<Space> {
        use Technique::*;
        match self {
            Vanilla => None,
            WordAt | WordIat | WordVat | WordIvat => Some(Space::Word),
            AttnAt | AttnIat | AttnVat | AttnIvat => Some(Space::Attention),
        }
    }

    pub fn objective(self) -> Option<Objective> {
        use Technique::*;
        match self {
            Vanilla => None,
            WordAt | WordIat | AttnAt | AttnIat => Some(Objective::Adversarial),
            WordVat | WordIvat | AttnVat | AttnIvat => Some(Objective::Virtual),
        }
    }

    /// Difference-vector parameterization.
    pub fn interpretable(self) -> bool {
        use Technique::*;
        matches!(self, WordIat | WordIvat | AttnIat | AttnIvat)
    }

    /// VAT variants, which may consume unlabeled data.
    pub fn is_semi_supervised(self) -> bool {
        self.objective() == Some(Objective::Virtual)
    }

    pub fn name(self) -> &'static str {
        use Technique::*;
        match self {
            Vanilla => "vanilla",
            WordAt => "word_at",
            WordIat => "word_iat",
            WordVat => "word_vat",
            WordIvat => "word_ivat",
            AttnAt => "attn_at",
            AttnIat => "attn_iat",
            AttnVat => "attn_vat",
            AttnIvat => "attn_ivat",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| format!("unknown technique {s:?}"))
    }
}

/// Perturbation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// L2 norm of every returned perturbation.
    pub epsilon: f64,
    /// Norm of the random offset at which the VAT gradient is evaluated.
    pub xi: f64,
    /// Weight of the (virtual) adversarial loss term.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            epsilon: 1.0,
            xi: 0.1,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return Err(format!("xi must be > 0, got {}", self.xi));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}
