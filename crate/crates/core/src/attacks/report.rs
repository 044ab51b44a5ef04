//! JSON attack report shared by the CLI and the test suites.

use serde::{Deserialize, Serialize};

use super::RepeatOutcome;
use crate::analysis::AccuracyCurve;

/// Serialized outcome of one attack evaluation. Field order is fixed by the
/// struct definitions, so identical runs serialize byte-identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackReport {
    NoiseCurve {
        family: String,
        model: String,
        dataset: String,
        seed: u64,
        images: usize,
        eps_grid: Vec<f64>,
        accuracy: Vec<f64>,
    },
    TransferFgsm {
        substitute: String,
        model: String,
        dataset: String,
        seed: u64,
        images: usize,
        eps_grid: Vec<f64>,
        accuracy: Vec<f64>,
    },
    Boundary {
        model: String,
        dataset: String,
        seed: u64,
        images: usize,
        steps: usize,
        repeats: usize,
        per_repeat_scores: Vec<f64>,
        /// Mean of the per-repeat median scores.
        score: f64,
        init_failures: Vec<usize>,
        already_misclassified: Vec<usize>,
        per_repeat: Vec<RepeatOutcome>,
    },
}

impl AttackReport {
    pub fn noise(
        family: &str,
        model: &str,
        dataset: &str,
        seed: u64,
        images: usize,
        curve: &AccuracyCurve,
    ) -> Self {
        AttackReport::NoiseCurve {
            family: family.to_string(),
            model: model.to_string(),
            dataset: dataset.to_string(),
            seed,
            images,
            eps_grid: curve.eps.clone(),
            accuracy: curve.acc.clone(),
        }
    }

    pub fn transfer(
        substitute: &str,
        model: &str,
        dataset: &str,
        seed: u64,
        images: usize,
        curve: &AccuracyCurve,
    ) -> Self {
        AttackReport::TransferFgsm {
            substitute: substitute.to_string(),
            model: model.to_string(),
            dataset: dataset.to_string(),
            seed,
            images,
            eps_grid: curve.eps.clone(),
            accuracy: curve.acc.clone(),
        }
    }

    /// Accuracy curve of this report, when it has one.
    pub fn curve(&self) -> Option<AccuracyCurve> {
        match self {
            AttackReport::NoiseCurve { eps_grid, accuracy, .. }
            | AttackReport::TransferFgsm { eps_grid, accuracy, .. } => {
                Some(AccuracyCurve { eps: eps_grid.clone(), acc: accuracy.clone() })
            }
            AttackReport::Boundary { .. } => None,
        }
    }
}
