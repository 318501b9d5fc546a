//! Loss terms of mapper training.
//!
//! `total = clip + lambda_l2 * l2 + lambda_id * id + lambda_e * entanglement`

use serde::{Deserialize, Serialize};

use crate::embedding::{clip_distance, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_id: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l2: 0.8,
            lambda_id: 0.1,
            lambda_e: 100.0,
        }
    }
}

impl LossWeights {
    /// The same weights without the entanglement term.
    pub fn baseline(self) -> Self {
        Self {
            lambda_e: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_l2", self.lambda_l2),
            ("lambda_id", self.lambda_id),
            ("lambda_e", self.lambda_e),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub clip: f64,
    pub l2: f64,
    pub id: f64,
    pub entanglement: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn combine(clip: f64, l2: f64, id: f64, entanglement: f64, w: &LossWeights) -> Self {
        Self {
            clip,
            l2,
            id,
            entanglement,
            total: clip + w.lambda_l2 * l2 + w.lambda_id * id + w.lambda_e * entanglement,
        }
    }
}

/// Distance of the edited image to the command text.
pub fn clip_loss(edited: &EmbeddingVector, command: &EmbeddingVector) -> Result<f64> {
    clip_distance(edited, command)
}

/// Mean squared change of each entangled attribute's distance.
pub fn entanglement_loss(
    original: &EmbeddingVector,
    edited: &EmbeddingVector,
    entangled: &[EmbeddingVector],
) -> Result<f64> {
    let before = entangled
        .iter()
        .map(|t| clip_distance(original, t))
        .collect::<Result<Vec<_>>>()?;
    let after = entangled
        .iter()
        .map(|t| clip_distance(edited, t))
        .collect::<Result<Vec<_>>>()?;
    entanglement_from_distances(&before, &after)
}

pub fn entanglement_from_distances(before: &[f64], after: &[f64]) -> Result<f64> {
    if before.is_empty() {
        return Err(Error::Config(
            "entanglement loss needs at least one entangled attribute; train without it instead"
                .into(),
        ));
    }
    if before.len() != after.len() {
        return Err(Error::DimensionMismatch {
            expected: before.len(),
            got: after.len(),
        });
    }
    let n = before.len() as f64;
    Ok(before
        .iter()
        .zip(after)
        .map(|(b, a)| (b - a).powi(2))
        .sum::<f64>()
        / n)
}

/// Squared norm of the latent offset.
pub fn l2_loss(offset: &[f64]) -> f64 {
    offset.iter().map(|v| v * v).sum()
}

/// `1 - cos` between identity embeddings.
pub fn id_loss(original: &[f64], edited: &[f64]) -> f64 {
    let dot: f64 = original.iter().zip(edited).map(|(a, b)| a * b).sum();
    let na: f64 = original.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = edited.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}
