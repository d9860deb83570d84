//! Zero-shot classification against class-prompt prototypes.

use crate::embedstore::EmbeddingMatrix;
use crate::error::{IdeaError, Result};
use crate::linalg;

/// Text-prompt prototypes, one unit row per class.
#[derive(Debug, Clone)]
pub struct ZeroShotHead {
    prototypes: EmbeddingMatrix,
    class_names: Vec<String>,
}

impl ZeroShotHead {
    pub fn new(prototypes: EmbeddingMatrix, class_names: Vec<String>) -> Result<Self> {
        if prototypes.rows() != class_names.len() {
            return Err(IdeaError::Shape(format!(
                "{} prototypes for {} class names",
                prototypes.rows(),
                class_names.len()
            )));
        }
        if !prototypes.is_normalized() {
            return Err(IdeaError::Input(
                "prototype matrix must be normalized".into(),
            ));
        }
        Ok(ZeroShotHead {
            prototypes,
            class_names,
        })
    }

    pub fn prototypes(&self) -> &EmbeddingMatrix {
        &self.prototypes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim()
    }

    pub(crate) fn logits_f64(&self, test: &[f32]) -> Vec<f64> {
        self.prototypes
            .iter_rows()
            .map(|row| linalg::dot(row, test))
            .collect()
    }
}

pub(crate) fn check_dim(expected: usize, test: &[f32]) -> Result<()> {
    if test.len() != expected {
        return Err(IdeaError::Shape(format!(
            "test vector has length {}, expected {expected}",
            test.len()
        )));
    }
    Ok(())
}

/// `logits[n] = <prototype_n, test>`.
pub fn zeroshot_logits(head: &ZeroShotHead, test: &[f32]) -> Result<Vec<f32>> {
    check_dim(head.dim(), test)?;
    Ok(head
        .logits_f64(test)
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

/// Argmax over logits; ties go to the lowest class index.
pub fn classify(logits: &[f32]) -> Result<usize> {
    if logits.is_empty() {
        return Err(IdeaError::Shape(
            "cannot classify an empty logit vector".into(),
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(IdeaError::Input("logits contain non-finite values".into()));
    }
    Ok(linalg::argmax(logits).expect("non-empty"))
}
