//! Training-free multimodal cache adapter.
//!
//! For a test feature `x`, a K-shot N-class cache with image rows `I` and
//! caption rows `T`, and prototypes `P`:
//!
//! ```text
//! s       = (1 - alpha) * I·x + alpha * T·x          (length N*K)
//! f(v)    = exp(theta * (v - 1))                      (elementwise)
//! g(v)[i] = sum_j v[i*K + j]                          (class-major rows)
//! logits  = beta * g(f(s)) + P·x
//! ```
//!
//! The activation is applied per cache row *before* the per-class sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingMatrix, FewShotCache};
use crate::error::{IdeaError, Result};
use crate::linalg;
use crate::zeroshot::{check_dim, ZeroShotHead};

/// Fusion weights: `alpha` mixes image vs caption similarity, `beta` scales
/// the few-shot term, `theta` sharpens the activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 0.5,
            beta: 2.75,
            theta: 2.0,
        }
    }
}

impl FusionConfig {
    pub fn new(alpha: f64, beta: f64, theta: f64) -> Result<Self> {
        let config = FusionConfig { alpha, beta, theta };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(IdeaError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        // beta = 0 is allowed: it is the zero-shot ablation point.
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(IdeaError::Config(format!(
                "beta {} must be finite and >= 0",
                self.beta
            )));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(IdeaError::Config(format!(
                "theta {} must be finite and > 0",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Per-row similarities of one test feature against the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPair {
    pub sim_image: Vec<f32>,
    pub sim_text: Vec<f32>,
}

pub(crate) fn check_compatible(cache: &FewShotCache, head: &ZeroShotHead) -> Result<()> {
    if cache.num_classes() != head.num_classes() {
        return Err(IdeaError::Shape(format!(
            "cache has {} classes, head has {}",
            cache.num_classes(),
            head.num_classes()
        )));
    }
    if cache.dim() != head.dim() {
        return Err(IdeaError::Shape(format!(
            "cache dim {} != prototype dim {}",
            cache.dim(),
            head.dim()
        )));
    }
    Ok(())
}

fn row_dots(matrix: &EmbeddingMatrix, test: &[f32]) -> Vec<f64> {
    matrix
        .iter_rows()
        .map(|row| linalg::dot(row, test))
        .collect()
}

pub fn similarities(cache: &FewShotCache, test: &[f32]) -> Result<SimilarityPair> {
    check_dim(cache.dim(), test)?;
    let narrow = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    Ok(SimilarityPair {
        sim_image: narrow(row_dots(cache.images(), test)),
        sim_text: narrow(row_dots(cache.texts(), test)),
    })
}

#[inline]
pub(crate) fn activation(x: f64, theta: f64) -> f64 {
    (theta * (x - 1.0)).exp()
}

/// `exp(theta * (x - 1))`, elementwise.
pub fn activate(x: &[f32], theta: f64) -> Vec<f32> {
    x.iter()
        .map(|&v| activation(f64::from(v), theta) as f32)
        .collect()
}

/// Sums each class's `k` consecutive entries.
pub fn aggregate(x: &[f32], n: usize, k: usize) -> Result<Vec<f32>> {
    if n == 0 || k == 0 || x.len() != n * k {
        return Err(IdeaError::Shape(format!(
            "cannot reshape length {} into {n}x{k}",
            x.len()
        )));
    }
    Ok(x.chunks_exact(k).map(|c| c.iter().sum()).collect())
}

/// Everything the fused logits depend on for one test feature, with the
/// fusion weights left free. Grid search evaluates many configs against one
/// instance; single-shot evaluation goes through the same arithmetic.
#[derive(Debug, Clone)]
pub struct FusionInputs {
    pub(crate) classes: usize,
    pub(crate) shots: usize,
    pub(crate) zero_shot: Vec<f64>,
    pub(crate) sim_image: Vec<f64>,
    /// Caption-side term, already including any projection.
    pub(crate) sim_text: Vec<f64>,
    pub(crate) bias: Option<Vec<f64>>,
}

pub(crate) struct Forward {
    /// `f(s_r)` per cache row.
    pub activations: Vec<f64>,
    pub logits: Vec<f64>,
}

impl FusionInputs {
    pub fn for_idea(cache: &FewShotCache, head: &ZeroShotHead, test: &[f32]) -> Result<Self> {
        check_compatible(cache, head)?;
        check_dim(cache.dim(), test)?;
        Ok(FusionInputs {
            classes: cache.num_classes(),
            shots: cache.shots(),
            zero_shot: head.logits_f64(test),
            sim_image: row_dots(cache.images(), test),
            sim_text: row_dots(cache.texts(), test),
            bias: None,
        })
    }

    pub(crate) fn forward(&self, config: &FusionConfig) -> Forward {
        let mix = 1.0 - config.alpha;
        let activations: Vec<f64> = (0..self.sim_image.len())
            .map(|r| {
                let mut s = mix * self.sim_image[r] + config.alpha * self.sim_text[r];
                if let Some(bias) = &self.bias {
                    s += bias[r];
                }
                activation(s, config.theta)
            })
            .collect();
        let logits = activations
            .chunks_exact(self.shots)
            .zip(&self.zero_shot)
            .map(|(class_rows, &zs)| config.beta * class_rows.iter().sum::<f64>() + zs)
            .collect();
        Forward {
            activations,
            logits,
        }
    }

    pub fn logits(&self, config: &FusionConfig) -> Vec<f32> {
        self.forward(config)
            .logits
            .into_iter()
            .map(|v| v as f32)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }
}

pub fn idea_logits(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    test: &[f32],
    config: &FusionConfig,
) -> Result<Vec<f32>> {
    config.validate()?;
    Ok(FusionInputs::for_idea(cache, head, test)?.logits(config))
}

/// Row `m` of the result is [`idea_logits`] of test row `m`.
pub fn idea_logits_batch(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    tests: &EmbeddingMatrix,
    config: &FusionConfig,
) -> Result<Vec<Vec<f32>>> {
    config.validate()?;
    check_compatible(cache, head)?;
    check_dim(cache.dim(), tests.row(0))?;
    tests
        .iter_rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|row| idea_logits(cache, head, row, config))
        .collect()
}
