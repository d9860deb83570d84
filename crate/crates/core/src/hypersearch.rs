//! Validation grid search over the fusion weights.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{FusionConfig, FusionInputs};
use crate::embedstore::{EmbeddingMatrix, FewShotCache};
use crate::error::{IdeaError, Result};
use crate::tidea::TrainableState;
use crate::zeroshot::{classify, ZeroShotHead};

/// Candidate values per fusion weight. The default is the six-point grid
/// per parameter used for the reference ImageNet sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub thetas: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            alphas: vec![0.0, 0.2, 0.4, 0.5, 0.8, 1.0],
            betas: vec![0.0, 1.0, 2.0, 2.5, 2.75, 3.0],
            thetas: vec![0.5, 1.0, 1.5, 2.0, 3.0, 3.5],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() || self.thetas.is_empty() {
            return Err(IdeaError::Input("grid has an empty axis".into()));
        }
        for &alpha in &self.alphas {
            for &beta in &self.betas {
                for &theta in &self.thetas {
                    FusionConfig { alpha, beta, theta }.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alphas.len() * self.betas.len() * self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product in (alpha, beta, theta) nesting order.
    pub fn configs(&self) -> Vec<FusionConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &alpha in &self.alphas {
            for &beta in &self.betas {
                for &theta in &self.thetas {
                    out.push(FusionConfig { alpha, beta, theta });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub accuracy: f64,
}

impl GridRow {
    pub fn config(&self) -> FusionConfig {
        FusionConfig {
            alpha: self.alpha,
            beta: self.beta,
            theta: self.theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: FusionConfig,
    pub best_accuracy: f64,
    /// Accuracy descending, then (alpha, beta, theta) ascending.
    pub table: Vec<GridRow>,
}

fn lexicographic(a: &FusionConfig, b: &FusionConfig) -> std::cmp::Ordering {
    a.alpha
        .total_cmp(&b.alpha)
        .then(a.beta.total_cmp(&b.beta))
        .then(a.theta.total_cmp(&b.theta))
}

/// Validation features reduced to fusion inputs once, so each grid point
/// costs only the activation and aggregation.
pub struct PreparedValidation {
    inputs: Vec<FusionInputs>,
    labels: Vec<usize>,
}

impl PreparedValidation {
    pub fn new(
        cache: &FewShotCache,
        head: &ZeroShotHead,
        features: &EmbeddingMatrix,
        labels: &[usize],
        state: Option<&TrainableState>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(IdeaError::Shape(format!(
                "{} validation rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(IdeaError::Input("empty validation set".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= cache.num_classes()) {
            return Err(IdeaError::Label {
                label,
                num_classes: cache.num_classes(),
            });
        }
        let inputs = features
            .iter_rows()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|row| match state {
                Some(state) => FusionInputs::for_tidea(cache, head, state, row),
                None => FusionInputs::for_idea(cache, head, row),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedValidation {
            inputs,
            labels: labels.to_vec(),
        })
    }

    pub fn accuracy(&self, config: &FusionConfig) -> Result<f64> {
        let mut correct = 0usize;
        for (inputs, &label) in self.inputs.iter().zip(&self.labels) {
            if classify(&inputs.logits(config))? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.labels.len() as f64)
    }
}

/// Exhaustive search over the Cartesian product of `grid`.
pub fn grid_search(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    val_features: &EmbeddingMatrix,
    val_labels: &[usize],
    grid: &GridSpec,
    state: Option<&TrainableState>,
) -> Result<SearchOutcome> {
    grid.validate()?;
    let prepared = PreparedValidation::new(cache, head, val_features, val_labels, state)?;
    search_prepared(&prepared, grid)
}

pub fn search_prepared(prepared: &PreparedValidation, grid: &GridSpec) -> Result<SearchOutcome> {
    grid.validate()?;
    let mut table = grid
        .configs()
        .par_iter()
        .map(|c| {
            Ok(GridRow {
                alpha: c.alpha,
                beta: c.beta,
                theta: c.theta,
                accuracy: prepared.accuracy(c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    table.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then_with(|| lexicographic(&a.config(), &b.config()))
    });
    let top = table[0];
    Ok(SearchOutcome {
        best: top.config(),
        best_accuracy: top.accuracy,
        table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweptParameter {
    Alpha,
    Beta,
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweptParameter,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub accuracy: f64,
}

/// One-at-a-time sweep: each axis of `grid` is varied while the other two
/// weights stay at `anchor`. Rows keep grid order, alpha block first.
pub fn coordinate_sweep(
    prepared: &PreparedValidation,
    grid: &GridSpec,
    anchor: &FusionConfig,
) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    anchor.validate()?;
    let mut points = Vec::new();
    for &alpha in &grid.alphas {
        points.push((SweptParameter::Alpha, FusionConfig { alpha, ..*anchor }));
    }
    for &beta in &grid.betas {
        points.push((SweptParameter::Beta, FusionConfig { beta, ..*anchor }));
    }
    for &theta in &grid.thetas {
        points.push((SweptParameter::Theta, FusionConfig { theta, ..*anchor }));
    }
    points
        .par_iter()
        .map(|(parameter, c)| {
            Ok(SweepRow {
                parameter: *parameter,
                alpha: c.alpha,
                beta: c.beta,
                theta: c.theta,
                accuracy: prepared.accuracy(c)?,
            })
        })
        .collect()
}

pub fn grid_table_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("alpha,beta,theta,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.alpha, r.beta, r.theta, r.accuracy);
    }
    out
}

pub fn sweep_table_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("parameter,alpha,beta,theta,accuracy\n");
    for r in rows {
        let name = match r.parameter {
            SweptParameter::Alpha => "alpha",
            SweptParameter::Beta => "beta",
            SweptParameter::Theta => "theta",
        };
        let _ = writeln!(
            out,
            "{name},{},{},{},{}",
            r.alpha, r.beta, r.theta, r.accuracy
        );
    }
    out
}
