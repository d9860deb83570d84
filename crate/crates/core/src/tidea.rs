//! Trainable adapter: a D×D projection on the caption path (with a residual
//! connection) and an NK×D bias table added to the pre-activation scores.
//!
//! ```text
//! s = (1 - alpha) * I·x + alpha * (T·W·x + T·x) + E·x
//! logits = beta * g(f(s)) + P·x
//! ```
//!
//! Both `W` and `E` start at zero, so an untrained state reproduces the
//! training-free logits. Gradients of the mean cross-entropy are computed
//! analytically and applied with plain SGD.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{check_compatible, FusionConfig, FusionInputs};
use crate::embedstore::{self, EmbeddingMatrix, FewShotCache};
use crate::error::{IdeaError, Result};
use crate::harness::accuracy;
use crate::linalg;
use crate::zeroshot::{check_dim, ZeroShotHead};

/// Which trainable parts are plugged in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub proj: bool,
    pub bias: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            proj: true,
            bias: true,
        }
    }
}

impl Components {
    pub const NONE: Components = Components {
        proj: false,
        bias: false,
    };

    pub fn any(&self) -> bool {
        self.proj || self.bias
    }
}

/// Learnable parameters, held in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableState {
    dim: usize,
    cache_rows: usize,
    w_proj: Vec<f64>,
    e_bias: Vec<f64>,
    components: Components,
}

impl TrainableState {
    pub fn zeros(dim: usize, cache_rows: usize, components: Components) -> Self {
        TrainableState {
            dim,
            cache_rows,
            w_proj: vec![0.0; dim * dim],
            e_bias: vec![0.0; cache_rows * dim],
            components,
        }
    }

    pub fn for_cache(cache: &FewShotCache, components: Components) -> Self {
        Self::zeros(cache.dim(), cache.len(), components)
    }

    pub fn from_parts(
        dim: usize,
        cache_rows: usize,
        w_proj: Vec<f64>,
        e_bias: Vec<f64>,
        components: Components,
    ) -> Result<Self> {
        if w_proj.len() != dim * dim || e_bias.len() != cache_rows * dim {
            return Err(IdeaError::Shape(format!(
                "w_proj has {} entries (want {}), e_bias has {} (want {})",
                w_proj.len(),
                dim * dim,
                e_bias.len(),
                cache_rows * dim
            )));
        }
        let state = TrainableState {
            dim,
            cache_rows,
            w_proj,
            e_bias,
            components,
        };
        state.check_finite()?;
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cache_rows(&self) -> usize {
        self.cache_rows
    }

    /// Row-major D×D.
    pub fn w_proj(&self) -> &[f64] {
        &self.w_proj
    }

    /// Row-major NK×D.
    pub fn e_bias(&self) -> &[f64] {
        &self.e_bias
    }

    pub fn w_proj_mut(&mut self) -> &mut [f64] {
        &mut self.w_proj
    }

    pub fn e_bias_mut(&mut self) -> &mut [f64] {
        &mut self.e_bias
    }

    pub fn components(&self) -> Components {
        self.components
    }

    fn check_finite(&self) -> Result<()> {
        if self.w_proj.iter().any(|v| !v.is_finite()) {
            return Err(IdeaError::StateCorruption(
                "w_proj has non-finite entries".into(),
            ));
        }
        if self.e_bias.iter().any(|v| !v.is_finite()) {
            return Err(IdeaError::StateCorruption(
                "e_bias has non-finite entries".into(),
            ));
        }
        Ok(())
    }

    fn check_against(&self, cache: &FewShotCache) -> Result<()> {
        if self.dim != cache.dim() || self.cache_rows != cache.len() {
            return Err(IdeaError::Shape(format!(
                "state is for {}x{} cache, got {}x{}",
                self.cache_rows,
                self.dim,
                cache.len(),
                cache.dim()
            )));
        }
        self.check_finite()
    }
}

impl FusionInputs {
    pub fn for_tidea(
        cache: &FewShotCache,
        head: &ZeroShotHead,
        state: &TrainableState,
        test: &[f32],
    ) -> Result<Self> {
        state.check_against(cache)?;
        tidea_inputs_unchecked(cache, head, state, test)
    }
}

fn tidea_inputs_unchecked(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    state: &TrainableState,
    test: &[f32],
) -> Result<FusionInputs> {
    let mut inputs = FusionInputs::for_idea(cache, head, test)?;
    if state.components.proj {
        let projected = linalg::matvec(&state.w_proj, state.dim, state.dim, test);
        for (r, row) in cache.texts().iter_rows().enumerate() {
            inputs.sim_text[r] += linalg::dot_mixed(row, &projected);
        }
    }
    if state.components.bias {
        inputs.bias = Some(linalg::matvec(
            &state.e_bias,
            state.cache_rows,
            state.dim,
            test,
        ));
    }
    Ok(inputs)
}

pub fn tidea_logits(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    state: &TrainableState,
    test: &[f32],
    config: &FusionConfig,
) -> Result<Vec<f32>> {
    config.validate()?;
    Ok(FusionInputs::for_tidea(cache, head, state, test)?.logits(config))
}

pub fn tidea_logits_batch(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    state: &TrainableState,
    tests: &EmbeddingMatrix,
    config: &FusionConfig,
) -> Result<Vec<Vec<f32>>> {
    config.validate()?;
    check_compatible(cache, head)?;
    state.check_against(cache)?;
    check_dim(cache.dim(), tests.row(0))?;
    tests
        .iter_rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|row| Ok(tidea_inputs_unchecked(cache, head, state, row)?.logits(config)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_proj: Vec<f64>,
    pub e_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(state: &TrainableState) -> Self {
        Gradients {
            w_proj: vec![0.0; state.w_proj.len()],
            e_bias: vec![0.0; state.e_bias.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Gradients,
}

/// Mean cross-entropy of `softmax(tidea_logits)` over the batch, with exact
/// gradients for the enabled components. Disabled components get zero
/// gradient.
pub fn loss_and_grads(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    state: &TrainableState,
    batch: &EmbeddingMatrix,
    labels: &[usize],
    config: &FusionConfig,
) -> Result<LossAndGrads> {
    if batch.rows() != labels.len() {
        return Err(IdeaError::Shape(format!(
            "{} batch rows for {} labels",
            batch.rows(),
            labels.len()
        )));
    }
    let rows: Vec<&[f32]> = batch.iter_rows().collect();
    loss_and_grads_rows(cache, head, state, &rows, labels, config)
}

fn loss_and_grads_rows(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    state: &TrainableState,
    rows: &[&[f32]],
    labels: &[usize],
    config: &FusionConfig,
) -> Result<LossAndGrads> {
    config.validate()?;
    check_compatible(cache, head)?;
    state.check_against(cache)?;
    let n = cache.num_classes();
    let k = cache.shots();
    let dim = cache.dim();
    if rows.is_empty() {
        return Err(IdeaError::Input("empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(IdeaError::Label {
            label,
            num_classes: n,
        });
    }

    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(state);
    // Sum over cache rows of alpha * coeff_r * t_r, per sample.
    let mut text_dir = vec![0.0f64; dim];

    // Sequential over the batch: fixed reduction order.
    for (&x, &y) in rows.iter().zip(labels) {
        check_dim(dim, x)?;
        let inputs = tidea_inputs_unchecked(cache, head, state, x)?;
        let fwd = inputs.forward(config);

        let max = fwd.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = fwd.logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += (log_z - fwd.logits[y]) * scale;

        // d loss / d logit_i
        let dlogits: Vec<f64> = fwd
            .logits
            .iter()
            .enumerate()
            .map(|(i, l)| ((l - log_z).exp() - if i == y { 1.0 } else { 0.0 }) * scale)
            .collect();

        text_dir.iter_mut().for_each(|v| *v = 0.0);
        for (r, &act) in fwd.activations.iter().enumerate() {
            let coeff = dlogits[r / k] * config.beta * config.theta * act;
            if state.components.bias {
                let grad_row = &mut grads.e_bias[r * dim..(r + 1) * dim];
                for (g, &xv) in grad_row.iter_mut().zip(x) {
                    *g += coeff * f64::from(xv);
                }
            }
            if state.components.proj {
                let weight = config.alpha * coeff;
                for (acc, &tv) in text_dir.iter_mut().zip(cache.texts().row(r)) {
                    *acc += weight * f64::from(tv);
                }
            }
        }
        if state.components.proj {
            for (a, grad_row) in text_dir.iter().zip(grads.w_proj.chunks_exact_mut(dim)) {
                for (g, &xv) in grad_row.iter_mut().zip(x) {
                    *g += a * f64::from(xv);
                }
            }
        }
    }
    debug_assert_eq!(n, head.num_classes());

    if !loss.is_finite() {
        return Err(IdeaError::Divergence(format!("loss is {loss}")));
    }
    Ok(LossAndGrads { loss, grads })
}

/// `params -= lr * grads` on the enabled components.
pub fn sgd_step(state: &TrainableState, grads: &Gradients, lr: f64) -> Result<TrainableState> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(IdeaError::Config(format!(
            "step size {lr} must be finite and >= 0"
        )));
    }
    if grads.w_proj.len() != state.w_proj.len() || grads.e_bias.len() != state.e_bias.len() {
        return Err(IdeaError::Shape(
            "gradient shapes do not match state".into(),
        ));
    }
    let mut next = state.clone();
    if state.components.proj {
        for (p, g) in next.w_proj.iter_mut().zip(&grads.w_proj) {
            *p -= lr * g;
        }
    }
    if state.components.bias {
        for (p, g) in next.e_bias.iter_mut().zip(&grads.e_bias) {
            *p -= lr * g;
        }
    }
    next.check_finite()
        .map_err(|e| IdeaError::Divergence(format!("update produced {e}")))?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            epochs: 50,
            batch_size: 256,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is accepted as the frozen/no-learning run.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(IdeaError::Config(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(IdeaError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(IdeaError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(IdeaError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(IdeaError::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Step size at global step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub state: TrainableState,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// A labelled feature split.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSplit<'a> {
    pub features: &'a EmbeddingMatrix,
    pub labels: &'a [usize],
}

impl<'a> LabeledSplit<'a> {
    pub fn new(features: &'a EmbeddingMatrix, labels: &'a [usize]) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(IdeaError::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(LabeledSplit { features, labels })
    }
}

/// Mini-batch SGD from a zero state with per-epoch shuffling and
/// best-validation-epoch selection (ties keep the earlier epoch).
pub fn train(
    cache: &FewShotCache,
    head: &ZeroShotHead,
    train_split: LabeledSplit<'_>,
    val_split: LabeledSplit<'_>,
    fusion: &FusionConfig,
    components: Components,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    fusion.validate()?;
    check_compatible(cache, head)?;
    if train_split.features.rows() != train_split.labels.len() {
        return Err(IdeaError::Shape(
            "train features and labels differ in length".into(),
        ));
    }
    if train_split.labels.is_empty() {
        return Err(IdeaError::Input("empty training set".into()));
    }

    let mut state = TrainableState::for_cache(cache, components);
    if !components.any() {
        return Ok(TrainOutcome {
            state,
            best_epoch: None,
            best_val_accuracy: None,
            history: Vec::new(),
        });
    }

    let m = train_split.labels.len();
    let steps_per_epoch = m.div_ceil(tc.batch_size);
    let total_steps = tc.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut velocity = Gradients::zeros_like(&state);
    let mut step = 0usize;

    let mut best: Option<(usize, f64, TrainableState)> = None;
    let mut history = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| train_split.features.row(i)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_split.labels[i]).collect();
            let LossAndGrads { loss, grads } =
                loss_and_grads_rows(cache, head, &state, &rows, &labels, fusion)?;
            epoch_loss += loss * chunk.len() as f64;

            let direction = if tc.momentum == 0.0 && tc.weight_decay == 0.0 {
                grads
            } else {
                let blend = |v: &mut [f64], g: &[f64], p: &[f64]| {
                    for ((v, g), p) in v.iter_mut().zip(g).zip(p) {
                        *v = tc.momentum * *v + g + tc.weight_decay * p;
                    }
                };
                blend(&mut velocity.w_proj, &grads.w_proj, &state.w_proj);
                blend(&mut velocity.e_bias, &grads.e_bias, &state.e_bias);
                velocity.clone()
            };
            state = sgd_step(&state, &direction, tc.lr_at(step, total_steps))?;
            step += 1;
        }

        let logits = tidea_logits_batch(cache, head, &state, val_split.features, fusion)?;
        let val_accuracy = accuracy(&logits, val_split.labels)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / m as f64,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, state.clone()));
        }
    }

    let (best_epoch, best_acc, best_state) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        state: best_state,
        best_epoch: Some(best_epoch),
        best_val_accuracy: Some(best_acc),
        history,
    })
}

/// JSON sidecar stored next to the checkpoint matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub enable_proj: bool,
    pub enable_bias: bool,
    pub dim: usize,
    pub cache_rows: usize,
}

pub const CHECKPOINT_W_PROJ: &str = "w_proj.emb1";
pub const CHECKPOINT_E_BIAS: &str = "e_bias.emb1";
pub const CHECKPOINT_META: &str = "checkpoint.json";

fn to_matrix(values: &[f64], rows: usize, dim: usize) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(rows, dim, values.iter().map(|&v| v as f32).collect(), false)
}

/// Writes `w_proj.emb1`, `e_bias.emb1` and `checkpoint.json` into `dir`.
/// Parameters are narrowed to f32 on disk.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    state: &TrainableState,
    meta: &CheckpointMeta,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| IdeaError::io(dir, e))?;
    embedstore::save_embeddings(
        &to_matrix(&state.w_proj, state.dim, state.dim)?,
        dir.join(CHECKPOINT_W_PROJ),
    )?;
    embedstore::save_embeddings(
        &to_matrix(&state.e_bias, state.cache_rows, state.dim)?,
        dir.join(CHECKPOINT_E_BIAS),
    )?;
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    embedstore::write_atomic(&dir.join(CHECKPOINT_META), text.as_bytes())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainableState, CheckpointMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join(CHECKPOINT_META);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| IdeaError::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let w = embedstore::load_embeddings(dir.join(CHECKPOINT_W_PROJ))?;
    let e = embedstore::load_embeddings(dir.join(CHECKPOINT_E_BIAS))?;
    if w.rows() != meta.dim
        || w.dim() != meta.dim
        || e.rows() != meta.cache_rows
        || e.dim() != meta.dim
    {
        return Err(IdeaError::Shape(
            "checkpoint matrices disagree with metadata".into(),
        ));
    }
    let widen = |m: &EmbeddingMatrix| m.data().iter().map(|&v| f64::from(v)).collect();
    let state = TrainableState::from_parts(
        meta.dim,
        meta.cache_rows,
        widen(&w),
        widen(&e),
        Components {
            proj: meta.enable_proj,
            bias: meta.enable_bias,
        },
    )?;
    Ok((state, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::idea_logits;
    use crate::embedstore::{assemble_cache, CacheManifest, Modality, RowOrder};

    fn hand_instance() -> (FewShotCache, ZeroShotHead) {
        let manifest = CacheManifest {
            dataset_name: "toy".into(),
            num_classes: 2,
            shots: 1,
            class_names: vec!["a".into(), "b".into()],
            backbone_tag: "toy".into(),
            dim: 2,
            row_order: RowOrder::ClassMajor,
            modality: Modality::Image,
        };
        let images = EmbeddingMatrix::new(2, 2, vec![1., 0., 0., 1.], true).unwrap();
        let texts = EmbeddingMatrix::new(2, 2, vec![0.6, 0.8, 1., 0.], true).unwrap();
        let cache = assemble_cache(&images, &texts, &manifest, &[0, 1]).unwrap();
        let protos = EmbeddingMatrix::new(2, 2, vec![1., 0., 0., 1.], true).unwrap();
        let head = ZeroShotHead::new(protos, vec!["a".into(), "b".into()]).unwrap();
        (cache, head)
    }

    #[test]
    fn zero_state_matches_training_free() {
        let (cache, head) = hand_instance();
        let cfg = FusionConfig::new(0.5, 1.0, 1.0).unwrap();
        for components in [Components::default(), Components::NONE] {
            let state = TrainableState::for_cache(&cache, components);
            let a = tidea_logits(&cache, &head, &state, &[0.6, 0.8], &cfg).unwrap();
            let b = idea_logits(&cache, &head, &[0.6, 0.8], &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identity_projection_doubles_text_term() {
        let (cache, head) = hand_instance();
        let cfg = FusionConfig::new(0.5, 1.0, 1.0).unwrap();
        let state = TrainableState::from_parts(
            2,
            2,
            vec![1., 0., 0., 1.],
            vec![0.0; 4],
            Components::default(),
        )
        .unwrap();
        // Sim_I = [1, 0], Sim_T = [0.6, 1]; s = 0.5*Sim_I + 0.5*2*Sim_T = [1.1, 1.0]
        let out = tidea_logits(&cache, &head, &state, &[1., 0.], &cfg).unwrap();
        let want = [1.0 + 0.1f64.exp(), 1.0];
        for (o, w) in out.iter().zip(want) {
            assert!((f64::from(*o) - w).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_log_n_loss() {
        // Symmetric instance: test equidistant from both classes.
        let (cache, head) = hand_instance();
        let cache = cache
            .with_texts(EmbeddingMatrix::new(2, 2, vec![1., 0., 0., 1.], true).unwrap())
            .unwrap();
        let s = 0.5f32.sqrt();
        let batch = EmbeddingMatrix::new(1, 2, vec![s, s], true).unwrap();
        let state = TrainableState::for_cache(&cache, Components::default());
        let out = loss_and_grads(
            &cache,
            &head,
            &state,
            &batch,
            &[0],
            &FusionConfig::default(),
        )
        .unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn disabled_proj_has_zero_grad() {
        let (cache, head) = hand_instance();
        let state = TrainableState::for_cache(
            &cache,
            Components {
                proj: false,
                bias: true,
            },
        );
        let batch = EmbeddingMatrix::new(1, 2, vec![0.6, 0.8], true).unwrap();
        let out = loss_and_grads(
            &cache,
            &head,
            &state,
            &batch,
            &[1],
            &FusionConfig::default(),
        )
        .unwrap();
        assert!(out.grads.w_proj.iter().all(|&g| g == 0.0));
        assert!(out.grads.e_bias.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn label_out_of_range() {
        let (cache, head) = hand_instance();
        let state = TrainableState::for_cache(&cache, Components::default());
        let batch = EmbeddingMatrix::new(1, 2, vec![0.6, 0.8], true).unwrap();
        let err = loss_and_grads(
            &cache,
            &head,
            &state,
            &batch,
            &[2],
            &FusionConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IdeaError::Label { label: 2, .. }));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let state = TrainableState::zeros(2, 1, Components::default());
        let zero = Gradients::zeros_like(&state);
        assert_eq!(sgd_step(&state, &zero, 0.1).unwrap(), state);

        let grads = Gradients {
            w_proj: vec![1., 0., 0., 1.],
            e_bias: vec![0.0; 2],
        };
        let next = sgd_step(&state, &grads, 0.1).unwrap();
        assert_eq!(next.w_proj(), &[-0.1, 0.0, 0.0, -0.1]);

        let g = Gradients {
            w_proj: vec![0.5, -0.25, 0.125, 1.0],
            e_bias: vec![2.0, -4.0],
        };
        let full = sgd_step(&state, &g, 0.5).unwrap();
        let half = sgd_step(&sgd_step(&state, &g, 0.25).unwrap(), &g, 0.25).unwrap();
        assert_eq!(full, half);
    }

    #[test]
    fn sgd_step_respects_flags_and_divergence() {
        let state = TrainableState::zeros(
            1,
            1,
            Components {
                proj: false,
                bias: true,
            },
        );
        let g = Gradients {
            w_proj: vec![1.0],
            e_bias: vec![1.0],
        };
        let next = sgd_step(&state, &g, 1.0).unwrap();
        assert_eq!(next.w_proj(), &[0.0]);
        assert_eq!(next.e_bias(), &[-1.0]);

        let huge = Gradients {
            w_proj: vec![0.0],
            e_bias: vec![f64::MAX],
        };
        assert!(matches!(
            sgd_step(&next, &huge, 10.0),
            Err(IdeaError::Divergence(_))
        ));
    }

    #[test]
    fn corrupt_state_rejected() {
        assert!(matches!(
            TrainableState::from_parts(1, 1, vec![f64::NAN], vec![0.0], Components::default()),
            Err(IdeaError::StateCorruption(_))
        ));
    }

    #[test]
    fn train_config_validation_and_schedule() {
        let tc = TrainConfig::default();
        assert!(tc.validate().is_ok());
        assert!(TrainConfig {
            epochs: 0,
            ..tc.clone()
        }
        .validate()
        .is_err());
        assert_eq!(tc.lr_at(0, 10), 5e-4);
        assert!(tc.lr_at(9, 10) > 0.0);
        assert!((tc.lr_at(5, 10) - 2.5e-4).abs() < 1e-15);
        let constant = TrainConfig {
            lr_schedule: LrSchedule::Constant,
            ..tc
        };
        assert_eq!(constant.lr_at(7, 10), 5e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainableState::from_parts(
            2,
            3,
            vec![0.5, -0.25, 0.0, 1.0],
            vec![0.125, 0.0, -1.0, 2.0, 0.0, 0.75],
            Components {
                proj: true,
                bias: false,
            },
        )
        .unwrap();
        let meta = CheckpointMeta {
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            epoch: Some(3),
            val_accuracy: Some(0.5),
            enable_proj: true,
            enable_bias: false,
            dim: 2,
            cache_rows: 3,
        };
        save_checkpoint(dir.path(), &state, &meta).unwrap();
        let (back, back_meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, state);
        assert_eq!(back_meta, meta);
    }
}
