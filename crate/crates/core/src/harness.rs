//! Experiment runner: shot sampling, mode dispatch, accuracy, and reports.
//!
//! A dataset is a directory with a fixed layout (see [`DatasetFiles`]), so a
//! new dataset needs no code, only a new directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{idea_logits_batch, FusionConfig};
use crate::embedstore::{
    assemble_cache, load_embeddings, load_manifest, write_atomic, CacheManifest, EmbeddingMatrix,
    FewShotCache,
};
use crate::error::{IdeaError, Result, Stage, StageExt};
use crate::hypersearch::{grid_search, GridSpec};
use crate::tidea::{tidea_logits_batch, train, Components, EpochRecord, LabeledSplit, TrainConfig};
use crate::zeroshot::{classify, zeroshot_logits, ZeroShotHead};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Draws `k` distinct indices per class, uniformly, from a generator seeded
/// with `seed`. Output is class-major with indices ascending within a class.
/// The class count is `max(labels) + 1`.
pub fn sample_shots(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    sample_shots_for_classes(labels, num_classes, k, seed)
}

pub fn sample_shots_for_classes(
    labels: &[usize],
    num_classes: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(IdeaError::Config("shots must be >= 1".into()));
    }
    if num_classes == 0 {
        return Err(IdeaError::Input("no labels to sample from".into()));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(IdeaError::Label { label, num_classes });
        }
        members[label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_classes * k);
    for (class, pool) in members.iter().enumerate() {
        if pool.len() < k {
            return Err(IdeaError::Cardinality {
                class,
                expected: k,
                found: pool.len(),
            });
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub top1_accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `None` for classes without evaluation rows.
    pub per_class_accuracy: Vec<Option<f64>>,
}

pub fn evaluate(logits: &[Vec<f32>], labels: &[usize]) -> Result<AccuracySummary> {
    if logits.len() != labels.len() {
        return Err(IdeaError::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(IdeaError::Shape("no logits to evaluate".into()));
    }
    let mut hits = vec![0usize; n];
    let mut seen = vec![0usize; n];
    for (row, &label) in logits.iter().zip(labels) {
        if row.len() != n {
            return Err(IdeaError::Shape(format!(
                "ragged logits: {} vs {n}",
                row.len()
            )));
        }
        if label >= n {
            return Err(IdeaError::Label {
                label,
                num_classes: n,
            });
        }
        seen[label] += 1;
        if classify(row)? == label {
            hits[label] += 1;
        }
    }
    let correct = hits.iter().sum();
    Ok(AccuracySummary {
        top1_accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        per_class_accuracy: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
    })
}

pub(crate) fn accuracy(logits: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    Ok(evaluate(logits, labels)?.top1_accuracy)
}

/// Label files hold one class index per line.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| IdeaError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| {
                IdeaError::Input(format!("{}:{}: bad label {l:?}", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        let _ = writeln!(text, "{l}");
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// File layout of one dataset directory. Row `i` of `train_captions` is the
/// caption feature of row `i` of `train_images`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub manifest: PathBuf,
    pub prototypes: PathBuf,
    pub train_images: PathBuf,
    pub train_captions: PathBuf,
    pub train_labels: PathBuf,
    pub val_features: PathBuf,
    pub val_labels: PathBuf,
    pub test_features: PathBuf,
    pub test_labels: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        DatasetFiles {
            manifest: dir.join("manifest.json"),
            prototypes: dir.join("prototypes.emb1"),
            train_images: dir.join("train_images.emb1"),
            train_captions: dir.join("train_captions.emb1"),
            train_labels: dir.join("train_labels.txt"),
            val_features: dir.join("val_features.emb1"),
            val_labels: dir.join("val_labels.txt"),
            test_features: dir.join("test_features.emb1"),
            test_labels: dir.join("test_labels.txt"),
        }
    }
}

fn load_split(features: &Path, labels: &Path, dim: usize) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    let m = load_embeddings(features)?;
    let l = read_labels(labels)?;
    if m.rows() != l.len() {
        return Err(IdeaError::Shape(format!(
            "{} has {} rows but {} has {} labels",
            features.display(),
            m.rows(),
            labels.display(),
            l.len()
        )));
    }
    if m.dim() != dim {
        return Err(IdeaError::Shape(format!(
            "{} has dim {}, manifest says {dim}",
            features.display(),
            m.dim()
        )));
    }
    let m = if m.is_normalized() {
        m
    } else {
        crate::embedstore::l2_normalize_rows(&m)?
    };
    Ok((m, l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Zeroshot,
    Idea,
    Tidea,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchOrder {
    /// Pick fusion weights on the training-free model, then train with them.
    #[default]
    BeforeTrain,
    /// Train with the configured weights, then search with the trained state.
    AfterTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub order: SearchOrder,
}

/// JSON experiment description. Relative paths resolve against the config
/// file's directory when loaded with [`ExperimentConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub shots: usize,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub components: Components,
    #[serde(default)]
    pub search: Option<SearchSettings>,
    /// Shot-sampling seed; independent from the training seed.
    pub seed: u64,
    pub dataset: PathBuf,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(IdeaError::Config("shots must be >= 1".into()));
        }
        self.fusion.validate()?;
        if self.mode == Mode::Tidea && self.train.is_none() {
            return Err(IdeaError::Config(
                "mode tidea requires a train section".into(),
            ));
        }
        if let Some(train) = &self.train {
            train.validate()?;
        }
        if let Some(search) = &self.search {
            search.grid.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IdeaError::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if config.dataset.is_relative() {
            config.dataset = base.join(&config.dataset);
        }
        if let Some(out) = config.output.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    #[serde(flatten)]
    pub accuracy: AccuracySummary,
    /// Fusion weights actually used on the test split.
    pub fusion: FusionConfig,
    pub search_best_val_accuracy: Option<f64>,
    pub training: Option<TrainingSummary>,
    pub dataset_name: String,
    pub backbone_tag: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub timing: Timing,
}

impl EvalReport {
    /// Pretty JSON with keys sorted at every level.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }

    /// Creates missing parent directories.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| IdeaError::io(parent, e))?;
        }
        write_atomic(path, self.to_canonical_json()?.as_bytes())
    }
}

/// Everything a run produces beyond the report; handy for checkpointing.
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub state: Option<crate::tidea::TrainableState>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    let output = run_experiment_full(config)?;
    if let Some(path) = &config.output {
        output.report.write(path).at(Stage::Report)?;
    }
    Ok(output.report)
}

/// Everything an experiment reads from its dataset directory, with the
/// few-shot cache already sampled and assembled.
pub struct LoadedExperiment {
    pub manifest: CacheManifest,
    pub head: ZeroShotHead,
    pub cache: FewShotCache,
    pub val: (EmbeddingMatrix, Vec<usize>),
    pub test: (EmbeddingMatrix, Vec<usize>),
}

/// Loads the dataset and assembles the `config.shots`-shot cache.
pub fn load_experiment(config: &ExperimentConfig) -> Result<LoadedExperiment> {
    config.validate().at(Stage::Config)?;
    let files = DatasetFiles::in_dir(&config.dataset);
    let manifest = load_manifest(&files.manifest).at(Stage::Load)?;
    let head = load_head(&files, &manifest).at(Stage::Load)?;
    let test =
        load_split(&files.test_features, &files.test_labels, manifest.dim).at(Stage::Load)?;
    let cache = load_cache(&files, &manifest, config)?;
    let val = load_split(&files.val_features, &files.val_labels, manifest.dim).at(Stage::Load)?;
    Ok(LoadedExperiment {
        manifest,
        head,
        cache,
        val,
        test,
    })
}

fn load_cache(
    files: &DatasetFiles,
    manifest: &CacheManifest,
    config: &ExperimentConfig,
) -> Result<FewShotCache> {
    let train_x = load_embeddings(&files.train_images).at(Stage::Load)?;
    let train_t = load_embeddings(&files.train_captions).at(Stage::Load)?;
    let train_y = read_labels(&files.train_labels).at(Stage::Load)?;
    let picks = sample_shots_for_classes(&train_y, manifest.num_classes, config.shots, config.seed)
        .at(Stage::Sample)?;
    let cache_labels: Vec<usize> = picks.iter().map(|&i| train_y[i]).collect();
    (|| {
        assemble_cache(
            &train_x.select_rows(&picks)?,
            &train_t.select_rows(&picks)?,
            &CacheManifest {
                shots: config.shots,
                ..manifest.clone()
            },
            &cache_labels,
        )
    })()
    .at(Stage::Assemble)
}

/// Runs an experiment without writing the report file.
pub fn run_experiment_full(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let started = Instant::now();
    config.validate().at(Stage::Config)?;
    let files = DatasetFiles::in_dir(&config.dataset);

    let manifest = load_manifest(&files.manifest).at(Stage::Load)?;
    let head = load_head(&files, &manifest).at(Stage::Load)?;
    let (test_x, test_y) =
        load_split(&files.test_features, &files.test_labels, manifest.dim).at(Stage::Load)?;

    let mut fusion = config.fusion;
    let mut search_best = None;
    let mut training = None;
    let mut state = None;

    let logits = match config.mode {
        Mode::Zeroshot => test_x
            .iter_rows()
            .map(|row| zeroshot_logits(&head, row))
            .collect::<Result<Vec<_>>>()
            .at(Stage::Evaluate)?,
        Mode::Idea | Mode::Tidea => {
            let cache = load_cache(&files, &manifest, config)?;
            let (val_x, val_y) =
                load_split(&files.val_features, &files.val_labels, manifest.dim).at(Stage::Load)?;

            let search_order = config.search.as_ref().map(|s| s.order);
            if let Some(settings) = config
                .search
                .as_ref()
                .filter(|s| config.mode == Mode::Idea || s.order == SearchOrder::BeforeTrain)
            {
                let outcome = grid_search(&cache, &head, &val_x, &val_y, &settings.grid, None)
                    .at(Stage::Search)?;
                fusion = outcome.best;
                search_best = Some(outcome.best_accuracy);
            }

            if config.mode == Mode::Tidea {
                let tc = config.train.as_ref().expect("validated");
                let outcome = train(
                    &cache,
                    &head,
                    LabeledSplit::new(cache.images(), cache.labels()).at(Stage::Train)?,
                    LabeledSplit::new(&val_x, &val_y).at(Stage::Train)?,
                    &fusion,
                    config.components,
                    tc,
                )
                .at(Stage::Train)?;
                if search_order == Some(SearchOrder::AfterTrain) {
                    let settings = config.search.as_ref().expect("order implies search");
                    let found = grid_search(
                        &cache,
                        &head,
                        &val_x,
                        &val_y,
                        &settings.grid,
                        Some(&outcome.state),
                    )
                    .at(Stage::Search)?;
                    fusion = found.best;
                    search_best = Some(found.best_accuracy);
                }
                training = Some(TrainingSummary {
                    best_epoch: outcome.best_epoch,
                    best_val_accuracy: outcome.best_val_accuracy,
                    history: outcome.history,
                });
                let logits = tidea_logits_batch(&cache, &head, &outcome.state, &test_x, &fusion)
                    .at(Stage::Evaluate)?;
                state = Some(outcome.state);
                logits
            } else {
                idea_logits_batch(&cache, &head, &test_x, &fusion).at(Stage::Evaluate)?
            }
        }
    };

    let accuracy = evaluate(&logits, &test_y).at(Stage::Evaluate)?;
    let report = EvalReport {
        mode: config.mode,
        accuracy,
        fusion,
        search_best_val_accuracy: search_best,
        training,
        dataset_name: manifest.dataset_name.clone(),
        backbone_tag: manifest.backbone_tag.clone(),
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        timing: Timing {
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    };
    Ok(ExperimentOutput { report, state })
}

fn load_head(files: &DatasetFiles, manifest: &CacheManifest) -> Result<ZeroShotHead> {
    let protos = load_embeddings(&files.prototypes)?;
    if protos.dim() != manifest.dim {
        return Err(IdeaError::Shape(format!(
            "prototype dim {} != manifest dim {}",
            protos.dim(),
            manifest.dim
        )));
    }
    let protos = if protos.is_normalized() {
        protos
    } else {
        crate::embedstore::l2_normalize_rows(&protos)?
    };
    ZeroShotHead::new(protos, manifest.class_names.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub proj: bool,
    pub bias: bool,
    pub top1_accuracy: f64,
}

/// Runs T-IDEA once per subset of the `listed` components (four runs when
/// both are listed), in the order off/off, bias, proj, both.
pub fn run_ablation(config: &ExperimentConfig, listed: Components) -> Result<Vec<AblationRow>> {
    let mut subsets = vec![Components::NONE];
    if listed.bias {
        subsets.push(Components {
            proj: false,
            bias: true,
        });
    }
    if listed.proj {
        subsets.push(Components {
            proj: true,
            bias: false,
        });
    }
    if listed.proj && listed.bias {
        subsets.push(Components::default());
    }
    let base = ExperimentConfig {
        mode: Mode::Tidea,
        train: Some(config.train.clone().unwrap_or_default()),
        output: None,
        ..config.clone()
    };
    subsets
        .into_iter()
        .map(|components| {
            let run = ExperimentConfig {
                components,
                ..base.clone()
            };
            Ok(AblationRow {
                proj: components.proj,
                bias: components.bias,
                top1_accuracy: run_experiment(&run)?.accuracy.top1_accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotPoint {
    pub shots: usize,
    /// `None` marks the mean over seeds.
    pub seed: Option<u64>,
    pub top1_accuracy: f64,
}

/// Accuracy per (shots, seed) plus a mean-over-seeds row for each shot count.
pub fn run_shot_curve(
    config: &ExperimentConfig,
    shots: &[usize],
    seeds: &[u64],
) -> Result<Vec<ShotPoint>> {
    if shots.is_empty() || seeds.is_empty() {
        return Err(IdeaError::Input(
            "shot list and seed list must be non-empty".into(),
        ));
    }
    let mut points = Vec::new();
    for &k in shots {
        let mut sum = 0.0;
        for &seed in seeds {
            let run = ExperimentConfig {
                shots: k,
                seed,
                output: None,
                ..config.clone()
            };
            let acc = run_experiment(&run)?.accuracy.top1_accuracy;
            sum += acc;
            points.push(ShotPoint {
                shots: k,
                seed: Some(seed),
                top1_accuracy: acc,
            });
        }
        points.push(ShotPoint {
            shots: k,
            seed: None,
            top1_accuracy: sum / seeds.len() as f64,
        });
    }
    Ok(points)
}

pub fn shot_curve_csv(points: &[ShotPoint]) -> String {
    let mut out = String::from("shots,seed,top1_accuracy\n");
    for p in points {
        let seed = p.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        let _ = writeln!(out, "{},{seed},{}", p.shots, p.top1_accuracy);
    }
    out
}
