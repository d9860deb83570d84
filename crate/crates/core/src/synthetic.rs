//! Seeded synthetic benchmark: Gaussian class clusters on the unit sphere,
//! with caption features living in a partially rotated copy of the image
//! space and noisy class prototypes.
//!
//! Used for end-to-end checks and demos where real encoder features are not
//! available.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedstore::{
    assemble_cache, save_embeddings, save_manifest, CacheManifest, EmbeddingMatrix, FewShotCache,
    Modality, RowOrder,
};
use crate::error::{IdeaError, Result};
use crate::harness::{sample_shots, write_labels, DatasetFiles};
use crate::zeroshot::ZeroShotHead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Size of the full training pool per class; shots are sampled from it.
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_points: usize,
    /// Per-coordinate std of image features around their class mean.
    pub image_noise: f64,
    /// Per-coordinate std added to caption features.
    pub caption_noise: f64,
    /// 1.0 puts captions in the image space; 0.0 in a signed-permuted copy.
    pub caption_alignment: f64,
    /// Per-coordinate std of prototype features around the class mean.
    pub prototype_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            dim: 32,
            train_per_class: 32,
            val_per_class: 10,
            test_points: 500,
            image_noise: 0.2,
            caption_noise: 0.1,
            caption_alignment: 0.5,
            prototype_noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub manifest: CacheManifest,
    pub head: ZeroShotHead,
    pub train_images: EmbeddingMatrix,
    pub train_captions: EmbeddingMatrix,
    pub train_labels: Vec<usize>,
    pub val: (EmbeddingMatrix, Vec<usize>),
    pub test: (EmbeddingMatrix, Vec<usize>),
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl SyntheticBenchmark {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        let (n, d) = (spec.num_classes, spec.dim);
        if n == 0
            || d == 0
            || spec.train_per_class == 0
            || spec.val_per_class == 0
            || spec.test_points == 0
        {
            return Err(IdeaError::Config("synthetic sizes must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let means: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let g = gaussian(&mut rng, d, 1.0);
                unit(&g).into_iter().map(f64::from).collect()
            })
            .collect();

        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        let signs: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();

        let prototypes: Vec<f32> = means
            .iter()
            .flat_map(|m| unit(&add(m, &gaussian(&mut rng, d, spec.prototype_noise))))
            .collect();

        let draw_image = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
            let v = unit(&add(&means[class], &gaussian(rng, d, spec.image_noise)));
            v.into_iter().map(f64::from).collect()
        };

        let train_len = n * spec.train_per_class;
        let train_labels: Vec<usize> = (0..train_len).map(|i| i % n).collect();
        let mut train_images = Vec::with_capacity(train_len * d);
        let mut train_captions = Vec::with_capacity(train_len * d);
        let a = spec.caption_alignment;
        for &class in &train_labels {
            let img = draw_image(&mut rng, class);
            let noise = gaussian(&mut rng, d, spec.caption_noise);
            let caption: Vec<f64> = (0..d)
                .map(|j| a * img[j] + (1.0 - a) * signs[j] * img[perm[j]] + noise[j])
                .collect();
            train_images.extend(img.iter().map(|&v| v as f32));
            train_captions.extend(unit(&caption));
        }

        let split = |rng: &mut ChaCha8Rng, count: usize| -> Result<(EmbeddingMatrix, Vec<usize>)> {
            let labels: Vec<usize> = (0..count).map(|i| i % n).collect();
            let data: Vec<f32> = labels
                .iter()
                .flat_map(|&c| draw_image(rng, c).into_iter().map(|v| v as f32))
                .collect();
            Ok((EmbeddingMatrix::new(count, d, data, true)?, labels))
        };
        let val = split(&mut rng, n * spec.val_per_class)?;
        let test = split(&mut rng, spec.test_points)?;

        let class_names: Vec<String> = (0..n).map(|i| format!("class_{i:02}")).collect();
        let manifest = CacheManifest {
            dataset_name: format!("synthetic-{}", spec.seed),
            num_classes: n,
            shots: spec.train_per_class,
            class_names: class_names.clone(),
            backbone_tag: format!("synthetic-d{d}"),
            dim: d,
            row_order: RowOrder::ClassMajor,
            modality: Modality::Image,
        };
        Ok(SyntheticBenchmark {
            manifest,
            head: ZeroShotHead::new(EmbeddingMatrix::new(n, d, prototypes, true)?, class_names)?,
            train_images: EmbeddingMatrix::new(train_len, d, train_images, true)?,
            train_captions: EmbeddingMatrix::new(train_len, d, train_captions, true)?,
            train_labels,
            val,
            test,
        })
    }

    /// A `k`-shot cache drawn from the training pool with `seed`.
    pub fn cache(&self, k: usize, seed: u64) -> Result<FewShotCache> {
        let picks = sample_shots(&self.train_labels, k, seed)?;
        let labels: Vec<usize> = picks.iter().map(|&i| self.train_labels[i]).collect();
        assemble_cache(
            &self.train_images.select_rows(&picks)?,
            &self.train_captions.select_rows(&picks)?,
            &CacheManifest {
                shots: k,
                ..self.manifest.clone()
            },
            &labels,
        )
    }

    /// Writes the benchmark in the dataset directory layout.
    pub fn write_dataset(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| IdeaError::io(dir, e))?;
        let files = DatasetFiles::in_dir(dir);
        save_manifest(&self.manifest, &files.manifest)?;
        save_embeddings(self.head.prototypes(), &files.prototypes)?;
        save_embeddings(&self.train_images, &files.train_images)?;
        save_embeddings(&self.train_captions, &files.train_captions)?;
        write_labels(&self.train_labels, &files.train_labels)?;
        save_embeddings(&self.val.0, &files.val_features)?;
        write_labels(&self.val.1, &files.val_labels)?;
        save_embeddings(&self.test.0, &files.test_features)?;
        write_labels(&self.test.1, &files.test_labels)?;
        Ok(())
    }
}
