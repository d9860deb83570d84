//! Shared test fixtures and naive reference implementations.
//!
//! The reference functions work on plain nested `Vec<f64>` copies of the
//! inputs and spell every sum out as explicit loops; they share no code with
//! the library's evaluation path.

#![allow(dead_code)]

use idea_core::embedstore::{
    assemble_cache, CacheManifest, EmbeddingMatrix, FewShotCache, Modality, RowOrder,
};
use idea_core::zeroshot::ZeroShotHead;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

pub fn unit_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..rows).flat_map(|_| unit_vec(rng, dim)).collect();
    EmbeddingMatrix::new(rows, dim, data, true).unwrap()
}

pub fn manifest(n: usize, k: usize, dim: usize) -> CacheManifest {
    CacheManifest {
        dataset_name: "random".into(),
        num_classes: n,
        shots: k,
        class_names: (0..n).map(|i| format!("c{i}")).collect(),
        backbone_tag: "none".into(),
        dim,
        row_order: RowOrder::ClassMajor,
        modality: Modality::Image,
    }
}

pub struct Instance {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub cache: FewShotCache,
    pub head: ZeroShotHead,
    pub test: Vec<f32>,
}

/// Random unit-norm instance with N <= 5, K <= 4, D <= 8.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=5);
    let k = rng.random_range(1..=4);
    let d = rng.random_range(1..=8);
    let images = unit_matrix(rng, n * k, d);
    let texts = unit_matrix(rng, n * k, d);
    let labels: Vec<usize> = (0..n * k).map(|r| r / k).collect();
    let cache = assemble_cache(&images, &texts, &manifest(n, k, d), &labels).unwrap();
    let head = ZeroShotHead::new(
        unit_matrix(rng, n, d),
        (0..n).map(|i| format!("c{i}")).collect(),
    )
    .unwrap();
    let test = unit_vec(rng, d);
    Instance {
        n,
        k,
        d,
        cache,
        head,
        test,
    }
}

pub fn rows64(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Naive fused logits. `w` (D×D) and `e` (NK×D) may be absent.
#[allow(clippy::too_many_arguments)]
pub fn reference_logits(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    protos: &[Vec<f64>],
    w: Option<&[Vec<f64>]>,
    e: Option<&[Vec<f64>]>,
    x: &[f64],
    n: usize,
    k: usize,
    alpha: f64,
    beta: f64,
    theta: f64,
) -> Vec<f64> {
    let d = x.len();
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let mut few = 0.0;
        for j in 0..k {
            let r = i * k + j;
            let mut sim_i = 0.0;
            let mut sim_t = 0.0;
            for c in 0..d {
                sim_i += images[r][c] * x[c];
                sim_t += texts[r][c] * x[c];
            }
            let mut text_term = sim_t;
            if let Some(w) = w {
                // t^T (W x)
                for a in 0..d {
                    let mut wx = 0.0;
                    for b in 0..d {
                        wx += w[a][b] * x[b];
                    }
                    text_term += texts[r][a] * wx;
                }
            }
            let mut s = (1.0 - alpha) * sim_i + alpha * text_term;
            if let Some(e) = e {
                for c in 0..d {
                    s += e[r][c] * x[c];
                }
            }
            few += (theta * (s - 1.0)).exp();
        }
        let mut zs = 0.0;
        for c in 0..d {
            zs += protos[i][c] * x[c];
        }
        logits[i] = beta * few + zs;
    }
    logits
}

/// Mean cross-entropy of softmax(logits) against labels, naively.
pub fn reference_loss(all_logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (logits, &y) in all_logits.iter().zip(labels) {
        let mut z = 0.0;
        for l in logits {
            z += l.exp();
        }
        total += z.ln() - logits[y];
    }
    total / labels.len() as f64
}

pub fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
