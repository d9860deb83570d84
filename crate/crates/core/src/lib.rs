//! Multimodal cache adapters for few-shot classification on precomputed
//! CLIP-style embeddings.
//!
//! * [`embedstore`]: EMB1 matrices, manifests, class-major few-shot caches.
//! * [`zeroshot`]: prototype logits and argmax classification.
//! * [`adapter`]: the training-free image+caption cache adapter.
//! * [`tidea`]: the trainable variant (projection + bias table) and its SGD loop.
//! * [`hypersearch`]: validation grid search over the fusion weights.
//! * [`harness`]: shot sampling, evaluation, and the experiment runner.
//! * [`synthetic`]: seeded synthetic benchmark data.

pub mod adapter;
pub mod embedstore;
pub mod error;
pub mod harness;
pub mod hypersearch;
mod linalg;
pub mod synthetic;
pub mod tidea;
pub mod zeroshot;

pub use adapter::{
    activate, aggregate, idea_logits, idea_logits_batch, similarities, FusionConfig, FusionInputs,
    SimilarityPair,
};
pub use embedstore::{
    assemble_cache, l2_normalize_rows, load_embeddings, load_manifest, save_embeddings,
    save_manifest, CacheManifest, EmbeddingMatrix, FewShotCache, Modality, RowOrder,
};
pub use error::{IdeaError, Result, Stage, StageExt};
pub use harness::{
    evaluate, load_experiment, run_experiment, sample_shots, AccuracySummary, EvalReport,
    ExperimentConfig, Mode,
};
pub use hypersearch::{coordinate_sweep, grid_search, GridSpec, SearchOutcome};
pub use tidea::{
    loss_and_grads, sgd_step, tidea_logits, tidea_logits_batch, train, Components, Gradients,
    LabeledSplit, TrainConfig, TrainableState,
};
pub use zeroshot::{classify, zeroshot_logits, ZeroShotHead};
