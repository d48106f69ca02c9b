//! Episodic few-shot classification over local descriptors.
//!
//! Support descriptors are ranked per class by a contrastive discriminative
//! score (high similarity to their own class, low similarity to the others)
//! and only the top fraction is kept. Query descriptors are then gated by a
//! soft weights map built from their discriminative score and a threshold
//! predicted by a small trainable network; the gated similarities decide the
//! class.
//!
//! Strategy variants (support pooling, class-score aggregation) are
//! registered by name in [`registry`].

pub mod cds;
pub mod descriptor;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod oracle;
pub mod pipeline;
pub mod query;
pub mod registry;
pub mod synth;
pub mod train;

pub use cds::{
    contrastive_scores, inter_similarity, intra_similarity, select_top_k, CdsSelection,
    SupportPool, SupportPooling,
};
pub use descriptor::{
    cosine, mean_descriptorwise, softmax, DescriptorSet, Episode, LabeledQuery, LocalDescriptor,
};
pub use error::{Error, Result};
pub use io::{load_descriptor_file, write_descriptor_file, Checkpoint};
pub use pipeline::Scoring;
pub use query::{
    class_similarity, episode_scores, predict_threshold, query_disc_score, weights_map,
    QueryEvaluation, ScoreRule, ThresholdMlp,
};
pub use synth::{generate_synthetic_pool, SynthParams, SyntheticPool};
pub use train::{
    evaluate, loss_and_gradients, meta_train, sample_episode, EpisodePool, EpisodeShape,
    EvalReport, Split, TrainConfig,
};
