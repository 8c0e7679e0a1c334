//! Ethics classifiers: bucketing for an external text scorer, and a
//! multilayer perceptron over concatenated text and image embeddings.

mod embedding;
mod mlp;
mod scorer;
mod train;

pub use embedding::{EmbeddingSet, EmbeddingVector};
pub use mlp::{softmax, Gradients, Layer, MlpModel, DEFAULT_HIDDEN, OUTPUTS};
pub use scorer::{
    bucket_agreement, bucket_score, score_histogram, scorer_input, text_score, BucketingConfig,
    FileScorer, HistogramBin, ScoreProvider, StubScorer,
};
pub use train::{
    build_dataset, evaluate, split_indices, train, Evaluation, LabeledExample, TrainConfig,
    TrainMetrics,
};
