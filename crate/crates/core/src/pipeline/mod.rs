//! Orchestration: configuration, datasets, training, inference, evaluation
//! and checkpoint files.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod infer;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use corpus::{make_synth_corpus, CorpusManifest, CorpusSpec};
pub use dataset::{ingest, DatasetHandle, Layout};
pub use infer::{bench_scan, evaluate, evaluate_category, infer_images, InferOptions};
pub use model::Model;
pub use train::{train, TrainOutcome};
