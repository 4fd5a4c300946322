//! File formats: datasets, checkpoints, run configuration and reports.

mod checkpoint;
mod config;
mod datasets;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMetadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{config_hash, DataPaths, PlanConfig, RunConfig};
pub use datasets::{
    load_corpus, load_labels, load_matrix, load_pair_dataset, load_sentences, load_triplet_dataset, output_path,
    write_corpus, write_labels, write_matrix, write_pair_dataset, write_sentences, write_triplet_dataset,
};
