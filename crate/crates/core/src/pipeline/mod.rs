//! Everything around the models: synthetic data, configuration, training,
//! extraction, backend persistence and the gradient-check suite.
//!
//! Training and extraction parallelize over segments and utterances with
//! rayon. Reductions happen in a fixed order, so artifacts are identical for
//! any thread count; the reproducibility guarantee is stated for a single
//! worker (`SPKVER_THREADS=1` on the command line).

mod archive;
mod backend_io;
mod checkpoint;
mod config;
mod data;
mod extract;
mod gradsuite;
mod synth;
mod train;

pub use archive::{round_f32, Archive, ArchiveTensor, DType, MAGIC, VERSION};
pub use backend_io::{score_trials, train_backend, Scorer};
pub use checkpoint::Checkpoint;
pub use config::{BackendConfig, BackendKind, ExperimentConfig, ModelConfig, PathsConfig, TrainConfig};
pub use data::{features_from_wav_list, round_features, sample_segment, sample_slice, segment_frames, EmbeddingItem, EmbeddingSet, FeatureSet, Utterance};
pub use extract::{cosine_eer, extract_embeddings, write_skip_manifest, SkippedUtterance};
pub use gradsuite::{gradient_suite, GradCase, GradSuiteOptions};
pub use synth::{generate_synthetic_corpus, speaker_name, SyntheticCorpusSpec};
pub use train::{train_extractor, EpochLog, TrainOutcome};
