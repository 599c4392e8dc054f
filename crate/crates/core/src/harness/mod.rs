//! Meta-training and meta-testing loops, span F1, the mode ablation, the
//! gradient suite, checkpoints, metrics export and the CLI.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod pipeline;
pub mod spans;

pub use ablation::{run_ablation, AblationTable, MeanStd};
pub use checkpoint::{checkpoint_hash, checkpoint_text, parse_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{derive_seed, DataSource, Dataset, Mode, RunConfig};
pub use gradsuite::run_grad_suite;
pub use metrics::{GradRecord, MetricsRecord, TrainRecord};
pub use pipeline::{
    choose_alpha, evaluate_cell, evaluate_episodes, initial_model, prepare_episode, score_episode, test_episodes, train,
    training_episode, validation_episodes, EpisodeResult, Model, Trained,
};
pub use spans::{span_f1, spans_from_bio, Prf, Span, SpanCounts};
