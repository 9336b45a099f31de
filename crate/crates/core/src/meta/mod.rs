//! Contextual dataset construction, behavior-cloning meta-training and
//! policy filtering.

pub mod dataset;
pub mod filter;
pub mod train;

pub use dataset::{collect_rollouts, contextualize_and_aggregate, ContextRecord, ContextualDataset};
pub use filter::{
    evaluate_candidate, filter_sweep, policy_filter, sample_candidate_contexts, CandidateLoss, CandidateScope,
    FilterConfig, FilterReport, GridSpec, SampleRate, TaskGrids,
};
pub use train::{bc_loss, meta_train, MetaPolicy, MetaTrainConfig, MetaTraining, Preset};
