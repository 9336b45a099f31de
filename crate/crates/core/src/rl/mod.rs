//! Policy-gradient training: PPO experts, their imitation warm start and the
//! multi-task baseline.

pub mod baseline;
pub mod expert;
pub mod ppo;
pub mod returns;

pub use baseline::{aggregate_curves, curve_csv, train_multitask_baseline, BaselineConfig, BaselineRun, CurveRow};
pub use expert::{bootstrap_expert, checked_reference, train_expert, Bootstrap, ExpertConfig, ExpertMetadata, ExpertPolicy};
pub use ppo::{clipped_objective, CurvePoint, PpoConfig, PpoDiagnostics, PpoLearner, RolloutBatch, TaskSource};
pub use returns::{discounted_return, gae};
