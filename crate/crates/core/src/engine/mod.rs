//! Full model assembly, episodic training and evaluation.

mod ablation;
mod checkpoint;
mod evaluate;
mod metrics;
mod model;
mod train;

pub use ablation::{ablation_grid, run_ablation, AblationResult, AblationRow, AblationTable};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use evaluate::{confidence_interval, evaluate, thread_cap, EvalReport};
pub use metrics::{read_metrics, write_metrics, MetricsRow};
pub use model::{episode_graph, EpisodeGraph, EpisodeInputs, LossComponents, Model, ModelLayout, PredictionResult};
pub use train::{episode_rng, train, TrainState};
