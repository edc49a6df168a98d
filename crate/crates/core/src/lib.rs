//! Saliency-token transformer Q-networks (plus convolutional baselines)
//! and fully decentralized per-agent training for the objects-collection
//! game.

mod agent;
mod arch;
pub mod attention;
mod error;
pub mod losses;
pub mod model;
pub mod replay;
pub mod train;

pub use agent::{action_values, epsilon_greedy, sample_taus, Learner, LearnerConfig};
pub use arch::{Algo, HeadKind, LoopMode, NetConfig, TargetRule, Trunk};
pub use attention::{extract_heatmap, scaled_dot_attention, AttentionRecord, Reduce};
pub use error::CoreError;
pub use losses::{argmax, dqn_loss, dqn_targets, iqn_loss, iqn_targets};
pub use model::{cosine_embedding, obs_batch, Forward, Model, Pass};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use train::{
    derive_seed, evaluate_policy, load_models, run_training, AgentStats, EpisodeStats, EpsilonSchedule, EvalSummary,
    MeanStd, TrainConfig, TrainOutcome, UpdateOrder, METRICS_HEADER, STREAM_AGENT, STREAM_ENV, STREAM_EVAL_AGENT,
    STREAM_EVAL_ENV, STREAM_WANDER,
};

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
