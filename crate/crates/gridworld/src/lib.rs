//! The objects-collection game: grid maps, simultaneous-move dynamics,
//! occlusion-aware local observations, flip noise and wandering agents.

mod error;
pub mod map;
pub mod noise;
pub mod observation;
mod returns;
pub mod trace;
pub mod visibility;
pub mod world;

pub use error::{EnvError, MapError};
pub use map::{AgentKind, Cell, GridMap, Pos, SpawnPoint};
pub use noise::{apply_noise, build_spec, NoiseRegime, NoiseSpec, Ring};
pub use observation::{ObsProfile, Observation};
pub use returns::discounted_return;
pub use trace::{read_trace, TraceRecord, TraceWriter};
pub use visibility::{bresenham, VisibleWindow};
pub use world::{wanderer_policy, Action, AgentEvents, EnvConfig, StepOutcome, World};

pub type Result<T, E = EnvError> = std::result::Result<T, E>;
