//! Experiment configuration: defaults, config documents and flag overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use da3_core::{Algo, EpsilonSchedule, LearnerConfig, NetConfig, TrainConfig, UpdateOrder};
use da3_gridworld::{build_spec, EnvConfig, GridMap, NoiseRegime, ObsProfile};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "DA3_OUTPUT_ROOT";

/// A fully resolved experiment. Serialized verbatim as a run's
/// `metadata.toml`, which is itself a valid config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in map name or path to a map file.
    pub map: String,
    pub algo: Algo,
    pub noise: NoiseRegime,
    /// Observation window side `R`.
    pub size: usize,
    pub profile: ObsProfile,
    /// Number of wandering agents, taken from the highest spawn indices.
    pub wanderers: usize,
    pub objects: usize,
    pub horizon: usize,
    pub reward_collect: f64,
    pub reward_collision: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Token width `C` of the transformer trunk.
    pub width: usize,
    pub heads: usize,
    pub loops: usize,
    pub eval_episodes: usize,
    /// Run directory name under the output root.
    pub name: Option<String>,
    pub learner: LearnerConfig,
    pub epsilon: EpsilonSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        Self {
            map: "three-rooms".into(),
            algo: Algo::Da3Dqn,
            noise: NoiseRegime::Noiseless,
            size: 7,
            profile: ObsProfile::Exp1,
            wanderers: 0,
            objects: env.objects,
            horizon: env.horizon,
            reward_collect: env.reward_collect,
            reward_collision: env.reward_collision,
            epochs: 5000,
            seed: 0,
            width: 64,
            heads: 4,
            loops: 1,
            eval_episodes: 1000,
            name: None,
            learner: LearnerConfig::default(),
            epsilon: EpsilonSchedule::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load_map(&self) -> Result<GridMap> {
        let map = if Path::new(&self.map).is_file() {
            let text = std::fs::read_to_string(&self.map).map_err(|e| CliError::io(&self.map, e))?;
            GridMap::parse(&text)?
        } else {
            GridMap::builtin(&self.map)?
        };
        let n = map.spawn_points().len();
        if self.wanderers >= n {
            return Err(CliError::Usage(format!(
                "{} wanderers leave no learner among {n} agents",
                self.wanderers
            )));
        }
        let wanderers: Vec<usize> = (n - self.wanderers..n).collect();
        Ok(map.with_wanderers(&wanderers)?)
    }

    /// Spawn indices of the wandering agents.
    pub fn wanderer_ids(&self, map: &GridMap) -> Vec<usize> {
        let n = map.spawn_points().len();
        (n - self.wanderers..n).collect()
    }

    pub fn train_config(&self, map: &GridMap) -> Result<TrainConfig> {
        let channels = self.profile.channels(map.spawn_points().len());
        let mut net = NetConfig::for_algo(self.algo, channels, self.size).with_width(self.width, self.heads);
        net.loops = self.loops;
        let cfg = TrainConfig {
            algo: self.algo,
            env: EnvConfig {
                objects: self.objects,
                horizon: self.horizon,
                reward_collect: self.reward_collect,
                reward_collision: self.reward_collision,
            },
            profile: self.profile,
            noise: self.noise,
            net,
            learner: self.learner.clone(),
            epsilon: self.epsilon.clone(),
            epochs: self.epochs,
            seed: self.seed,
            update_order: UpdateOrder::Forward,
        };
        cfg.validate(map)?;
        Ok(cfg)
    }

    /// Map and training configuration, both validated.
    pub fn prepare(&self) -> Result<(Arc<GridMap>, TrainConfig)> {
        let map = self.load_map()?;
        let cfg = self.train_config(&map)?;
        Ok((Arc::new(map), cfg))
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let map = Path::new(&self.map)
                .file_stem()
                .map_or_else(|| self.map.clone(), |s| s.to_string_lossy().into_owned());
            format!(
                "{map}-{}-{}-r{}-{}-s{}",
                self.algo, self.noise, self.size, self.profile, self.seed
            )
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Output root: the explicit flag, else `$DA3_OUTPUT_ROOT`, else `runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a config document. A `[derived]` table (written into run
/// metadata) is accepted and ignored.
pub fn parse_document(text: &str) -> Result<Table> {
    let mut t: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
    t.remove("derived");
    Ok(t)
}

/// Layers `flags` over `document` over the defaults and validates the
/// result.
pub fn resolve_config(document: Option<Table>, flags: Table) -> Result<ExperimentConfig> {
    let mut given = document.unwrap_or_default();
    merge(&mut given, flags);
    let explicit_wanderers = given.get("wanderers").cloned();
    let explicit_map = given.get("map").cloned();
    let mut all = Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
    merge(&mut all, given);
    let mut cfg: ExperimentConfig = Value::Table(all)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(e.message().to_string()))?;
    if cfg.profile == ObsProfile::Exp2 {
        match explicit_map {
            None => cfg.map = "simple".into(),
            Some(_) if cfg.map == "simple" => {}
            Some(_) => {
                return Err(CliError::Usage(format!(
                    "profile exp2 runs on the simple map, not `{}`",
                    cfg.map
                )))
            }
        }
        match explicit_wanderers.and_then(|v| v.as_integer()) {
            None | Some(2) => cfg.wanderers = 2,
            Some(k) => {
                return Err(CliError::Usage(format!(
                    "profile exp2 uses wanderers at spawns 4 and 5, got a count of {k}"
                )))
            }
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if i64::try_from(cfg.seed).is_err() {
        return Err(CliError::Usage(format!(
            "seed {} does not fit a signed 64-bit integer",
            cfg.seed
        )));
    }
    build_spec(cfg.noise, cfg.size).map_err(|e| {
        let need = cfg
            .noise
            .required_size()
            .map_or(String::new(), |r| format!(" (needs --R {r})"));
        CliError::Usage(format!("{e}{need}"))
    })?;
    cfg.prepare().map_err(|e| match e {
        CliError::Core(c) => CliError::Usage(c.to_string()),
        other => other,
    })?;
    Ok(())
}

/// The Exp.1 arm matrix: every noise regime with every algorithm, sharing
/// `base`'s remaining settings. Large-marginal arms use `R = 9`.
pub fn exp1_arms(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut arms = Vec::new();
    for noise in NoiseRegime::ALL {
        for algo in Algo::ALL {
            let mut c = base.clone();
            c.noise = noise;
            c.algo = algo;
            c.size = noise.required_size().unwrap_or(base.size);
            c.profile = ObsProfile::Exp1;
            c.name = None;
            arms.push(c);
        }
    }
    arms
}

/// The Exp.2 arm: simple map, four learners and wanderers at spawns 4 and 5.
pub fn exp2_arm(base: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        map: "simple".into(),
        profile: ObsProfile::Exp2,
        wanderers: 2,
        name: None,
        ..base.clone()
    }
}

/// One-learner 5x5 configuration that trains in seconds.
pub fn smoke_config() -> ExperimentConfig {
    ExperimentConfig {
        map: "tiny5".into(),
        objects: 3,
        horizon: 20,
        epochs: 3,
        width: 16,
        heads: 2,
        size: 5,
        eval_episodes: 5,
        ..ExperimentConfig::default()
    }
}

/// Desk-scale comparison arm: 12x12 single room, two learners, ten
/// objects, 600 episodes, one update per four environment steps.
pub fn reduced_arm(algo: Algo, noise: NoiseRegime, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        map: "arena12".into(),
        algo,
        noise,
        size: noise.required_size().unwrap_or(7),
        objects: 10,
        epochs: 600,
        seed,
        eval_episodes: 100,
        learner: LearnerConfig {
            train_every: 4,
            ..LearnerConfig::default()
        },
        ..ExperimentConfig::default()
    }
}
