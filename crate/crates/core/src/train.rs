//! Episode loop for independent learners, greedy evaluation and metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use da3_gridworld::{
    apply_noise, build_spec, wanderer_policy, Action, AgentKind, EnvConfig, GridMap, NoiseRegime, NoiseSpec,
    ObsProfile, Observation, World,
};
use da3_tensor::{load_checkpoint, save_checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{epsilon_greedy, Learner, LearnerConfig};
use crate::replay::Transition;
use crate::{Algo, CoreError, Model, NetConfig, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    /// Share of all training steps over which epsilon decays linearly.
    pub fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            fraction: 0.2,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64, total: u64) -> f64 {
        let span = (self.fraction * total as f64).max(1.0);
        let frac = (step as f64 / span).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

/// Order in which learners run their gradient updates after each step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOrder {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algo,
    pub env: EnvConfig,
    pub profile: ObsProfile,
    pub noise: NoiseRegime,
    pub net: NetConfig,
    pub learner: LearnerConfig,
    pub epsilon: EpsilonSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub update_order: UpdateOrder,
}

impl TrainConfig {
    pub fn validate(&self, map: &GridMap) -> Result<()> {
        build_spec(self.noise, self.net.size)?;
        self.net.validate()?;
        self.learner.validate()?;
        let n = map.spawn_points().len();
        let channels = self.profile.channels(n);
        if channels != self.net.channels {
            return Err(CoreError::Config(format!(
                "profile {} with {n} agents gives {channels} channels, network expects {}",
                self.profile, self.net.channels
            )));
        }
        if self.net.trunk != self.algo.trunk() || self.net.head != self.algo.head() {
            return Err(CoreError::Config(format!(
                "network layout does not match algorithm {}",
                self.algo
            )));
        }
        if self.epochs == 0 {
            return Err(CoreError::Config("at least one epoch is required".into()));
        }
        if !map.spawn_points().iter().any(|s| s.kind == AgentKind::Learner) {
            return Err(CoreError::Config("map has no learner agents".into()));
        }
        Ok(())
    }
}

/// Independent sub-seeds from the master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const STREAM_ENV: u64 = 1;
pub const STREAM_AGENT: u64 = 2;
pub const STREAM_WANDER: u64 = 3;
pub const STREAM_EVAL_ENV: u64 = 4;
pub const STREAM_EVAL_AGENT: u64 = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    pub reward: f64,
    pub objects: u64,
    pub agent_collisions: u64,
    pub wall_collisions: u64,
}

impl AgentStats {
    fn add(&mut self, o: &AgentStats) {
        self.reward += o.reward;
        self.objects += o.objects;
        self.agent_collisions += o.agent_collisions;
        self.wall_collisions += o.wall_collisions;
    }
}

/// One episode: per-learner rows (agent id, stats) and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub epoch: usize,
    pub agents: Vec<(usize, AgentStats)>,
    pub total: AgentStats,
}

pub const METRICS_HEADER: &str = "epoch,agent,episode_reward,objects,agent_collisions,wall_collisions";

impl EpisodeStats {
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        let mut row = |who: &str, a: &AgentStats| {
            let _ = writeln!(
                s,
                "{},{who},{},{},{},{}",
                self.epoch, a.reward, a.objects, a.agent_collisions, a.wall_collisions
            );
        };
        for (id, a) in &self.agents {
            row(&id.to_string(), a);
        }
        row("total", &self.total);
        s
    }
}

fn noisy_obs<R: Rng + ?Sized>(
    world: &World,
    agent: usize,
    cfg: &TrainConfig,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<Observation> {
    let clean = world.encode_observation(agent, cfg.net.size, cfg.profile)?;
    Ok(apply_noise(&clean, spec, rng)?)
}

fn learner_ids(map: &GridMap) -> Vec<usize> {
    map.spawn_points()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == AgentKind::Learner)
        .map(|(i, _)| i)
        .collect()
}

/// Record of one episode's per-agent outcomes, including where each agent
/// collected objects.
struct EpisodeLog {
    stats: Vec<AgentStats>,
    collections: Vec<Vec<u64>>,
}

impl EpisodeLog {
    fn new(agents: usize, cells: usize) -> Self {
        Self {
            stats: vec![AgentStats::default(); agents],
            collections: vec![vec![0; cells]; agents],
        }
    }

    fn record(&mut self, world: &World, out: &da3_gridworld::StepOutcome) {
        for (i, e) in out.events.iter().enumerate() {
            let s = &mut self.stats[i];
            s.reward += out.rewards[i];
            if e.collected {
                s.objects += 1;
                let idx = world.map().index(world.positions()[i]);
                self.collections[i][idx] += 1;
            }
            s.agent_collisions += u64::from(e.agent_collision);
            s.wall_collisions += u64::from(e.wall_collision);
        }
    }

    fn summary(&self, epoch: usize, learners: &[usize]) -> EpisodeStats {
        let mut total = AgentStats::default();
        let agents = learners
            .iter()
            .map(|&i| {
                total.add(&self.stats[i]);
                (i, self.stats[i])
            })
            .collect();
        EpisodeStats { epoch, agents, total }
    }
}

pub struct TrainOutcome {
    pub learners: Vec<Learner>,
    pub episodes: Vec<EpisodeStats>,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains one independent learner per learner spawn for `cfg.epochs`
/// episodes. Writes `metrics.csv` and `checkpoints/agent<i>.{json,bin}`
/// under `out_dir`. `on_episode` sees every finished episode.
pub fn run_training(
    map: Arc<GridMap>,
    cfg: &TrainConfig,
    out_dir: &Path,
    on_episode: &mut dyn FnMut(&EpisodeStats),
) -> Result<TrainOutcome> {
    cfg.validate(&map)?;
    let spec = build_spec(cfg.noise, cfg.net.size)?;
    let ids = learner_ids(&map);
    let n = map.spawn_points().len();
    let mut learners = ids
        .iter()
        .map(|&i| {
            Learner::new(
                i,
                cfg.net.clone(),
                cfg.algo.target_rule(),
                cfg.learner.clone(),
                derive_seed(cfg.seed, STREAM_AGENT, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut wander_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_WANDER, 0));
    let order: Vec<usize> = match cfg.update_order {
        UpdateOrder::Forward => (0..learners.len()).collect(),
        UpdateOrder::Reverse => (0..learners.len()).rev().collect(),
    };
    let io = |p: &Path, e: std::io::Error| CoreError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let total_steps = (cfg.epochs * cfg.env.horizon) as u64;
    let mut step: u64 = 0;
    let mut episodes = Vec::with_capacity(cfg.epochs);
    let cells = map.width() * map.height();
    for epoch in 0..cfg.epochs {
        let mut world = World::reset(map.clone(), cfg.env, derive_seed(cfg.seed, STREAM_ENV, epoch as u64))?;
        let mut obs: Vec<Observation> = learners
            .iter_mut()
            .map(|l| noisy_obs(&world, l.id(), cfg, &spec, l.rng_mut()))
            .collect::<Result<_>>()?;
        let mut log = EpisodeLog::new(n, cells);
        while !world.is_done() {
            let eps = cfg.epsilon.at(step, total_steps);
            let mut actions = vec![Action::Up; n];
            for (l, o) in learners.iter_mut().zip(&obs) {
                actions[l.id()] = l.select_action(o, eps)?;
            }
            for (i, a) in actions.iter_mut().enumerate() {
                if world.kind(i) == AgentKind::Wanderer {
                    *a = wanderer_policy(&world, i, &mut wander_rng)?;
                }
            }
            let out = world.step(&actions)?;
            log.record(&world, &out);
            for (k, l) in learners.iter_mut().enumerate() {
                let id = l.id();
                let next = noisy_obs(&world, id, cfg, &spec, l.rng_mut())?;
                let prev = std::mem::replace(&mut obs[k], next.clone());
                l.observe(Transition {
                    obs: prev,
                    action: actions[id],
                    reward: out.rewards[id],
                    next_obs: next,
                    done: out.done,
                });
            }
            for &k in &order {
                learners[k].train_step()?;
            }
            step += 1;
        }
        let stats = log.summary(epoch, &ids);
        metrics.push_str(&stats.csv_rows());
        on_episode(&stats);
        episodes.push(stats);
    }
    fs::write(&metrics_path, &metrics).map_err(|e| io(&metrics_path, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io(&ckpt_dir, e))?;
    let checkpoints = learners
        .iter()
        .map(|l| save_checkpoint(l.model().params(), &ckpt_dir, &format!("agent{}", l.id())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TrainOutcome {
        learners,
        episodes,
        metrics_path,
        checkpoints,
    })
}

/// Loads `checkpoints/agent<i>.json` for every learner of `map`.
pub fn load_models(map: &GridMap, net: &NetConfig, run_dir: &Path) -> Result<Vec<(usize, Model)>> {
    learner_ids(map)
        .into_iter()
        .map(|i| {
            let path = run_dir.join("checkpoints").join(format!("agent{i}.json"));
            if !path.exists() {
                return Err(CoreError::Io {
                    path: path.display().to_string(),
                    message: "missing checkpoint".into(),
                });
            }
            let params = load_checkpoint(&path)?;
            Ok((i, Model::from_params(net.clone(), params)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeStats>,
    pub objects: MeanStd,
    pub agent_collisions: MeanStd,
    pub wall_collisions: MeanStd,
    pub width: usize,
    pub height: usize,
    /// Per agent (wanderers included), row-major `height x width` counts of
    /// collections at each cell.
    pub heatmaps: Vec<Vec<u64>>,
}

/// Greedy (epsilon = 0) rollouts of trained models under the configured
/// observation noise.
pub fn evaluate_policy(
    map: Arc<GridMap>,
    cfg: &TrainConfig,
    models: &[(usize, Model)],
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    cfg.validate(&map)?;
    let spec = build_spec(cfg.noise, cfg.net.size)?;
    let ids = learner_ids(&map);
    let have: Vec<usize> = models.iter().map(|(i, _)| *i).collect();
    if have != ids {
        return Err(CoreError::Config(format!(
            "models for agents {have:?}, learners are {ids:?}"
        )));
    }
    let n = map.spawn_points().len();
    let cells = map.width() * map.height();
    let mut rngs: Vec<ChaCha8Rng> = ids
        .iter()
        .map(|&i| ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_EVAL_AGENT, i as u64)))
        .collect();
    let mut wander_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_WANDER, 1));
    let mut heatmaps = vec![vec![0u64; cells]; n];
    let mut out_eps = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut world = World::reset(map.clone(), cfg.env, derive_seed(seed, STREAM_EVAL_ENV, ep as u64))?;
        let mut log = EpisodeLog::new(n, cells);
        while !world.is_done() {
            let mut actions = vec![Action::Up; n];
            for ((i, model), rng) in models.iter().zip(rngs.iter_mut()) {
                let o = noisy_obs(&world, *i, cfg, &spec, rng)?;
                actions[*i] = epsilon_greedy(model, &o, 0.0, cfg.learner.n_tau, rng)?;
            }
            for (i, a) in actions.iter_mut().enumerate() {
                if world.kind(i) == AgentKind::Wanderer {
                    *a = wanderer_policy(&world, i, &mut wander_rng)?;
                }
            }
            let out = world.step(&actions)?;
            log.record(&world, &out);
        }
        for (acc, ep_map) in heatmaps.iter_mut().zip(&log.collections) {
            for (a, c) in acc.iter_mut().zip(ep_map) {
                *a += c;
            }
        }
        out_eps.push(log.summary(ep, &ids));
    }
    let col = |f: fn(&AgentStats) -> u64| -> Vec<f64> { out_eps.iter().map(|e| f(&e.total) as f64).collect() };
    Ok(EvalSummary {
        objects: MeanStd::of(&col(|s| s.objects)),
        agent_collisions: MeanStd::of(&col(|s| s.agent_collisions)),
        wall_collisions: MeanStd::of(&col(|s| s.wall_collisions)),
        episodes: out_eps,
        width: map.width(),
        height: map.height(),
        heatmaps,
    })
}
