//! Authoritative world state and the simultaneous-move step rule.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::observation::{encode, ObsProfile, Observation};
use crate::visibility::VisibleWindow;
use crate::{AgentKind, Cell, EnvError, GridMap, Pos, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Right,
    Left,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Right, Action::Left];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Grid displacement; `y` grows downward.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Right => (1, 0),
            Action::Left => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub objects: usize,
    pub horizon: usize,
    pub reward_collect: f64,
    pub reward_collision: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            objects: 25,
            horizon: 200,
            reward_collect: 1.0,
            reward_collision: -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEvents {
    pub collected: bool,
    pub agent_collision: bool,
    pub wall_collision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    pub events: Vec<AgentEvents>,
    /// Order in which agent moves were applied.
    pub order: Vec<usize>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    map: Arc<GridMap>,
    config: EnvConfig,
    kinds: Vec<AgentKind>,
    positions: Vec<Pos>,
    objects: Vec<bool>,
    object_count: usize,
    t: usize,
    rng: ChaCha8Rng,
}

impl World {
    /// Places agents on a random permutation of their spawn points (learner
    /// spawns among learners, wanderer spawns among wanderers) and scatters
    /// the configured number of objects on free object-area cells.
    pub fn reset(map: Arc<GridMap>, config: EnvConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spawns = map.spawn_points();
        let kinds: Vec<AgentKind> = spawns.iter().map(|s| s.kind).collect();
        let area = map.object_cells().count();
        if config.objects + kinds.len() > area {
            return Err(EnvError::TooFewObjectCells {
                objects: config.objects,
                agents: kinds.len(),
                cells: area,
            });
        }
        if config.horizon == 0 {
            return Err(EnvError::Config("horizon must be positive".into()));
        }
        let mut positions = vec![Pos::new(0, 0); kinds.len()];
        for kind in [AgentKind::Learner, AgentKind::Wanderer] {
            let ids: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == kind).collect();
            let mut slots: Vec<Pos> = ids.iter().map(|&i| spawns[i].pos).collect();
            slots.shuffle(&mut rng);
            for (&agent, pos) in ids.iter().zip(slots) {
                positions[agent] = pos;
            }
        }
        let free: Vec<Pos> = map.object_cells().filter(|p| !positions.contains(p)).collect();
        let mut objects = vec![false; map.width() * map.height()];
        for p in free.choose_multiple(&mut rng, config.objects) {
            objects[map.index(*p)] = true;
        }
        Ok(Self {
            map,
            config,
            kinds,
            positions,
            objects,
            object_count: config.objects,
            t: 0,
            rng,
        })
    }

    /// Builds a world from an explicit layout (probe scenarios, tests).
    pub fn from_layout(
        map: Arc<GridMap>,
        config: EnvConfig,
        positions: Vec<Pos>,
        objects: &[Pos],
        seed: u64,
    ) -> Result<Self> {
        let kinds: Vec<AgentKind> = map.spawn_points().iter().map(|s| s.kind).collect();
        if positions.len() != kinds.len() {
            return Err(EnvError::Config(format!(
                "map has {} agents, layout places {}",
                kinds.len(),
                positions.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if map.is_wall(*p) || positions[..i].contains(p) {
                return Err(EnvError::Config(format!("agent {i} cannot stand at {p}")));
            }
        }
        let mut grid = vec![false; map.width() * map.height()];
        for p in objects {
            if map.cell(*p) != Cell::ObjectArea || grid[map.index(*p)] {
                return Err(EnvError::Config(format!("object cannot be placed at {p}")));
            }
            grid[map.index(*p)] = true;
        }
        Ok(Self {
            map,
            config: EnvConfig {
                objects: objects.len(),
                ..config
            },
            kinds,
            positions,
            objects: grid,
            object_count: objects.len(),
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn n_agents(&self) -> usize {
        self.kinds.len()
    }

    pub fn kind(&self, agent: usize) -> AgentKind {
        self.kinds[agent]
    }

    pub fn kinds(&self) -> &[AgentKind] {
        &self.kinds
    }

    pub fn positions(&self) -> &[Pos] {
        &self.positions
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.horizon
    }

    pub fn has_object(&self, p: Pos) -> bool {
        self.map.contains(p) && self.objects[self.map.index(p)]
    }

    pub fn object_count(&self) -> usize {
        self.object_count
    }

    /// Object positions, row-major.
    pub fn object_positions(&self) -> Vec<Pos> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| **o)
            .map(|(i, _)| self.map.pos_of(i))
            .collect()
    }

    pub fn agent_at(&self, p: Pos) -> Option<usize> {
        self.positions.iter().position(|&q| q == p)
    }

    /// Applies one joint action. Agents move sequentially in a fresh uniform
    /// random order; a blocked mover stays put and is penalised.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        let n = self.n_agents();
        if actions.len() != n {
            return Err(EnvError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        if self.is_done() {
            return Err(EnvError::EpisodeOver(self.t));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut rewards = vec![0.0; n];
        let mut events = vec![AgentEvents::default(); n];
        for &agent in &order {
            let (dx, dy) = actions[agent].delta();
            let target = self.positions[agent].offset(dx, dy);
            if self.map.is_wall(target) {
                events[agent].wall_collision = true;
                rewards[agent] = self.config.reward_collision;
                continue;
            }
            if self.agent_at(target).is_some() {
                events[agent].agent_collision = true;
                rewards[agent] = self.config.reward_collision;
                continue;
            }
            self.positions[agent] = target;
            if self.kinds[agent] == AgentKind::Learner && self.has_object(target) {
                let idx = self.map.index(target);
                self.objects[idx] = false;
                events[agent].collected = true;
                rewards[agent] = self.config.reward_collect;
                self.respawn_object();
            }
        }
        self.t += 1;
        Ok(StepOutcome {
            rewards,
            events,
            order,
            done: self.is_done(),
        })
    }

    fn respawn_object(&mut self) {
        let free: Vec<Pos> = self
            .map
            .object_cells()
            .filter(|p| !self.objects[self.map.index(*p)] && !self.positions.contains(p))
            .collect();
        // reset() guarantees objects + agents <= object cells, so `free` is
        // never empty after a pickup
        let p = *free.choose(&mut self.rng).expect("free object cell");
        let idx = self.map.index(p);
        self.objects[idx] = true;
    }

    pub fn visible_set(&self, agent: usize, size: usize) -> Result<VisibleWindow> {
        let pos = *self.positions.get(agent).ok_or(EnvError::NoSuchAgent(agent))?;
        VisibleWindow::compute(&self.map, pos, size)
    }

    pub fn encode_observation(&self, agent: usize, size: usize, profile: ObsProfile) -> Result<Observation> {
        encode(self, agent, size, profile)
    }
}

/// Uniform random move for a wanderer.
pub fn wanderer_policy<R: Rng + ?Sized>(world: &World, agent: usize, rng: &mut R) -> Result<Action> {
    match world.kinds.get(agent) {
        None => Err(EnvError::NoSuchAgent(agent)),
        Some(AgentKind::Learner) => Err(EnvError::NotWanderer(agent)),
        Some(AgentKind::Wanderer) => Ok(Action::ALL[rng.gen_range(0..Action::COUNT)]),
    }
}
