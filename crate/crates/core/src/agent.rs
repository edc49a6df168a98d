//! One agent's independent learner: online and target networks, Adam,
//! replay and epsilon-greedy behaviour.

use da3_gridworld::{Action, Observation};
use da3_tensor::{Adam, AdamConfig, Graph, Params, Tensor};
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{argmax, dqn_loss, iqn_loss, mean_over_taus};
use crate::model::obs_batch;
use crate::replay::{ReplayBuffer, Transition};
use crate::{CoreError, HeadKind, Model, NetConfig, Result, TargetRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub replay_capacity: usize,
    /// Learner updates between target synchronisations.
    pub target_sync: u64,
    /// Environment steps per gradient update.
    pub train_every: u64,
    /// Transitions required before the first update (at least `batch`).
    pub warmup: usize,
    pub n_tau: usize,
    pub n_tau_target: usize,
    pub kappa: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-4,
            batch: 32,
            replay_capacity: 100_000,
            target_sync: 2000,
            train_every: 1,
            warmup: 32,
            n_tau: 8,
            n_tau_target: 8,
            kappa: 1.0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch == 0 || self.replay_capacity < self.batch {
            return bad("batch must be positive and fit in the replay buffer");
        }
        if self.target_sync == 0 || self.train_every == 0 {
            return bad("target_sync and train_every must be positive");
        }
        if self.n_tau == 0 || self.n_tau_target == 0 || !(self.kappa > 0.0) {
            return bad("IQN needs positive quantile counts and kappa");
        }
        Ok(())
    }
}

/// `count` quantile levels per row, uniform on the open interval (0, 1).
pub fn sample_taus<R: Rng + ?Sized>(rng: &mut R, rows: usize, count: usize) -> Tensor {
    Tensor::from_fn(&[rows, count], |_| rng.sample::<f64, _>(Open01))
}

/// Per-action values used for greedy selection: the head output for DQN,
/// the mean over `n_tau` sampled quantile levels for IQN.
pub fn action_values<R: Rng + ?Sized>(model: &Model, obs: &Observation, n_tau: usize, rng: &mut R) -> Result<Vec<f64>> {
    let x = obs_batch([obs])?;
    match model.config().head {
        HeadKind::Dqn => Ok(model.q_values(&x, None)?.into_data()),
        HeadKind::Iqn => {
            let taus = sample_taus(rng, 1, n_tau);
            let q = model.q_values(&x, Some(&taus))?;
            Ok(mean_over_taus(&q).remove(0))
        }
    }
}

/// With probability `epsilon` a uniform action, else the greedy one.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    model: &Model,
    obs: &Observation,
    epsilon: f64,
    n_tau: usize,
    rng: &mut R,
) -> Result<Action> {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(Action::ALL[rng.gen_range(0..Action::COUNT)]);
    }
    let values = action_values(model, obs, n_tau, rng)?;
    Ok(Action::ALL[argmax(&values)])
}

pub struct Learner {
    id: usize,
    rule: TargetRule,
    config: LearnerConfig,
    online: Model,
    target: Params,
    adam: Adam,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    updates: u64,
    observed: u64,
}

impl Learner {
    /// Initialises the online network from `seed` and copies it into the
    /// target network.
    pub fn new(id: usize, net: NetConfig, rule: TargetRule, config: LearnerConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = Model::new(net, &mut rng)?;
        Self::from_model(id, online, rule, config, rng.gen())
    }

    pub fn from_model(id: usize, online: Model, rule: TargetRule, config: LearnerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            online.params(),
        );
        let buffer = ReplayBuffer::new(config.replay_capacity, rng.gen())?;
        Ok(Self {
            id,
            rule,
            target: online.params().clone(),
            online,
            adam,
            buffer,
            rng,
            updates: 0,
            observed: 0,
            config,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.online
    }

    pub fn target(&self) -> &Params {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// The learner's private random source (exploration, observation noise,
    /// quantile sampling).
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn select_action(&mut self, obs: &Observation, epsilon: f64) -> Result<Action> {
        epsilon_greedy(&self.online, obs, epsilon, self.config.n_tau, &mut self.rng)
    }

    pub fn observe(&mut self, t: Transition) {
        self.buffer.push(t);
        self.observed += 1;
    }

    /// Performs an update when the buffer is warm and the step cadence
    /// allows one. Returns the loss if an update happened.
    pub fn train_step(&mut self) -> Result<Option<f64>> {
        let warm = self.buffer.len() >= self.config.warmup.max(self.config.batch);
        if !warm || self.observed % self.config.train_every != 0 {
            return Ok(None);
        }
        self.update().map(Some)
    }

    /// One gradient step on a uniformly sampled batch, followed by a target
    /// sync on the configured cadence.
    pub fn update(&mut self) -> Result<f64> {
        let batch = self
            .buffer
            .sample(self.config.batch)
            .ok_or_else(|| CoreError::Config("replay buffer holds fewer transitions than a batch".into()))?;
        let mut g = Graph::new();
        let nodes = self.online.params().bind(&mut g, true);
        let c = &self.config;
        let loss = match self.online.config().head {
            HeadKind::Dqn => dqn_loss(&mut g, &self.online, &nodes, &self.target, &batch, c.gamma, self.rule)?,
            HeadKind::Iqn => {
                let b = batch.len();
                let taus = sample_taus(&mut self.rng, b, c.n_tau);
                let taus_target = sample_taus(&mut self.rng, b, c.n_tau_target);
                let taus_select = sample_taus(&mut self.rng, b, c.n_tau);
                iqn_loss(
                    &mut g,
                    &self.online,
                    &nodes,
                    &self.target,
                    &batch,
                    c.gamma,
                    &taus,
                    &taus_target,
                    &taus_select,
                    self.rule,
                    c.kappa,
                )?
            }
        };
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        let params = self.online.params_mut();
        params.collect_grads(&g, &nodes)?;
        self.adam.step(params)?;
        self.updates += 1;
        if self.updates % self.config.target_sync == 0 {
            self.sync_target();
        }
        Ok(value)
    }

    /// Copies the online parameters into the target network bit for bit.
    pub fn sync_target(&mut self) {
        self.target
            .copy_values_from(self.online.params())
            .expect("online and target share a layout");
    }
}
