//! Three-state deterministic MDP with a value-iteration oracle, and
//! loss-driven training of tabular-equivalent networks on it.
#![allow(dead_code)]

use da3_core::{dqn_loss, iqn_loss, sample_taus, Algo, Batch, Model, NetConfig, TargetRule, Transition, Trunk};
use da3_gridworld::{Action, Observation};
use da3_tensor::{Adam, AdamConfig, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STATES: usize = 3;
pub const GAMMA: f64 = 0.9;

/// One-hot state in channels 0..3 of a 4-channel 1x1 window.
pub fn state_obs(s: usize) -> Observation {
    let mut data = vec![0i8; 4];
    data[s] = 1;
    Observation::from_data(4, 1, data).unwrap()
}

/// `(next, reward, done)`. Actions 0..3 move to `(s + a) % 3`, paying 1 on
/// arrival in state 2; action 3 stays put at a cost of 1. Leaving state 2
/// with action 0 ends the episode.
pub fn step(s: usize, a: usize) -> (usize, f64, bool) {
    if a == 3 {
        return (s, -1.0, false);
    }
    let next = (s + a) % STATES;
    let reward = if next == 2 { 1.0 } else { 0.0 };
    (next, reward, s == 2 && a == 0)
}

pub fn value_iteration() -> [[f64; 4]; STATES] {
    let mut q = [[0.0; 4]; STATES];
    for _ in 0..5000 {
        let v: Vec<f64> = q
            .iter()
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (s, row) in q.iter_mut().enumerate() {
            for (a, x) in row.iter_mut().enumerate() {
                let (n, r, done) = step(s, a);
                *x = r + if done { 0.0 } else { GAMMA * v[n] };
            }
        }
    }
    q
}

pub fn all_transitions() -> Batch {
    let ts: Vec<Transition> = (0..STATES)
        .flat_map(|s| {
            (0..4).map(move |a| {
                let (n, r, done) = step(s, a);
                Transition {
                    obs: state_obs(s),
                    action: Action::ALL[a],
                    reward: r,
                    next_obs: state_obs(n),
                    done,
                }
            })
        })
        .collect();
    let refs: Vec<&Transition> = ts.iter().collect();
    Batch::from_transitions(&refs).unwrap()
}

fn states_batch() -> Tensor {
    da3_core::obs_batch(&(0..STATES).map(state_obs).collect::<Vec<_>>()).unwrap()
}

/// Trains a flat-trunk DQN head (one linear layer, so tabular) with
/// `dqn_loss` on full sweeps of the transition table. Returns `Q[s][a]`.
pub fn train_dqn(seed: u64) -> Vec<Vec<f64>> {
    let mut cfg = NetConfig::for_algo(Algo::Da3Dqn, 4, 1);
    cfg.trunk = Trunk::Flat;
    cfg.head_hidden = 0;
    let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut target = model.params().clone();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.02,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let batch = all_transitions();
    for it in 0..12_000 {
        if it == 8_000 {
            adam.set_lr(0.002);
        }
        let mut g = Graph::new();
        let nodes = model.params().bind(&mut g, true);
        let loss = dqn_loss(&mut g, &model, &nodes, &target, &batch, GAMMA, TargetRule::Double).unwrap();
        g.backward(loss).unwrap();
        model.params_mut().collect_grads(&g, &nodes).unwrap();
        adam.step(model.params_mut()).unwrap();
        if it % 50 == 49 {
            target.copy_values_from(model.params()).unwrap();
        }
    }
    let q = model.q_values(&states_batch(), None).unwrap();
    q.data().chunks(4).map(<[f64]>::to_vec).collect()
}

/// Trains a flat-trunk IQN head with `iqn_loss`; returns the mean over 64
/// evenly spaced quantile levels of `Z[s][a]`.
pub fn train_iqn(seed: u64) -> Vec<Vec<f64>> {
    let mut cfg = NetConfig::for_algo(Algo::Da3Iqn, 4, 1);
    cfg.trunk = Trunk::Flat;
    cfg.head_hidden = 16;
    cfg.cos_basis = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(cfg, &mut rng).unwrap();
    let mut target = model.params().clone();
    let mut adam = Adam::new(
        AdamConfig {
            lr: 0.005,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let batch = all_transitions();
    let b = batch.len();
    for it in 0..12_000 {
        if it == 8_000 {
            adam.set_lr(0.0005);
        }
        let taus = sample_taus(&mut rng, b, 8);
        let taus_target = sample_taus(&mut rng, b, 8);
        let taus_select = sample_taus(&mut rng, b, 8);
        let mut g = Graph::new();
        let nodes = model.params().bind(&mut g, true);
        let loss = iqn_loss(
            &mut g,
            &model,
            &nodes,
            &target,
            &batch,
            GAMMA,
            &taus,
            &taus_target,
            &taus_select,
            TargetRule::Double,
            1.0,
        )
        .unwrap();
        g.backward(loss).unwrap();
        model.params_mut().collect_grads(&g, &nodes).unwrap();
        adam.step(model.params_mut()).unwrap();
        if it % 50 == 49 {
            target.copy_values_from(model.params()).unwrap();
        }
    }
    let n = 64;
    let taus = Tensor::from_fn(&[STATES, n], |i| ((i % n) as f64 + 0.5) / n as f64);
    let z = model.q_values(&states_batch(), Some(&taus)).unwrap();
    (0..STATES)
        .map(|s| {
            (0..4)
                .map(|a| (0..n).map(|j| z.data()[(s * n + j) * 4 + a]).sum::<f64>() / n as f64)
                .collect()
        })
        .collect()
}

pub fn max_error(q: &[Vec<f64>], oracle: &[[f64; 4]; STATES]) -> f64 {
    q.iter()
        .zip(oracle)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}
