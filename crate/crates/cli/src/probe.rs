//! Attention probes: saliency heatmaps for pinned world states.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use da3_core::{argmax, extract_heatmap, load_models, Model, Reduce};
use da3_gridworld::{apply_noise, build_spec, read_trace, Action, AgentKind, NoiseSpec, ObsProfile, Pos, World};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::run::read_metadata;
use crate::{CliError, Result};

/// A probe scenario: either explicit agent positions and objects, or a
/// step of a recorded trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// `[x, y]` per agent, in spawn order.
    pub positions: Option<Vec<[i32; 2]>>,
    pub objects: Option<Vec<[i32; 2]>>,
    /// Trace file written by a recorded episode.
    pub trace: Option<PathBuf>,
    /// Record index within `trace`.
    pub step: Option<usize>,
    /// Agents to probe; all learners by default.
    pub agents: Option<Vec<usize>>,
    /// Seed of the observation noise draw.
    #[serde(default)]
    pub noise_seed: u64,
    /// Quantile levels for IQN heads; eight evenly spaced levels by default.
    pub taus: Option<Vec<f64>>,
}

/// One probed agent: its observation next to its saliency attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExport {
    pub agent: usize,
    pub size: usize,
    /// `[channel][row][col]`.
    pub observation: Vec<Vec<Vec<i8>>>,
    /// Head output, `[action]` or `[tau][action]` flattened.
    pub q: Vec<f64>,
    /// Greedy action under `q`, averaged over quantile levels for IQN.
    pub action: Action,
    /// `[head][row][col]`, final encoder iteration.
    pub heads: Vec<Vec<Vec<f64>>>,
    pub mean: Vec<Vec<f64>>,
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn to_grid(flat: &[f64], side: usize) -> Vec<Vec<f64>> {
    flat.chunks(side)
        .map(|r| r.iter().map(|&v| round6(v)).collect())
        .collect()
}

fn default_taus() -> Vec<f64> {
    (0..8).map(|j| (j as f64 + 0.5) / 8.0).collect()
}

/// Probes `agent` of `world` with one full forward pass.
pub fn probe_agent(
    model: &Model,
    world: &World,
    agent: usize,
    profile: ObsProfile,
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
    taus: Option<&[f64]>,
) -> Result<ProbeExport> {
    let size = model.config().size;
    let clean = world.encode_observation(agent, size, profile)?;
    let obs = apply_noise(&clean, spec, rng)?;
    let fallback = default_taus();
    let taus = match model.config().head {
        da3_core::HeadKind::Iqn => Some(taus.unwrap_or(&fallback)),
        da3_core::HeadKind::Dqn => None,
    };
    let (q, record) = model.attend(&obs, taus)?;
    let grid = record.grid;
    let heads = extract_heatmap(&record, Reduce::PerHead)
        .iter()
        .map(|h| to_grid(h, grid))
        .collect();
    let mean = to_grid(&extract_heatmap(&record, Reduce::Mean)[0], grid);
    let observation = (0..obs.channels())
        .map(|c| {
            (0..size)
                .map(|r| (0..size).map(|col| obs.get(c, r, col)).collect())
                .collect()
        })
        .collect();
    let values: Vec<f64> = (0..Action::COUNT)
        .map(|a| q.data().iter().skip(a).step_by(Action::COUNT).sum())
        .collect();
    Ok(ProbeExport {
        agent,
        size,
        observation,
        q: q.data().iter().map(|&v| round6(v)).collect(),
        action: Action::ALL[argmax(&values)],
        heads,
        mean,
    })
}

fn pos(p: &[i32; 2]) -> Pos {
    Pos::new(p[0], p[1])
}

/// Runs a scenario against the checkpoints of a training run.
pub fn probe_run(run_dir: &Path, scenario: &Scenario) -> Result<Vec<ProbeExport>> {
    let cfg = read_metadata(run_dir)?;
    let (map, train_cfg) = cfg.prepare()?;
    let models = load_models(&map, &train_cfg.net, run_dir)?;
    let (positions, objects) = match (&scenario.positions, &scenario.trace) {
        (Some(p), None) => (
            p.iter().map(pos).collect::<Vec<_>>(),
            scenario.objects.iter().flatten().map(pos).collect::<Vec<_>>(),
        ),
        (None, Some(path)) => {
            let file = File::open(path).map_err(|e| CliError::io(path, e))?;
            let records = read_trace(BufReader::new(file)).map_err(|e| CliError::io(path, e))?;
            let step = scenario.step.unwrap_or(0);
            let rec = records.get(step).ok_or_else(|| {
                CliError::Usage(format!("trace has {} records, step {step} requested", records.len()))
            })?;
            (rec.positions.clone(), rec.objects.clone())
        }
        _ => {
            return Err(CliError::Usage(
                "a scenario needs either `positions` (with optional `objects`) or `trace`".into(),
            ))
        }
    };
    let world = World::from_layout(map.clone(), train_cfg.env, positions, &objects, 0)?;
    let spec = build_spec(cfg.noise, cfg.size)?;
    let agents = match &scenario.agents {
        Some(a) => a.clone(),
        None => models.iter().map(|(i, _)| *i).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.noise_seed);
    agents
        .iter()
        .map(|&a| {
            if map.spawn_points().get(a).map(|s| s.kind) != Some(AgentKind::Learner) {
                return Err(CliError::Usage(format!("agent {a} is not a learner")));
            }
            let model = &models
                .iter()
                .find(|(i, _)| *i == a)
                .expect("every learner has a model")
                .1;
            probe_agent(model, &world, a, cfg.profile, &spec, &mut rng, scenario.taus.as_deref())
        })
        .collect()
}
