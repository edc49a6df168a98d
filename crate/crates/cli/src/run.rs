//! Training and evaluation of run directories.

use std::fs;
use std::path::{Path, PathBuf};

use da3_core::{
    derive_seed, evaluate_policy, load_models, run_training, EpisodeStats, EvalSummary, MeanStd, STREAM_AGENT,
};
use da3_gridworld::AgentKind;
use serde::{Deserialize, Serialize};

use crate::config::{parse_document, resolve_config, ExperimentConfig};
use crate::render::{grid_to_text, render_pgm, Palette};
use crate::{CliError, Result};

pub const METADATA_FILE: &str = "metadata.toml";
pub const EVAL_FILE: &str = "eval.json";

/// Values derived from the configuration, recorded next to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Derived {
    channels: usize,
    learners: Vec<usize>,
    wanderers: Vec<usize>,
    /// Hex, since TOML integers are signed.
    agent_seeds: Vec<String>,
    parameters: usize,
}

#[derive(Serialize)]
struct Metadata<'a> {
    #[serde(flatten)]
    config: &'a ExperimentConfig,
    derived: Derived,
}

/// Reads a run's `metadata.toml` back into a configuration.
pub fn read_metadata(run_dir: &Path) -> Result<ExperimentConfig> {
    let path = run_dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    resolve_config(Some(parse_document(&text)?), Default::default())
}

/// Whether `run_dir` holds a finished training run of exactly `cfg`.
pub fn is_complete(run_dir: &Path, cfg: &ExperimentConfig) -> bool {
    let Ok(found) = read_metadata(run_dir) else {
        return false;
    };
    let Ok(map) = cfg.load_map() else {
        return false;
    };
    found == *cfg
        && run_dir.join("metrics.csv").is_file()
        && map
            .spawn_points()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == AgentKind::Learner)
            .all(|(i, _)| run_dir.join("checkpoints").join(format!("agent{i}.json")).is_file())
}

/// Trains `cfg` into `run_dir`: writes `metadata.toml` first, then metrics
/// and checkpoints. `progress` sees every finished episode.
pub fn train(cfg: &ExperimentConfig, run_dir: &Path, progress: &mut dyn FnMut(&EpisodeStats)) -> Result<PathBuf> {
    let (map, train_cfg) = cfg.prepare()?;
    fs::create_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    let learners: Vec<usize> = map
        .spawn_points()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == AgentKind::Learner)
        .map(|(i, _)| i)
        .collect();
    let parameters = {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        da3_core::Model::new(train_cfg.net.clone(), &mut rng)?
            .params()
            .num_scalars()
    };
    let meta = Metadata {
        config: cfg,
        derived: Derived {
            channels: train_cfg.net.channels,
            agent_seeds: learners
                .iter()
                .map(|&i| format!("{:#018x}", derive_seed(cfg.seed, STREAM_AGENT, i as u64)))
                .collect(),
            wanderers: cfg.wanderer_ids(&map),
            learners,
            parameters,
        },
    };
    let path = run_dir.join(METADATA_FILE);
    let text = toml::to_string(&meta).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    run_training(map, &train_cfg, run_dir, progress)?;
    Ok(run_dir.to_path_buf())
}

/// Summary of a greedy evaluation, plus per-agent heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub algo: String,
    pub noise: String,
    pub seed: u64,
    pub episodes: usize,
    pub objects: MeanStd,
    pub agent_collisions: MeanStd,
    pub wall_collisions: MeanStd,
    pub agents: Vec<AgentHeatmap>,
}

/// Where one agent collected objects, row-major `height x width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHeatmap {
    pub agent: usize,
    pub wanderer: bool,
    /// Objects this agent collected over all evaluation episodes.
    pub objects: u64,
    pub total: u64,
    pub grid: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn row(&self) -> String {
        format!(
            "{:<8} {:<15} objects collected {:>7.2} ± {:<6.2} agents collision {:>7.2} ± {:<6.2} walls collision {:>7.2} ± {:.2}",
            self.algo,
            self.noise,
            self.objects.mean,
            self.objects.std,
            self.agent_collisions.mean,
            self.agent_collisions.std,
            self.wall_collisions.mean,
            self.wall_collisions.std,
        )
    }
}

fn build_report(cfg: &ExperimentConfig, wanderers: &[usize], summary: &EvalSummary) -> EvalReport {
    let agents = summary
        .heatmaps
        .iter()
        .enumerate()
        .map(|(i, flat)| {
            let objects = summary
                .episodes
                .iter()
                .flat_map(|e| e.agents.iter())
                .filter(|(a, _)| *a == i)
                .map(|(_, s)| s.objects)
                .sum();
            AgentHeatmap {
                agent: i,
                wanderer: wanderers.contains(&i),
                objects,
                total: flat.iter().sum(),
                grid: flat.chunks(summary.width).map(<[u64]>::to_vec).collect(),
            }
        })
        .collect();
    EvalReport {
        algo: cfg.algo.to_string(),
        noise: cfg.noise.to_string(),
        seed: cfg.seed,
        episodes: summary.episodes.len(),
        objects: summary.objects,
        agent_collisions: summary.agent_collisions,
        wall_collisions: summary.wall_collisions,
        agents,
    }
}

/// Greedy evaluation of a trained run. Writes `eval.json` and
/// `heatmaps/agent<i>.{txt,pgm}` into the run directory.
pub fn evaluate(run_dir: &Path, episodes: Option<usize>) -> Result<EvalReport> {
    let cfg = read_metadata(run_dir)?;
    let (map, train_cfg) = cfg.prepare()?;
    let models = load_models(&map, &train_cfg.net, run_dir)?;
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    let summary = evaluate_policy(map.clone(), &train_cfg, &models, episodes, cfg.seed)?;
    let report = build_report(&cfg, &cfg.wanderer_ids(&map), &summary);
    let dir = run_dir.join("heatmaps");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for a in &report.agents {
        let grid: Vec<Vec<f64>> = a.grid.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let txt = dir.join(format!("agent{}.txt", a.agent));
        fs::write(&txt, grid_to_text(&grid)).map_err(|e| CliError::io(&txt, e))?;
        let pgm = dir.join(format!("agent{}.pgm", a.agent));
        fs::write(&pgm, render_pgm(&grid, Palette::Gray)?).map_err(|e| CliError::io(&pgm, e))?;
    }
    let path = run_dir.join(EVAL_FILE);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

pub fn read_eval(run_dir: &Path) -> Result<EvalReport> {
    let path = run_dir.join(EVAL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
