//! Cross-run comparison of evaluated Exp.1 arms.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use da3_core::{Algo, MeanStd};

use crate::run::{read_eval, read_metadata, EVAL_FILE, METADATA_FILE};
use crate::{CliError, Result};

/// One comparison row: an algorithm under a noise regime, averaged over
/// seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub noise: String,
    pub algo: Algo,
    pub seeds: Vec<u64>,
    /// Mean and spread of the per-seed mean objects collected.
    pub objects: MeanStd,
    pub agent_collisions: MeanStd,
    pub wall_collisions: MeanStd,
}

/// Collects every evaluated run below `root` and builds the comparison.
/// Refuses unless, for each noise regime present, all four algorithms ran
/// under the same seed set.
pub fn compare(root: &Path) -> Result<Vec<ReportRow>> {
    let mut runs: BTreeMap<(String, String), BTreeMap<u64, (f64, f64, f64)>> = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| CliError::io(root, e))?;
    for entry in entries {
        let dir = entry.map_err(|e| CliError::io(root, e))?.path();
        if !dir.join(METADATA_FILE).is_file() || !dir.join(EVAL_FILE).is_file() {
            continue;
        }
        let cfg = read_metadata(&dir)?;
        let eval = read_eval(&dir)?;
        runs.entry((cfg.noise.to_string(), cfg.algo.to_string()))
            .or_default()
            .insert(
                cfg.seed,
                (eval.objects.mean, eval.agent_collisions.mean, eval.wall_collisions.mean),
            );
    }
    let noises: BTreeSet<String> = runs.keys().map(|(n, _)| n.clone()).collect();
    if noises.is_empty() {
        return Err(CliError::Usage(format!("no evaluated runs under {}", root.display())));
    }
    let mut rows = Vec::new();
    for noise in noises {
        let mut seed_set: Option<Vec<u64>> = None;
        for algo in Algo::ALL {
            let Some(by_seed) = runs.get(&(noise.clone(), algo.to_string())) else {
                return Err(CliError::Usage(format!(
                    "incomplete arm matrix: {algo} never ran under {noise}"
                )));
            };
            let seeds: Vec<u64> = by_seed.keys().copied().collect();
            match &seed_set {
                None => seed_set = Some(seeds.clone()),
                Some(s) if *s != seeds => {
                    return Err(CliError::Usage(format!(
                        "incomplete arm matrix: {algo} under {noise} ran seeds {seeds:?}, expected {s:?}"
                    )))
                }
                Some(_) => {}
            }
            let col = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> { by_seed.values().map(f).collect() };
            rows.push(ReportRow {
                noise: noise.clone(),
                algo,
                seeds,
                objects: MeanStd::of(&col(|v| v.0)),
                agent_collisions: MeanStd::of(&col(|v| v.1)),
                wall_collisions: MeanStd::of(&col(|v| v.2)),
            });
        }
    }
    Ok(rows)
}

pub fn format_rows(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<15} {:<8} {:>6} {:>18} {:>18} {:>18}\n",
        "noise", "algo", "seeds", "objects collected", "agents collision", "walls collision"
    );
    for r in rows {
        let cell = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        out.push_str(&format!(
            "{:<15} {:<8} {:>6} {:>18} {:>18} {:>18}\n",
            r.noise,
            r.algo.to_string(),
            r.seeds.len(),
            cell(&r.objects),
            cell(&r.agent_collisions),
            cell(&r.wall_collisions)
        ));
    }
    out
}
