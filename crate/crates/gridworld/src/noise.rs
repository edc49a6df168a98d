//! Ring-structured flip noise on encoded observations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{EnvError, Observation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseRegime {
    Noiseless,
    LargeMarginal,
    SmallMarginal,
    SmallFull,
}

impl NoiseRegime {
    pub const ALL: [NoiseRegime; 4] = [
        NoiseRegime::Noiseless,
        NoiseRegime::LargeMarginal,
        NoiseRegime::SmallMarginal,
        NoiseRegime::SmallFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseRegime::Noiseless => "noiseless",
            NoiseRegime::LargeMarginal => "large-marginal",
            NoiseRegime::SmallMarginal => "small-marginal",
            NoiseRegime::SmallFull => "small-full",
        }
    }

    /// Window size the regime is defined for; `None` means any odd size.
    pub fn required_size(self) -> Option<usize> {
        match self {
            NoiseRegime::Noiseless => None,
            NoiseRegime::LargeMarginal => Some(9),
            NoiseRegime::SmallMarginal | NoiseRegime::SmallFull => Some(7),
        }
    }
}

impl FromStr for NoiseRegime {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| EnvError::UnknownRegime(s.to_string()))
    }
}

impl fmt::Display for NoiseRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cells at Chebyshev distance `distance` from the window centre flip with
/// probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub distance: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub regime: NoiseRegime,
    pub size: usize,
    pub rings: Vec<Ring>,
}

impl NoiseSpec {
    /// Flip probability of the cell at `(row, col)`; zero outside all rings.
    pub fn flip_probability(&self, row: usize, col: usize) -> f64 {
        let r = self.size / 2;
        let d = row.abs_diff(r).max(col.abs_diff(r));
        self.rings
            .iter()
            .find(|ring| ring.distance == d)
            .map_or(0.0, |ring| ring.p)
    }

    pub fn is_noiseless(&self) -> bool {
        self.rings.is_empty()
    }
}

pub fn build_spec(regime: NoiseRegime, size: usize) -> Result<NoiseSpec> {
    if size == 0 || size % 2 == 0 {
        return Err(EnvError::BadWindow(size));
    }
    if regime.required_size().is_some_and(|s| s != size) {
        return Err(EnvError::IllegalNoise {
            regime: regime.name().to_string(),
            size,
        });
    }
    let rings = match regime {
        NoiseRegime::Noiseless => vec![],
        NoiseRegime::LargeMarginal => vec![Ring { distance: 4, p: 0.5 }],
        NoiseRegime::SmallMarginal => vec![Ring { distance: 3, p: 0.2 }],
        NoiseRegime::SmallFull => vec![
            Ring { distance: 3, p: 0.2 },
            Ring { distance: 2, p: 0.1 },
            Ring { distance: 1, p: 0.05 },
        ],
    };
    Ok(NoiseSpec { regime, size, rings })
}

/// Returns a copy of `obs` where each ringed entry, independently per
/// channel, is flipped within its channel's alphabet with the ring's
/// probability.
pub fn apply_noise<R: Rng + ?Sized>(obs: &Observation, spec: &NoiseSpec, rng: &mut R) -> Result<Observation> {
    if obs.size() != spec.size {
        return Err(EnvError::NoiseWindowMismatch {
            spec: spec.size,
            obs: obs.size(),
        });
    }
    let mut out = obs.clone();
    if spec.is_noiseless() {
        return Ok(out);
    }
    let size = obs.size();
    for c in 0..obs.channels() {
        let active = obs.active_value(c);
        for row in 0..size {
            for col in 0..size {
                let p = spec.flip_probability(row, col);
                if p > 0.0 && rng.gen_bool(p) {
                    let v = obs.get(c, row, col);
                    out.set(c, row, col, if v == 0 { active } else { 0 });
                }
            }
        }
    }
    Ok(out)
}
