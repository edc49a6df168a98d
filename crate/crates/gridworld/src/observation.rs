//! Agent-centred local observations.
//!
//! An observation is an `N_C x R x R` block of small integers. Every channel
//! but the last is a presence channel over `{0, 1}`; the last channel marks
//! walls and cells hidden behind walls with `-1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Cell, EnvError, Result, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsProfile {
    /// `[agents (self included), objects, blocked]`.
    Exp1,
    /// One channel per agent id, then `[objects, blocked]`.
    Exp2,
}

impl ObsProfile {
    pub fn channels(self, n_agents: usize) -> usize {
        match self {
            ObsProfile::Exp1 => 3,
            ObsProfile::Exp2 => n_agents + 2,
        }
    }
}

impl FromStr for ObsProfile {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(ObsProfile::Exp1),
            "exp2" => Ok(ObsProfile::Exp2),
            other => Err(EnvError::UnknownProfile(other.to_string())),
        }
    }
}

impl fmt::Display for ObsProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObsProfile::Exp1 => "exp1",
            ObsProfile::Exp2 => "exp2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    channels: usize,
    size: usize,
    data: Vec<i8>,
}

impl Observation {
    pub fn zeros(channels: usize, size: usize) -> Self {
        Self {
            channels,
            size,
            data: vec![0; channels * size * size],
        }
    }

    pub fn from_data(channels: usize, size: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != channels * size * size || channels < 2 {
            return Err(EnvError::Config(format!(
                "observation data of length {} does not fit {channels}x{size}x{size}",
                data.len()
            )));
        }
        Ok(Self { channels, size, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn blocked_channel(&self) -> usize {
        self.channels - 1
    }

    pub fn is_blocked_channel(&self, channel: usize) -> bool {
        channel == self.blocked_channel()
    }

    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.size + row) * self.size + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> i8 {
        self.data[self.index(channel, row, col)]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: i8) {
        let i = self.index(channel, row, col);
        self.data[i] = value;
    }

    /// Value in the entry's non-zero alphabet symbol: `1` for presence
    /// channels, `-1` for the blocked channel.
    pub fn active_value(&self, channel: usize) -> i8 {
        if self.is_blocked_channel(channel) {
            -1
        } else {
            1
        }
    }

    /// Central `size x size` sub-window (same channel layout).
    pub fn crop(&self, size: usize) -> Option<Observation> {
        if size > self.size || size % 2 != self.size % 2 {
            return None;
        }
        let off = (self.size - size) / 2;
        let mut out = Observation::zeros(self.channels, size);
        for c in 0..self.channels {
            for r in 0..size {
                for k in 0..size {
                    out.set(c, r, k, self.get(c, r + off, k + off));
                }
            }
        }
        Some(out)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

pub(crate) fn encode(world: &World, agent: usize, size: usize, profile: ObsProfile) -> Result<Observation> {
    let window = world.visible_set(agent, size)?;
    let n = world.n_agents();
    let channels = profile.channels(n);
    let (objects_ch, blocked_ch) = (channels - 2, channels - 1);
    let mut obs = Observation::zeros(channels, size);
    let r = (size / 2) as i32;
    let center = world.positions()[agent];
    for row in 0..size {
        for col in 0..size {
            let (dx, dy) = (col as i32 - r, row as i32 - r);
            if !window.is_visible(dx, dy) {
                obs.set(blocked_ch, row, col, -1);
                continue;
            }
            let p = center.offset(dx, dy);
            if world.map().cell(p) == Cell::Wall {
                obs.set(blocked_ch, row, col, -1);
                continue;
            }
            if let Some(other) = world.agent_at(p) {
                let ch = match profile {
                    ObsProfile::Exp1 => 0,
                    ObsProfile::Exp2 => other,
                };
                obs.set(ch, row, col, 1);
            }
            if world.has_object(p) {
                obs.set(objects_ch, row, col, 1);
            }
        }
    }
    Ok(obs)
}
