//! Line-delimited JSON episode traces.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::{Action, AgentEvents, Pos, StepOutcome};

/// One environment step: the joint action, the positions after the step,
/// rewards and events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub actions: Vec<Action>,
    pub positions: Vec<Pos>,
    pub objects: Vec<Pos>,
    pub rewards: Vec<f64>,
    pub events: Vec<AgentEvents>,
}

impl TraceRecord {
    pub fn new(t: usize, actions: &[Action], positions: &[Pos], objects: Vec<Pos>, outcome: &StepOutcome) -> Self {
        Self {
            t,
            actions: actions.to_vec(),
            positions: positions.to_vec(),
            objects,
            rewards: outcome.rewards.clone(),
            events: outcome.events.clone(),
        }
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &TraceRecord) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_trace<R: BufRead>(input: R) -> io::Result<Vec<TraceRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| l.and_then(|s| serde_json::from_str(&s).map_err(io::Error::from)))
        .collect()
}
