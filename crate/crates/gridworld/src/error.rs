use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("map is empty")]
    Empty,
    #[error("line {line}: expected {expected} columns, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {column}: unknown glyph {glyph:?}")]
    UnknownGlyph { line: usize, column: usize, glyph: char },
    #[error("line {line}, column {column}: border cell is not a wall")]
    OpenBorder { line: usize, column: usize },
    #[error("line {line}, column {column}: spawn index {index} appears twice")]
    DuplicateSpawn { line: usize, column: usize, index: usize },
    #[error("spawn index {0} is missing (indices must be contiguous from 0)")]
    MissingSpawn(usize),
    #[error("line {line}: malformed wanderer list: {reason}")]
    BadWandererLine { line: usize, reason: String },
    #[error("unknown built-in map `{0}`")]
    UnknownBuiltin(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("{objects} objects and {agents} agents do not fit in {cells} object-area cells")]
    TooFewObjectCells {
        objects: usize,
        agents: usize,
        cells: usize,
    },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("episode is over (t = {0})")]
    EpisodeOver(usize),
    #[error("agent {0} is not a wanderer")]
    NotWanderer(usize),
    #[error("agent {0} does not exist")]
    NoSuchAgent(usize),
    #[error("observation window must be odd and positive, got {0}")]
    BadWindow(usize),
    #[error("unknown observation profile `{0}`")]
    UnknownProfile(String),
    #[error("unknown noise regime `{0}`")]
    UnknownRegime(String),
    #[error("noise regime {regime} is not defined for window size {size}")]
    IllegalNoise { regime: String, size: usize },
    #[error("noise spec is for a {spec}x{spec} window, observation is {obs}x{obs}")]
    NoiseWindowMismatch { spec: usize, obs: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
