//! Map documents and the static grid.
//!
//! A map document is a rectangular block of glyphs:
//!
//! | glyph | meaning |
//! |-------|---------|
//! | `#`   | wall |
//! | `.`   | empty floor |
//! | `o`   | object area (objects are scattered here) |
//! | `0`-`9` | spawn point for that agent index, on empty floor |
//!
//! An optional trailing line `W i j ...` marks spawn indices whose agents
//! are wanderers. Border cells must be walls.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::MapError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn chebyshev(self, other: Pos) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Wall,
    Empty,
    ObjectArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Learner,
    Wanderer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnPoint {
    pub pos: Pos,
    pub kind: AgentKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    spawns: Vec<SpawnPoint>,
}

const THREE_ROOMS: &str = include_str!("../maps/three-rooms.txt");
const SIMPLE: &str = include_str!("../maps/simple.txt");
const ARENA12: &str = include_str!("../maps/arena12.txt");
const TINY5: &str = include_str!("../maps/tiny5.txt");

/// Names accepted by [`GridMap::builtin`].
pub const BUILTIN_MAPS: [&str; 4] = ["three-rooms", "simple", "arena12", "tiny5"];

impl GridMap {
    /// Built-in maps: `three-rooms` (25x25, six learners), `simple` (20x20,
    /// learners 0-3 and wanderers 4-5), `arena12` (12x12 single room, two
    /// learners) and `tiny5` (5x5, one learner).
    pub fn builtin(name: &str) -> Result<Self, MapError> {
        let text = match name {
            "three-rooms" => THREE_ROOMS,
            "simple" => SIMPLE,
            "arena12" => ARENA12,
            "tiny5" => TINY5,
            other => return Err(MapError::UnknownBuiltin(other.to_string())),
        };
        Self::parse(text)
    }

    pub fn parse(text: &str) -> Result<Self, MapError> {
        let mut rows: Vec<(usize, &str)> = Vec::new();
        let mut wanderers: Vec<(usize, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('W') {
                for tok in rest.split_whitespace() {
                    let idx = tok.parse::<usize>().map_err(|_| MapError::BadWandererLine {
                        line: line_no,
                        reason: format!("`{tok}` is not an index"),
                    })?;
                    wanderers.push((line_no, idx));
                }
                continue;
            }
            if !wanderers.is_empty() {
                return Err(MapError::BadWandererLine {
                    line: line_no,
                    reason: "grid rows after the wanderer line".into(),
                });
            }
            rows.push((line_no, line));
        }
        let (_, first) = rows.first().ok_or(MapError::Empty)?;
        let width = first.chars().count();
        let height = rows.len();
        let mut cells = Vec::with_capacity(width * height);
        let mut spawns: Vec<Option<(Pos, usize)>> = vec![None; 10];
        for (y, &(line_no, row)) in rows.iter().enumerate() {
            let found = row.chars().count();
            if found != width {
                return Err(MapError::Ragged {
                    line: line_no,
                    expected: width,
                    found,
                });
            }
            for (x, glyph) in row.chars().enumerate() {
                let column = x + 1;
                let cell = match glyph {
                    '#' => Cell::Wall,
                    '.' => Cell::Empty,
                    'o' => Cell::ObjectArea,
                    d if d.is_ascii_digit() => {
                        let index = d.to_digit(10).unwrap() as usize;
                        if spawns[index].is_some() {
                            return Err(MapError::DuplicateSpawn {
                                line: line_no,
                                column,
                                index,
                            });
                        }
                        spawns[index] = Some((Pos::new(x as i32, y as i32), line_no));
                        Cell::Empty
                    }
                    other => {
                        return Err(MapError::UnknownGlyph {
                            line: line_no,
                            column,
                            glyph: other,
                        })
                    }
                };
                let border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
                if border && cell != Cell::Wall {
                    return Err(MapError::OpenBorder { line: line_no, column });
                }
                cells.push(cell);
            }
        }
        let count = spawns.iter().rposition(Option::is_some).map_or(0, |i| i + 1);
        let mut spawn_points = Vec::with_capacity(count);
        for (index, spawn) in spawns.iter().take(count).enumerate() {
            let (pos, _) = spawn.ok_or(MapError::MissingSpawn(index))?;
            spawn_points.push(SpawnPoint {
                pos,
                kind: AgentKind::Learner,
            });
        }
        for (line, idx) in wanderers {
            let spawn = spawn_points.get_mut(idx).ok_or(MapError::BadWandererLine {
                line,
                reason: format!("no spawn point {idx}"),
            })?;
            spawn.kind = AgentKind::Wanderer;
        }
        Ok(Self {
            width,
            height,
            cells,
            spawns: spawn_points,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spawn_points(&self) -> &[SpawnPoint] {
        &self.spawns
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    /// Cell at `p`; positions outside the grid read as walls.
    pub fn cell(&self, p: Pos) -> Cell {
        if self.contains(p) {
            self.cells[self.index(p)]
        } else {
            Cell::Wall
        }
    }

    pub fn index(&self, p: Pos) -> usize {
        debug_assert!(self.contains(p));
        p.y as usize * self.width + p.x as usize
    }

    pub fn pos_of(&self, index: usize) -> Pos {
        Pos::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn is_wall(&self, p: Pos) -> bool {
        self.cell(p) == Cell::Wall
    }

    /// Object-area cells in row-major order.
    pub fn object_cells(&self) -> impl Iterator<Item = Pos> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == Cell::ObjectArea)
            .map(|(i, _)| self.pos_of(i))
    }

    /// Re-marks which spawn indices are wanderers.
    pub fn with_wanderers(mut self, wanderers: &[usize]) -> Result<Self, MapError> {
        for s in &mut self.spawns {
            s.kind = AgentKind::Learner;
        }
        for &w in wanderers {
            let spawn = self.spawns.get_mut(w).ok_or(MapError::BadWandererLine {
                line: 0,
                reason: format!("no spawn point {w}"),
            })?;
            spawn.kind = AgentKind::Wanderer;
        }
        Ok(self)
    }
}
