//! Line-of-sight inside an agent's square observation window.
//!
//! A window cell is visible when the Bresenham line from the agent to that
//! cell passes no wall strictly between the two endpoints. Walls themselves
//! can be seen; cells outside the map cannot.

use crate::{EnvError, GridMap, Pos, Result};

/// Integer Bresenham line from `from` to `to`, both endpoints included.
///
/// Steps along the major axis; the minor coordinate advances only when the
/// accumulated error strictly exceeds one half, so exact ties stay on the
/// origin's row (or column).
pub fn bresenham(from: Pos, to: Pos) -> Vec<Pos> {
    let (dx, dy) = ((to.x - from.x).abs(), (to.y - from.y).abs());
    let (sx, sy) = ((to.x - from.x).signum(), (to.y - from.y).signum());
    let steep = dy > dx;
    let (major, minor) = if steep { (dy, dx) } else { (dx, dy) };
    let mut out = Vec::with_capacity(major as usize + 1);
    let mut err = 2 * minor - major;
    let (mut a, mut b) = (0, 0);
    for _ in 0..=major {
        out.push(if steep {
            Pos::new(from.x + sx * b, from.y + sy * a)
        } else {
            Pos::new(from.x + sx * a, from.y + sy * b)
        });
        if err > 0 {
            b += 1;
            err -= 2 * major;
        }
        err += 2 * minor;
        a += 1;
    }
    out
}

/// Visibility mask of an `size x size` window centred on an agent, indexed
/// row-major by `(dy + r) * size + (dx + r)` with `r = size / 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleWindow {
    size: usize,
    center: Pos,
    visible: Vec<bool>,
}

impl VisibleWindow {
    pub fn compute(map: &GridMap, center: Pos, size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(EnvError::BadWindow(size));
        }
        let r = (size / 2) as i32;
        let mut visible = Vec::with_capacity(size * size);
        for dy in -r..=r {
            for dx in -r..=r {
                let target = center.offset(dx, dy);
                visible.push(map.contains(target) && line_is_clear(map, center, target));
            }
        }
        Ok(Self { size, center, visible })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn center(&self) -> Pos {
        self.center
    }

    pub fn mask(&self) -> &[bool] {
        &self.visible
    }

    /// Visibility of the cell at window offset `(dx, dy)`.
    pub fn is_visible(&self, dx: i32, dy: i32) -> bool {
        let r = (self.size / 2) as i32;
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        self.visible[((dy + r) as usize) * self.size + (dx + r) as usize]
    }

    /// Map positions of the visible cells, row-major.
    pub fn visible_positions(&self) -> Vec<Pos> {
        let r = (self.size / 2) as i32;
        self.visible
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| {
                let (row, col) = ((i / self.size) as i32, (i % self.size) as i32);
                self.center.offset(col - r, row - r)
            })
            .collect()
    }
}

fn line_is_clear(map: &GridMap, from: Pos, to: Pos) -> bool {
    let line = bresenham(from, to);
    let n = line.len();
    n <= 2 || line[1..n - 1].iter().all(|&p| !map.is_wall(p))
}
