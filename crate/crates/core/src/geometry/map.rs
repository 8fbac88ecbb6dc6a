//! Rasterized occupancy maps.
//!
//! Text format (UTF-8, one row per line, top row first):
//!
//! ```text
//! resolution=1.0
//! #####
//! #.0.#
//! #####
//! link 0 3.5 1.5
//! ```
//!
//! `#` is a wall, `.` is free space and a digit is a teleport pad whose
//! destination is given by a trailing `link <id> <x> <y>` line.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::State;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Wall,
    TeleportPad(u8),
}

impl Cell {
    /// Traversable for motion and for the distance oracle.
    pub fn is_open(self) -> bool {
        !matches!(self, Cell::Wall)
    }
}

/// A closed 2-D world made of square cells.
///
/// Cell `(ix, iy)` covers `[ix*h, (ix+1)*h) x [iy*h, (iy+1)*h)` with `iy = 0`
/// at the bottom. A point on a shared edge belongs to the cell on its
/// right/top, so membership is total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMap {
    width: usize,
    height: usize,
    resolution: f64,
    cells: Vec<Cell>,
    pad_links: BTreeMap<u8, State>,
}

impl OccupancyMap {
    /// Builds and validates a map. `rows` are given top row first.
    pub fn new(
        resolution: f64,
        rows: Vec<Vec<Cell>>,
        pad_links: BTreeMap<u8, State>,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::MapSyntax(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 {
            return Err(Error::MapSyntax("empty grid".into()));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::MapSyntax("rows have different lengths".into()));
        }
        let mut cells = vec![Cell::Wall; width * height];
        for (r, row) in rows.into_iter().enumerate() {
            let iy = height - 1 - r;
            for (ix, c) in row.into_iter().enumerate() {
                cells[iy * width + ix] = c;
            }
        }
        let map = Self {
            width,
            height,
            resolution,
            cells,
            pad_links,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        for iy in 0..self.height {
            for ix in 0..self.width {
                let border = ix == 0 || iy == 0 || ix + 1 == self.width || iy + 1 == self.height;
                if border && self.cell(ix, iy) != Cell::Wall {
                    return Err(Error::OpenBorder(ix, iy));
                }
            }
        }
        if !self.cells.contains(&Cell::Free) {
            return Err(Error::NoFreeCell);
        }
        for c in &self.cells {
            if let Cell::TeleportPad(id) = *c {
                let dest = self.pad_links.get(&id).ok_or(Error::UnlinkedPad(id))?;
                match self.cell_at(*dest) {
                    Some((ix, iy)) if self.cell(ix, iy) == Cell::Free => {}
                    _ => return Err(Error::UnlinkedPad(id)),
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MapSyntax("missing header".into()))?;
        let resolution = header
            .trim()
            .strip_prefix("resolution=")
            .ok_or_else(|| Error::MapSyntax("first line must be resolution=<float>".into()))?
            .parse::<f64>()
            .map_err(|e| Error::MapSyntax(format!("bad resolution: {e}")))?;
        let mut rows = Vec::new();
        let mut links = BTreeMap::new();
        for (r, line) in lines.enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("link ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let [id, x, y] = parts.as_slice() else {
                    return Err(Error::MapSyntax(format!("bad link line {line:?}")));
                };
                let id: u8 = id
                    .parse()
                    .map_err(|_| Error::MapSyntax(format!("bad pad id in {line:?}")))?;
                let x: f64 = x
                    .parse()
                    .map_err(|_| Error::MapSyntax(format!("bad x in {line:?}")))?;
                let y: f64 = y
                    .parse()
                    .map_err(|_| Error::MapSyntax(format!("bad y in {line:?}")))?;
                links.insert(id, State::new(x, y));
                continue;
            }
            if !links.is_empty() {
                return Err(Error::MapSyntax("grid rows after link block".into()));
            }
            let row = line
                .chars()
                .enumerate()
                .map(|(col, ch)| match ch {
                    '#' => Ok(Cell::Wall),
                    '.' => Ok(Cell::Free),
                    d if d.is_ascii_digit() => Ok(Cell::TeleportPad(d as u8 - b'0')),
                    glyph => Err(Error::UnknownGlyph { glyph, row: r, col }),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(resolution, rows, links)
    }

    /// Canonical text form; `parse(to_text(m)) == m`.
    pub fn to_text(&self) -> String {
        let mut out = format!("resolution={:?}\n", self.resolution);
        for iy in (0..self.height).rev() {
            for ix in 0..self.width {
                out.push(match self.cell(ix, iy) {
                    Cell::Wall => '#',
                    Cell::Free => '.',
                    Cell::TeleportPad(id) => (b'0' + id) as char,
                });
            }
            out.push('\n');
        }
        for (id, p) in &self.pad_links {
            let _ = writeln!(out, "link {id} {:?} {:?}", p.x, p.y);
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn pad_links(&self) -> &BTreeMap<u8, State> {
        &self.pad_links
    }

    pub fn has_teleports(&self) -> bool {
        !self.pad_links.is_empty()
    }

    /// World extent `(x_max, y_max)`; the lower corner is the origin.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        )
    }

    pub fn cell(&self, ix: usize, iy: usize) -> Cell {
        self.cells[iy * self.width + ix]
    }

    /// Cell index containing `p`, or `None` outside the grid.
    pub fn cell_at(&self, p: State) -> Option<(usize, usize)> {
        let fx = (p.x / self.resolution).floor();
        let fy = (p.y / self.resolution).floor();
        if !(fx >= 0.0 && fy >= 0.0 && fx < self.width as f64 && fy < self.height as f64) {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn cell_kind(&self, p: State) -> Result<Cell> {
        self.cell_at(p)
            .map(|(ix, iy)| self.cell(ix, iy))
            .ok_or(Error::OutOfBounds(p.x, p.y))
    }

    /// Membership test for the feasible set: free cells and teleport pads.
    pub fn is_free(&self, p: State) -> Result<bool> {
        Ok(self.cell_kind(p)?.is_open())
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> State {
        State::new(
            (ix as f64 + 0.5) * self.resolution,
            (iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Indices of plain free cells (teleport pads excluded).
    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for iy in 0..self.height {
            for ix in 0..self.width {
                if self.cell(ix, iy) == Cell::Free {
                    out.push((ix, iy));
                }
            }
        }
        out
    }

    /// Same geometry on a grid `factor` times finer.
    pub fn refined(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let (w, h) = (self.width * factor, self.height * factor);
        let mut cells = vec![Cell::Wall; w * h];
        for iy in 0..h {
            for ix in 0..w {
                cells[iy * w + ix] = self.cell(ix / factor, iy / factor);
            }
        }
        Self {
            width: w,
            height: h,
            resolution: self.resolution / factor as f64,
            cells,
            pad_links: self.pad_links.clone(),
        }
    }

    /// Stable 64-bit identity of the map contents (FNV-1a over the text form).
    pub fn fingerprint(&self) -> u64 {
        self.to_text()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }

    /// `n`×`n` grid with a wall border and a free interior.
    pub fn empty(n: usize, resolution: f64) -> Result<Self> {
        let rows = (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| {
                        if r == 0 || c == 0 || r + 1 == n || c + 1 == n {
                            Cell::Wall
                        } else {
                            Cell::Free
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(resolution, rows, BTreeMap::new())
    }

    /// Built-in layouts used by the command line and the test suites.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "empty10" => Self::empty(10, 1.0),
            "maze7" => Self::parse(MAZE7),
            "maze9" => Self::parse(MAZE9),
            "uwall" => Self::parse(UWALL),
            "teleport9" => Self::parse(TELEPORT9),
            other => Err(Error::InvalidConfig(format!(
                "unknown map preset {other:?}"
            ))),
        }
    }

    pub const PRESETS: [&'static str; 5] = ["empty10", "maze7", "maze9", "uwall", "teleport9"];
}

const MAZE7: &str = "resolution=4.0
#######
#...#.#
#.#.#.#
#.#...#
#.###.#
#.....#
#######
";

const MAZE9: &str = "resolution=2.0
#########
#...#...#
#.#.#.#.#
#.#...#.#
#.#####.#
#...#...#
###.#.#.#
#.....#.#
#########
";

const UWALL: &str = "resolution=1.0
##########
#........#
#........#
#..####..#
#.....#..#
#.....#..#
#..####..#
#........#
#........#
##########
";

const TELEPORT9: &str = "resolution=2.0
#########
#...#...#
#.#.#.#.#
#.#0#.#.#
#.#####.#
#.......#
#########
link 0 15.0 3.0
";
