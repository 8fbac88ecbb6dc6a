//! Ground-truth travel-time fields `d*(·, g)` on occupancy grids.
//!
//! The primary solver is first-order upwind fast marching for `‖∇d‖ = 1`
//! with unit speed. A 16-connected Dijkstra serves as an independent
//! cross-check. Both seed a disc around the goal with exact Euclidean
//! distances; the disc is the largest one (up to [`MAX_SEED_CELLS`] cells)
//! whose covering cells are all open.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OccupancyMap, State};

/// Radius cap, in cells, for the exactly initialised disc around the goal.
pub const MAX_SEED_CELLS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    FastMarching,
    Dijkstra16,
}

/// Solved travel times at cell centres. Walls and unreachable cells hold `+∞`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceField {
    map_fingerprint: u64,
    width: usize,
    height: usize,
    resolution: f64,
    /// Goal snapped to the centre of its cell.
    goal: State,
    seed_radius: f64,
    method: Method,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn goal(&self) -> State {
        self.goal
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn map_fingerprint(&self) -> u64 {
        self.map_fingerprint
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.width + ix]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interpolated `d*(s, goal)`; see [`oracle_distance`].
    pub fn distance(&self, s: State) -> Result<f64> {
        oracle_distance(self, s)
    }

    /// Row-major cell values, top row first; unreachable cells print `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for iy in (0..self.height).rev() {
            for ix in 0..self.width {
                if ix > 0 {
                    out.push(',');
                }
                let v = self.value(ix, iy);
                if v.is_finite() {
                    let _ = write!(out, "{v}");
                } else {
                    out.push_str("inf");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "goal": [self.goal.x, self.goal.y],
            "method": self.method,
            "resolution": self.resolution,
            "width": self.width,
            "height": self.height,
            "map_fingerprint": format!("{:016x}", self.map_fingerprint),
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    t: f64,
    idx: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on t, ties broken by index for determinism
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Solves `‖∇d‖ = 1`, `d(goal) = 0` on the open cells of `map`.
pub fn solve_distance_field(
    map: &OccupancyMap,
    goal: State,
    method: Method,
) -> Result<DistanceField> {
    solve_traced(map, goal, method).map(|(f, _)| f)
}

/// Solver entry that also returns the acceptance order of cells.
pub(crate) fn solve_traced(
    map: &OccupancyMap,
    goal: State,
    method: Method,
) -> Result<(DistanceField, Vec<usize>)> {
    let (gx, gy) = map
        .cell_at(goal)
        .ok_or(Error::OutOfBounds(goal.x, goal.y))?;
    if !map.cell(gx, gy).is_open() {
        return Err(Error::GoalInWall(goal.x, goal.y));
    }
    let (w, h) = (map.width(), map.height());
    let res = map.resolution();
    let open: Vec<bool> = (0..w * h)
        .map(|i| map.cell(i % w, i / w).is_open())
        .collect();
    let center = map.cell_center(gx, gy);

    // largest seed disc whose covering cells are all open
    let mut seed_cells = 0usize;
    for r in (1..=MAX_SEED_CELLS).rev() {
        if disc_is_open(&open, w, h, gx, gy, r) {
            seed_cells = r;
            break;
        }
    }
    let seed_radius = seed_cells as f64 * res;

    let mut values = vec![f64::INFINITY; w * h];
    let mut known = vec![false; w * h];
    let mut heap = BinaryHeap::new();
    let r = seed_cells as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let (ix, iy) = (gx as i64 + dx, gy as i64 + dy);
            if ix < 0 || iy < 0 || ix >= w as i64 || iy >= h as i64 {
                continue;
            }
            let d = ((dx * dx + dy * dy) as f64).sqrt() * res;
            if d <= seed_radius {
                let idx = iy as usize * w + ix as usize;
                values[idx] = d;
                heap.push(HeapItem { t: d, idx });
            }
        }
    }

    let mut order = Vec::with_capacity(w * h);
    while let Some(HeapItem { t, idx }) = heap.pop() {
        if known[idx] || t > values[idx] {
            continue;
        }
        known[idx] = true;
        order.push(idx);
        let (ix, iy) = ((idx % w) as i64, (idx / w) as i64);
        match method {
            Method::FastMarching => {
                for &(dx, dy) in &STENCIL16[..8] {
                    let (nx, ny) = (ix + dx, iy + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if !open[n] || known[n] {
                        continue;
                    }
                    let t_new =
                        upwind_update(&values, &known, &open, w, h, nx as usize, ny as usize, res);
                    if t_new < values[n] {
                        values[n] = t_new;
                        heap.push(HeapItem { t: t_new, idx: n });
                    }
                }
            }
            Method::Dijkstra16 => {
                for &(dx, dy) in &STENCIL16 {
                    let (nx, ny) = (ix + dx, iy + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if !open[n] || known[n] || !edge_clear(&open, w, ix, iy, dx, dy) {
                        continue;
                    }
                    let t_new = t + ((dx * dx + dy * dy) as f64).sqrt() * res;
                    if t_new < values[n] {
                        values[n] = t_new;
                        heap.push(HeapItem { t: t_new, idx: n });
                    }
                }
            }
        }
    }

    let field = DistanceField {
        map_fingerprint: map.fingerprint(),
        width: w,
        height: h,
        resolution: res,
        goal: center,
        seed_radius,
        method,
        values,
    };
    Ok((field, order))
}

const STENCIL16: [(i64, i64); 16] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
    (2, 1),
    (2, -1),
    (-2, 1),
    (-2, -1),
    (1, 2),
    (1, -2),
    (-1, 2),
    (-1, -2),
];

/// Cells swept by the segment between two stencil neighbours must be open.
fn edge_clear(open: &[bool], w: usize, ix: i64, iy: i64, dx: i64, dy: i64) -> bool {
    let at = |x: i64, y: i64| open[y as usize * w + x as usize];
    match (dx.abs(), dy.abs()) {
        (1, 0) | (0, 1) => true,
        (1, 1) => at(ix + dx, iy) && at(ix, iy + dy),
        (2, 1) => at(ix + dx.signum(), iy) && at(ix + dx.signum(), iy + dy),
        (1, 2) => at(ix, iy + dy.signum()) && at(ix + dx, iy + dy.signum()),
        _ => false,
    }
}

fn disc_is_open(open: &[bool], w: usize, h: usize, gx: usize, gy: usize, r: usize) -> bool {
    // a cell meets the disc when its nearest point to the goal centre is within r cells
    let r = r as i64;
    let rf = r as f64;
    for dy in -(r + 1)..=(r + 1) {
        for dx in -(r + 1)..=(r + 1) {
            let nx = (dx.abs() as f64 - 0.5).max(0.0);
            let ny = (dy.abs() as f64 - 0.5).max(0.0);
            if nx * nx + ny * ny > rf * rf {
                continue;
            }
            let (ix, iy) = (gx as i64 + dx, gy as i64 + dy);
            if ix < 0 || iy < 0 || ix >= w as i64 || iy >= h as i64 {
                return false;
            }
            if !open[iy as usize * w + ix as usize] {
                return false;
            }
        }
    }
    true
}

/// Minimum over the axis-aligned and the diagonal first-order stencils.
fn upwind_update(
    values: &[f64],
    known: &[bool],
    open: &[bool],
    w: usize,
    h: usize,
    ix: usize,
    iy: usize,
    res: f64,
) -> f64 {
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64;
    let get = |x: i64, y: i64| -> f64 {
        if !inside(x, y) {
            return f64::INFINITY;
        }
        let i = y as usize * w + x as usize;
        if known[i] {
            values[i]
        } else {
            f64::INFINITY
        }
    };
    // diagonal neighbours only count when both cells beside the diagonal are open
    let diag = |x: i64, y: i64, dx: i64, dy: i64| -> f64 {
        let side = |a: i64, b: i64| inside(a, b) && open[b as usize * w + a as usize];
        if side(x + dx, y) && side(x, y + dy) {
            get(x + dx, y + dy)
        } else {
            f64::INFINITY
        }
    };
    let (x, y) = (ix as i64, iy as i64);
    let axis = solve_pair(
        get(x - 1, y).min(get(x + 1, y)),
        get(x, y - 1).min(get(x, y + 1)),
        res,
    );
    let rotated = solve_pair(
        diag(x, y, -1, -1).min(diag(x, y, 1, 1)),
        diag(x, y, -1, 1).min(diag(x, y, 1, -1)),
        res * std::f64::consts::SQRT_2,
    );
    axis.min(rotated)
}

/// Upwind solution of `((t − a)⁺)² + ((t − b)⁺)² = h²`.
fn solve_pair(a: f64, b: f64, h: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if !lo.is_finite() {
        return f64::INFINITY;
    }
    if hi - lo >= h {
        return lo + h;
    }
    let diff = hi - lo;
    0.5 * (lo + hi + (2.0 * h * h - diff * diff).sqrt())
}

/// Bilinear interpolation of the field at `s`.
///
/// Inside the exactly seeded disc the Euclidean distance to the goal is
/// returned. Corners that are walls or unreachable are dropped and the
/// remaining weights renormalised; a point whose own cell is unreachable
/// maps to `+∞`.
pub fn oracle_distance(field: &DistanceField, s: State) -> Result<f64> {
    let h = field.resolution;
    let (w, ht) = (field.width, field.height);
    let fx = (s.x / h).floor();
    let fy = (s.y / h).floor();
    if !(fx >= 0.0 && fy >= 0.0 && fx < w as f64 && fy < ht as f64) {
        return Err(Error::OutOfBounds(s.x, s.y));
    }
    let (cx, cy) = (fx as usize, fy as usize);
    if !field.value(cx, cy).is_finite() {
        return Ok(f64::INFINITY);
    }
    let dg = s.dist(field.goal);
    if dg < field.seed_radius {
        return Ok(dg);
    }
    // lower-left centre of the interpolation square
    let gx = s.x / h - 0.5;
    let gy = s.y / h - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let tx = gx - x0;
    let ty = gy - y0;
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (ox, oy, wgt) in [
        (0i64, 0i64, (1.0 - tx) * (1.0 - ty)),
        (1, 0, tx * (1.0 - ty)),
        (0, 1, (1.0 - tx) * ty),
        (1, 1, tx * ty),
    ] {
        let (ix, iy) = (x0 as i64 + ox, y0 as i64 + oy);
        if ix < 0 || iy < 0 || ix >= w as i64 || iy >= ht as i64 {
            continue;
        }
        let v = field.value(ix as usize, iy as usize);
        if v.is_finite() && wgt > 0.0 {
            acc += wgt * v;
            wsum += wgt;
        }
    }
    if wsum <= 0.0 {
        return Ok(field.value(cx, cy));
    }
    Ok(acc / wsum)
}

/// Axis-aligned box `[min, max]` in world units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: State,
    pub max: State,
}

impl Aabb {
    pub fn new(min: State, max: State) -> Self {
        Self { min, max }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        State::new(
            self.min.x + rng.random::<f64>() * (self.max.x - self.min.x),
            self.min.y + rng.random::<f64>() * (self.max.y - self.min.y),
        )
    }
}

/// Largest `|d*(s) − d*(s')| / ‖s − s'‖` over `n_pairs` random pairs in `region`.
pub fn check_lipschitz(
    field: &DistanceField,
    region: Aabb,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let h = field.resolution;
    if !(region.min.x <= region.max.x && region.min.y <= region.max.y) {
        return Err(Error::RegionNotFree);
    }
    let ix0 = (region.min.x / h).floor() as i64;
    let iy0 = (region.min.y / h).floor() as i64;
    let ix1 = (region.max.x / h).ceil() as i64 - 1;
    let iy1 = (region.max.y / h).ceil() as i64 - 1;
    for iy in iy0..=iy1.max(iy0) {
        for ix in ix0..=ix1.max(ix0) {
            if ix < 0 || iy < 0 || ix >= field.width as i64 || iy >= field.height as i64 {
                return Err(Error::RegionNotFree);
            }
            if !field.value(ix as usize, iy as usize).is_finite() {
                return Err(Error::RegionNotFree);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_pairs {
        let a = region.sample(&mut rng);
        let b = region.sample(&mut rng);
        let gap = a.dist(b);
        if gap == 0.0 {
            continue;
        }
        let ratio = (oracle_distance(field, a)? - oracle_distance(field, b)?).abs() / gap;
        worst = worst.max(ratio);
    }
    Ok(worst)
}
