//! Maze world: geometry, unit-speed dynamics and offline dataset generation.

mod dataset;
mod map;

pub use dataset::{
    generate_dataset, sample_state_goal_pairs, Dataset, GenerateConfig, Regime, Trajectory,
    NAVIGATE_LEN, STITCH_GOAL_RADIUS, STITCH_LEN,
};
pub use map::{Cell, OccupancyMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Stopping distance kept between a colliding agent and the wall face.
pub const SKIN: f64 = 1e-4;

/// A point in world units. Goals share this type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
}

impl State {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: State) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Commanded velocity in world units per unit time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(self) -> f64 {
        self.dx.hypot(self.dy)
    }

    /// Rescales onto the unit ball; shorter actions are returned unchanged.
    pub fn clamped(self) -> Self {
        let n = self.norm();
        if n > 1.0 {
            Self::new(self.dx / n, self.dy / n)
        } else if n.is_finite() {
            self
        } else {
            Self::default()
        }
    }
}

/// One `(s, a, s')` tuple as produced by [`step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: State,
    pub a: Action,
    pub s_next: State,
    pub collided: bool,
}

/// Integrates `ṡ = a` for `dt` with `‖a‖ ≤ 1`.
///
/// Motion stops [`SKIN`] short of the first wall face the segment meets.
/// Landing on a teleport pad moves the agent to the pad's linked point.
pub fn step(map: &OccupancyMap, s: State, a: Action, dt: f64) -> (State, bool) {
    let (p, collided) = advance(map, s, a, dt);
    (
        teleport(map, p, None::<&mut rand::rngs::ThreadRng>),
        collided,
    )
}

/// Like [`step`], but a teleport lands uniformly within one cell of the
/// linked point.
pub fn step_with_rng<R: Rng + ?Sized>(
    map: &OccupancyMap,
    s: State,
    a: Action,
    dt: f64,
    rng: &mut R,
) -> (State, bool) {
    let (p, collided) = advance(map, s, a, dt);
    (teleport(map, p, Some(rng)), collided)
}

fn teleport<R: Rng + ?Sized>(map: &OccupancyMap, p: State, rng: Option<&mut R>) -> State {
    let Ok(Cell::TeleportPad(id)) = map.cell_kind(p) else {
        return p;
    };
    let dest = map.pad_links()[&id];
    let Some(rng) = rng else {
        return dest;
    };
    let h = map.resolution();
    for _ in 0..32 {
        let q = State::new(
            dest.x + (rng.random::<f64>() - 0.5) * h,
            dest.y + (rng.random::<f64>() - 0.5) * h,
        );
        if matches!(map.cell_kind(q), Ok(Cell::Free)) {
            return q;
        }
    }
    dest
}

/// Straight-line motion with wall stops (no teleport handling).
fn advance(map: &OccupancyMap, s: State, a: Action, dt: f64) -> (State, bool) {
    let a = a.clamped();
    let (vx, vy) = (a.dx * dt, a.dy * dt);
    let len = vx.hypot(vy);
    if len == 0.0 {
        return (s, false);
    }
    match first_wall_hit(map, s, vx, vy) {
        None => (State::new(s.x + vx, s.y + vy), false),
        Some(t_hit) => {
            let t = (t_hit - SKIN / len).max(0.0);
            let p = State::new(s.x + t * vx, s.y + t * vy);
            if map.is_free(p).unwrap_or(false) {
                (p, true)
            } else {
                (s, true)
            }
        }
    }
}

/// Parametric entry time `t ∈ [0, 1]` of the first non-open cell along
/// `s + t·(vx, vy)`, walking the grid cell by cell.
fn first_wall_hit(map: &OccupancyMap, s: State, vx: f64, vy: f64) -> Option<f64> {
    let h = map.resolution();
    let (mut ix, mut iy) = match map.cell_at(s) {
        Some(c) => (c.0 as i64, c.1 as i64),
        None => return Some(0.0),
    };
    let step_x: i64 = if vx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if vy > 0.0 { 1 } else { -1 };
    let next_boundary = |i: i64, v: f64| {
        if v > 0.0 {
            (i + 1) as f64 * h
        } else {
            i as f64 * h
        }
    };
    let mut t_max_x = if vx != 0.0 {
        (next_boundary(ix, vx) - s.x) / vx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if vy != 0.0 {
        (next_boundary(iy, vy) - s.y) / vy
    } else {
        f64::INFINITY
    };
    let t_delta_x = if vx != 0.0 {
        h / vx.abs()
    } else {
        f64::INFINITY
    };
    let t_delta_y = if vy != 0.0 {
        h / vy.abs()
    } else {
        f64::INFINITY
    };
    loop {
        let t = t_max_x.min(t_max_y);
        if t > 1.0 {
            return None;
        }
        if t_max_x < t_max_y {
            ix += step_x;
            t_max_x += t_delta_x;
        } else {
            iy += step_y;
            t_max_y += t_delta_y;
        }
        if ix < 0 || iy < 0 || ix >= map.width() as i64 || iy >= map.height() as i64 {
            return Some(t.max(0.0));
        }
        if !map.cell(ix as usize, iy as usize).is_open() {
            return Some(t.max(0.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn empty() -> OccupancyMap {
        OccupancyMap::empty(12, 1.0).unwrap()
    }

    #[test]
    fn free_space_integrator() {
        let m = empty();
        let (p, c) = step(&m, State::new(2.0, 2.0), Action::new(1.0, 0.0), 0.5);
        assert_eq!((p, c), (State::new(2.5, 2.0), false));
    }

    #[test]
    fn over_speed_is_clamped() {
        let m = empty();
        let s = State::new(2.0, 2.0);
        assert_eq!(
            step(&m, s, Action::new(3.0, 0.0), 0.5),
            step(&m, s, Action::new(1.0, 0.0), 0.5)
        );
    }

    #[test]
    fn stops_at_wall_face_minus_skin() {
        // interior wall column at x ∈ [5, 6)
        let text = "resolution=1.0
#######
#....##
#....##
#######
";
        let m = OccupancyMap::parse(text).unwrap();
        let (p, c) = step(&m, State::new(4.5, 1.5), Action::new(1.0, 0.0), 1.0);
        assert!(c);
        assert!((p.x - (5.0 - SKIN)).abs() < 1e-12, "{p:?}");
        assert_eq!(p.y, 1.5);
        // moving left into the border wall
        let (p, c) = step(&m, State::new(1.3, 2.5), Action::new(-1.0, 0.0), 1.0);
        assert!(c);
        assert!((p.x - (1.0 + SKIN)).abs() < 1e-12);
    }

    #[test]
    fn teleport_pad_moves_to_destination() {
        let m =
            OccupancyMap::parse("resolution=1.0\n######\n#.0..#\n######\nlink 0 4.5 1.5").unwrap();
        let (p, c) = step(&m, State::new(1.5, 1.5), Action::new(1.0, 0.0), 1.0);
        assert!(!c);
        assert_eq!(p, State::new(4.5, 1.5));
        let mut rng = rand::rng();
        let (q, _) = step_with_rng(
            &m,
            State::new(1.5, 1.5),
            Action::new(1.0, 0.0),
            1.0,
            &mut rng,
        );
        assert!((q.x - 4.5).abs() <= 0.5 && (q.y - 1.5).abs() <= 0.5);
        assert_eq!(m.cell_kind(q).unwrap(), Cell::Free);
    }

    proptest! {
        #[test]
        fn never_enters_a_wall(x in 1.0f64..9.0, y in 1.0f64..6.0, dx in -3.0f64..3.0, dy in -3.0f64..3.0, dt in 0.0f64..3.0) {
            let m = OccupancyMap::preset("uwall").unwrap();
            let s = State::new(x, y);
            prop_assume!(m.is_free(s).unwrap());
            let (p, _) = step(&m, s, Action::new(dx, dy), dt);
            prop_assert!(m.is_free(p).unwrap());
        }

        #[test]
        fn clamp_is_idempotent(dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let m = OccupancyMap::preset("uwall").unwrap();
            let s = State::new(8.5, 4.5);
            let a = Action::new(dx, dy);
            let n = a.norm().max(1.0);
            let (p, c) = step(&m, s, a, 1.0);
            let (q, d) = step(&m, s, Action::new(dx / n, dy / n), 1.0);
            prop_assert!(p.dist(q) < 1e-9);
            prop_assert_eq!(c, d);
        }
    }
}
