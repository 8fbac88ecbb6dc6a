//! Offline datasets: noisy oracle-following trajectories and bare
//! state/goal pairs.
//!
//! Binary layout (all integers u64, all floats f64, little-endian):
//!
//! ```text
//! "EQRLDS01" | regime u8 | seed | n_traj
//!   per trajectory: n_goals | (start_index, gx, gy)* | n_steps | (sx, sy, ax, ay, nx, ny, collided u8)*
//! n_pairs | (sx, sy, gx, gy)*
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::geometry::{step_with_rng, Action, Cell, OccupancyMap, State, Transition};
use crate::oracle::{solve_distance_field, DistanceField, Method};

const MAGIC: &[u8; 8] = b"EQRLDS01";

/// Default episode length for the navigate regime.
pub const NAVIGATE_LEN: usize = 200;
/// Default episode length for the stitch regime.
pub const STITCH_LEN: usize = 25;
/// Stitch goals lie within this oracle distance of the current state.
pub const STITCH_GOAL_RADIUS: f64 = 5.0;
const GOAL_RETRIES: usize = 200;
const HEADINGS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Navigate,
    Stitch,
    TrajectoryFree,
}

impl Regime {
    fn code(self) -> u8 {
        match self {
            Regime::Navigate => 0,
            Regime::Stitch => 1,
            Regime::TrajectoryFree => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Regime::Navigate),
            1 => Ok(Regime::Stitch),
            2 => Ok(Regime::TrajectoryFree),
            _ => Err(Error::Format(format!("unknown regime code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Navigate => "navigate",
            Regime::Stitch => "stitch",
            Regime::TrajectoryFree => "trajectory_free",
        }
    }
}

/// One episode. `goals` lists the commanded goal and the step index from
/// which it was pursued.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub goals: Vec<(u64, State)>,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    /// `s_0, …, s_T` (one more entry than transitions).
    pub fn states(&self) -> Vec<State> {
        let mut out: Vec<State> = self.transitions.iter().map(|t| t.s).collect();
        if let Some(last) = self.transitions.last() {
            out.push(last.s_next);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub regime: Regime,
    pub trajectories: Vec<Trajectory>,
    pub pairs: Vec<(State, State)>,
    pub seed: u64,
}

impl Dataset {
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty() && self.pairs.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.n_transitions() * 56 + self.pairs.len() * 32);
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u8(self.regime.code())?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u64::<LittleEndian>(self.trajectories.len() as u64)?;
        for traj in &self.trajectories {
            w.write_u64::<LittleEndian>(traj.goals.len() as u64)?;
            for (i, g) in &traj.goals {
                w.write_u64::<LittleEndian>(*i)?;
                w.write_f64::<LittleEndian>(g.x)?;
                w.write_f64::<LittleEndian>(g.y)?;
            }
            w.write_u64::<LittleEndian>(traj.transitions.len() as u64)?;
            for t in &traj.transitions {
                for v in [t.s.x, t.s.y, t.a.dx, t.a.dy, t.s_next.x, t.s_next.y] {
                    w.write_f64::<LittleEndian>(v)?;
                }
                w.write_u8(u8::from(t.collided))?;
            }
        }
        w.write_u64::<LittleEndian>(self.pairs.len() as u64)?;
        for (s, g) in &self.pairs {
            for v in [s.x, s.y, g.x, g.y] {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an EQRLDS01 dataset".into()));
        }
        let regime = Regime::from_code(r.read_u8()?)?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n_traj = r.read_u64::<LittleEndian>()? as usize;
        let mut trajectories = Vec::with_capacity(n_traj.min(1 << 20));
        for _ in 0..n_traj {
            let n_goals = r.read_u64::<LittleEndian>()? as usize;
            let mut goals = Vec::with_capacity(n_goals.min(1 << 20));
            for _ in 0..n_goals {
                let i = r.read_u64::<LittleEndian>()?;
                let x = r.read_f64::<LittleEndian>()?;
                let y = r.read_f64::<LittleEndian>()?;
                goals.push((i, State::new(x, y)));
            }
            let n = r.read_u64::<LittleEndian>()? as usize;
            let mut transitions = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let mut v = [0.0; 6];
                for x in &mut v {
                    *x = r.read_f64::<LittleEndian>()?;
                }
                let collided = r.read_u8()? != 0;
                transitions.push(Transition {
                    s: State::new(v[0], v[1]),
                    a: Action::new(v[2], v[3]),
                    s_next: State::new(v[4], v[5]),
                    collided,
                });
            }
            trajectories.push(Trajectory { goals, transitions });
        }
        let n_pairs = r.read_u64::<LittleEndian>()? as usize;
        let mut pairs = Vec::with_capacity(n_pairs.min(1 << 20));
        for _ in 0..n_pairs {
            let mut v = [0.0; 4];
            for x in &mut v {
                *x = r.read_f64::<LittleEndian>()?;
            }
            pairs.push((State::new(v[0], v[1]), State::new(v[2], v[3])));
        }
        Ok(Self {
            regime,
            trajectories,
            pairs,
            seed,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "regime": self.regime,
            "seed": self.seed,
            "n_trajectories": self.trajectories.len(),
            "n_transitions": self.n_transitions(),
            "n_pairs": self.pairs.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub regime: Regime,
    pub n_traj: usize,
    pub traj_len: usize,
    /// Standard deviation of the Gaussian action noise.
    pub noise: f64,
    pub seed: u64,
    pub dt: f64,
    /// A commanded goal counts as reached within this distance.
    pub success_radius: f64,
    /// Target cell size of the oracle grid in world units.
    pub oracle_cell: f64,
    pub exec: Exec,
}

impl GenerateConfig {
    pub fn new(regime: Regime, n_traj: usize, seed: u64) -> Self {
        Self {
            regime,
            n_traj,
            traj_len: match regime {
                Regime::Stitch => STITCH_LEN,
                _ => NAVIGATE_LEN,
            },
            noise: 0.2,
            seed,
            dt: 1.0,
            success_radius: 0.5,
            oracle_cell: 0.25,
            exec: Exec::default(),
        }
    }
}

/// Refinement factor that brings the oracle grid to about `cell` world units.
pub(crate) fn refine_factor(map: &OccupancyMap, cell: f64) -> usize {
    (map.resolution() / cell).ceil().max(1.0) as usize
}

/// Uniform point over plain free cells.
pub(crate) fn sample_free<R: Rng + ?Sized>(
    map: &OccupancyMap,
    free: &[(usize, usize)],
    rng: &mut R,
) -> State {
    let (ix, iy) = free[rng.random_range(0..free.len())];
    let h = map.resolution();
    loop {
        let p = State::new(
            (ix as f64 + rng.random::<f64>()) * h,
            (iy as f64 + rng.random::<f64>()) * h,
        );
        // random() is in [0, 1) so p is always inside the cell; guard rounding anyway
        if map.cell_at(p) == Some((ix, iy)) {
            return p;
        }
    }
}

/// Generates trajectories in which a noisy controller follows the oracle
/// field toward a sequence of goals. Each episode uses its own RNG stream
/// derived from `(seed, episode index)`.
pub fn generate_dataset(map: &OccupancyMap, cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.regime == Regime::TrajectoryFree {
        return Ok(sample_state_goal_pairs(map, cfg.n_traj, cfg.seed));
    }
    let free = map.free_cells();
    let fine = map.refined(refine_factor(map, cfg.oracle_cell));
    let episodes = map_indexed(cfg.exec, cfg.n_traj, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        episode(map, &fine, &free, cfg, &mut rng)
    });
    let trajectories = episodes.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        regime: cfg.regime,
        trajectories,
        pairs: Vec::new(),
        seed: cfg.seed,
    })
}

fn pick_goal<R: Rng + ?Sized>(
    map: &OccupancyMap,
    fine: &OccupancyMap,
    free: &[(usize, usize)],
    from: State,
    cfg: &GenerateConfig,
    rng: &mut R,
) -> Result<(State, DistanceField)> {
    // unit-speed travel times without teleports are symmetric, so one solve
    // from the current state ranks every candidate goal
    let from_field = solve_distance_field(fine, from, Method::FastMarching)?;
    for _ in 0..GOAL_RETRIES {
        let g = sample_free(map, free, rng);
        let d = from_field.distance(g)?;
        let ok = match cfg.regime {
            Regime::Stitch => {
                d.is_finite() && d <= STITCH_GOAL_RADIUS && g.dist(from) > cfg.success_radius
            }
            _ => d.is_finite() && g.dist(from) > cfg.success_radius,
        };
        if ok {
            let field = solve_distance_field(fine, g, Method::FastMarching)?;
            // the oracle snaps goals to fine cell centres; use the same point
            return Ok((field.goal(), field));
        }
    }
    Err(Error::UnreachableGoalSample(GOAL_RETRIES))
}

/// Heading that most reduces the oracle distance after one real step.
pub(crate) fn oracle_heading(
    map: &OccupancyMap,
    field: &DistanceField,
    s: State,
    goal: State,
    dt: f64,
) -> Action {
    let mut best = Action::default();
    let mut best_d = f64::INFINITY;
    let direct = {
        let (dx, dy) = (goal.x - s.x, goal.y - s.y);
        let n = dx.hypot(dy);
        if n > 0.0 {
            // short of a full step the direct action lands on the goal itself
            let k = n.max(dt);
            Some(Action::new(dx / k, dy / k))
        } else {
            None
        }
    };
    let candidates = (0..HEADINGS)
        .map(|k| {
            let th = k as f64 * std::f64::consts::TAU / HEADINGS as f64;
            Action::new(th.cos(), th.sin())
        })
        .chain(direct);
    for a in candidates {
        let (p, _) = crate::geometry::step(map, s, a, dt);
        let d = if p.dist(goal) <= dt && direct.is_some() {
            // inside one step of the goal straight-line distance is exact
            p.dist(goal)
        } else {
            field.distance(p).unwrap_or(f64::INFINITY)
        };
        if d < best_d {
            best_d = d;
            best = a;
        }
    }
    best
}

fn episode<R: Rng + ?Sized>(
    map: &OccupancyMap,
    fine: &OccupancyMap,
    free: &[(usize, usize)],
    cfg: &GenerateConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut s = sample_free(map, free, rng);
    let (mut goal, mut field) = pick_goal(map, fine, free, s, cfg, rng)?;
    let mut traj = Trajectory {
        goals: vec![(0, goal)],
        transitions: Vec::with_capacity(cfg.traj_len),
    };
    for t in 0..cfg.traj_len {
        let heading = oracle_heading(map, &field, s, goal, cfg.dt);
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        let a = Action::new(heading.dx + cfg.noise * nx, heading.dy + cfg.noise * ny).clamped();
        let (s_next, collided) = step_with_rng(map, s, a, cfg.dt, rng);
        traj.transitions.push(Transition {
            s,
            a,
            s_next,
            collided,
        });
        s = s_next;
        if s.dist(goal) <= cfg.success_radius && t + 1 < cfg.traj_len {
            (goal, field) = pick_goal(map, fine, free, s, cfg, rng)?;
            traj.goals.push((t as u64 + 1, goal));
        }
    }
    Ok(traj)
}

/// `n` independent `(state, goal)` pairs drawn uniformly over the free area
/// by rejection sampling.
pub fn sample_state_goal_pairs(map: &OccupancyMap, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xm, ym) = map.extent();
    let mut draw = || loop {
        let p = State::new(rng.random::<f64>() * xm, rng.random::<f64>() * ym);
        if matches!(map.cell_kind(p), Ok(Cell::Free)) {
            return p;
        }
    };
    let pairs = (0..n).map(|_| (draw(), draw())).collect();
    Dataset {
        regime: Regime::TrajectoryFree,
        trajectories: Vec::new(),
        pairs,
        seed,
    }
}
