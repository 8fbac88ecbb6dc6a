//! Rollouts, success and collision rates, and value accuracy against the oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::geometry::{step_with_rng, Action, OccupancyMap, State};
use crate::oracle::{oracle_distance, DistanceField};
use crate::quasimetric::StateDistance;

/// Anything that maps `(s, g)` to an action.
pub trait Actor: Sync {
    fn act(&self, map: &OccupancyMap, s: State, g: State, dt: f64) -> Action;
}

impl Actor for Checkpoint {
    fn act(&self, map: &OccupancyMap, s: State, g: State, dt: f64) -> Action {
        Checkpoint::act(self, map, s, g, dt)
    }
}

/// Closure actors ignore the map and step size.
pub struct FnActor<F>(pub F);

impl<F: Fn(State, State) -> Action + Sync> Actor for FnActor<F> {
    fn act(&self, _map: &OccupancyMap, s: State, g: State, _dt: f64) -> Action {
        (self.0)(s, g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub reached: bool,
    pub steps: usize,
    pub collision_steps: usize,
    pub final_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_goals: usize,
    pub episodes_per_goal: usize,
    pub max_steps: usize,
    pub success_radius: f64,
    pub dt: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_goals: 5,
            episodes_per_goal: 50,
            max_steps: 200,
            success_radius: 0.5,
            dt: 1.0,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(
                "success_radius and dt must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Runs one episode. The RNG only drives teleport jitter.
pub fn rollout<A: Actor + ?Sized, R: Rng + ?Sized>(
    map: &OccupancyMap,
    actor: &A,
    start: State,
    goal: State,
    max_steps: usize,
    success_radius: f64,
    dt: f64,
    rng: &mut R,
) -> EpisodeResult {
    let mut s = start;
    let mut collision_steps = 0;
    for t in 0..max_steps {
        if s.dist(goal) <= success_radius {
            return EpisodeResult {
                reached: true,
                steps: t,
                collision_steps,
                final_distance: s.dist(goal),
            };
        }
        let a = actor.act(map, s, goal, dt);
        let (next, collided) = step_with_rng(map, s, a, dt, rng);
        collision_steps += usize::from(collided);
        s = next;
    }
    let d = s.dist(goal);
    EpisodeResult {
        reached: d <= success_radius,
        steps: max_steps,
        collision_steps,
        final_distance: d,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalMetrics {
    pub goal: State,
    pub success_rate: f64,
    pub collision_rate: f64,
}

/// Rates are percentages. κ pools timesteps over all episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    pub collision_rate: f64,
    pub episodes: usize,
    pub total_steps: usize,
    pub per_goal: Vec<GoalMetrics>,
}

impl Metrics {
    pub fn from_episodes(goals: &[State], episodes: &[EpisodeResult]) -> Self {
        let per = if goals.is_empty() {
            0
        } else {
            episodes.len() / goals.len()
        };
        let per_goal = goals
            .iter()
            .enumerate()
            .map(|(i, &goal)| {
                let (success_rate, collision_rate) = rates(&episodes[i * per..(i + 1) * per]);
                GoalMetrics {
                    goal,
                    success_rate,
                    collision_rate,
                }
            })
            .collect();
        let (success_rate, collision_rate) = rates(episodes);
        Self {
            success_rate,
            collision_rate,
            episodes: episodes.len(),
            total_steps: episodes.iter().map(|e| e.steps).sum(),
            per_goal,
        }
    }
}

fn rates(eps: &[EpisodeResult]) -> (f64, f64) {
    if eps.is_empty() {
        return (0.0, 0.0);
    }
    let reached = eps.iter().filter(|e| e.reached).count();
    let steps: usize = eps.iter().map(|e| e.steps).sum();
    let coll: usize = eps.iter().map(|e| e.collision_steps).sum();
    let kappa = if steps == 0 {
        0.0
    } else {
        100.0 * coll as f64 / steps as f64
    };
    (100.0 * reached as f64 / eps.len() as f64, kappa)
}

fn sample_free_point<R: Rng + ?Sized>(
    map: &OccupancyMap,
    free: &[(usize, usize)],
    rng: &mut R,
) -> State {
    let (ix, iy) = free[rng.random_range(0..free.len())];
    let h = map.resolution();
    State::new(
        (ix as f64 + rng.random::<f64>()) * h,
        (iy as f64 + rng.random::<f64>()) * h,
    )
}

/// Goals and, per goal, episode starts drawn from the free area.
///
/// Goals come from stream 0 of `seed`; episode `i` uses stream `i + 1` for
/// its start and teleport jitter.
pub fn evaluate<A: Actor + ?Sized>(
    actor: &A,
    map: &OccupancyMap,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    cfg.validate()?;
    let free = map.free_cells();
    if free.is_empty() {
        return Err(Error::NoFreeCell);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let goals: Vec<State> = (0..cfg.n_goals)
        .map(|_| sample_free_point(map, &free, &mut rng))
        .collect();
    let per = cfg.episodes_per_goal;
    let episodes = map_indexed(cfg.exec, cfg.n_goals * per, |i| {
        let goal = goals[i / per];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let mut start = sample_free_point(map, &free, &mut rng);
        for _ in 0..64 {
            if start.dist(goal) > cfg.success_radius {
                break;
            }
            start = sample_free_point(map, &free, &mut rng);
        }
        rollout(
            map,
            actor,
            start,
            goal,
            cfg.max_steps,
            cfg.success_radius,
            cfg.dt,
            &mut rng,
        )
    });
    Ok(Metrics::from_episodes(&goals, &episodes))
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len();
    if n == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MeanStd { mean, std }
}

/// Per-seed metrics reduced across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub success_rate: MeanStd,
    pub collision_rate: MeanStd,
    pub seeds: usize,
}

pub fn summarize(per_seed: &[Metrics]) -> SeedSummary {
    let r: Vec<f64> = per_seed.iter().map(|m| m.success_rate).collect();
    let k: Vec<f64> = per_seed.iter().map(|m| m.collision_rate).collect();
    SeedSummary {
        success_rate: mean_std(&r),
        collision_rate: mean_std(&k),
        seeds: per_seed.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueAccuracy {
    pub spearman: f64,
    /// Set when either ranking is constant; `spearman` is then 0.
    pub degenerate: bool,
    /// `‖c·d_θ − d*‖ / ‖d*‖` with the least-squares scale `c`.
    pub rel_error: f64,
    pub scale: f64,
    /// Largest `|d_θ(a, g) − d_θ(b, g)| / ‖a − b‖` with `a`, `b` in one free cell.
    pub lipschitz_ratio: f64,
    /// Mean `|‖∇_s d_θ‖ − 1|`.
    pub gradient_error: f64,
    pub n_pairs: usize,
}

/// Average ranks with ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Rank correlation, or `None` when either input has no spread.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Least-squares scale and the relative error after applying it.
pub fn scale_fit(learned: &[f64], truth: &[f64]) -> (f64, f64) {
    let num: f64 = learned.iter().zip(truth).map(|(a, b)| a * b).sum();
    let den: f64 = learned.iter().map(|a| a * a).sum();
    let c = if den > 0.0 { num / den } else { 0.0 };
    let err: f64 = learned
        .iter()
        .zip(truth)
        .map(|(a, b)| (c * a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = truth.iter().map(|b| b * b).sum::<f64>().sqrt();
    (c, if norm > 0.0 { err / norm } else { 0.0 })
}

/// Compares `model` with the oracle on `n_pairs` random `(s, g)` pairs.
///
/// Each pair takes a goal from `fields` in turn and a state uniform over the
/// free area with a finite oracle distance.
pub fn value_accuracy<M: StateDistance + ?Sized>(
    model: &M,
    map: &OccupancyMap,
    fields: &[DistanceField],
    n_pairs: usize,
    seed: u64,
) -> Result<ValueAccuracy> {
    if fields.is_empty() {
        return Err(Error::InvalidConfig(
            "value accuracy needs at least one field".into(),
        ));
    }
    let free = map.free_cells();
    if free.is_empty() {
        return Err(Error::NoFreeCell);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learned = Vec::with_capacity(n_pairs);
    let mut truth = Vec::with_capacity(n_pairs);
    let mut grad_err = 0.0;
    let mut lip = 0.0f64;
    let h = map.resolution();
    for i in 0..n_pairs {
        let field = &fields[i % fields.len()];
        let g = field.goal();
        let (s, d_star) = loop {
            let s = sample_free_point(map, &free, &mut rng);
            let d = oracle_distance(field, s)?;
            if d.is_finite() {
                break (s, d);
            }
        };
        learned.push(model.distance(s, g));
        truth.push(d_star);
        let gr = model.grad_state(s, g);
        grad_err += (gr[0].hypot(gr[1]) - 1.0).abs();
        // second point in the same cell
        let (cx, cy) = ((s.x / h).floor(), (s.y / h).floor());
        let b = State::new(
            (cx + rng.random::<f64>()) * h,
            (cy + rng.random::<f64>()) * h,
        );
        let gap = s.dist(b);
        if gap > 1e-9 {
            lip = lip.max((model.distance(s, g) - model.distance(b, g)).abs() / gap);
        }
    }
    let rho = spearman(&learned, &truth);
    let (scale, rel_error) = scale_fit(&learned, &truth);
    Ok(ValueAccuracy {
        spearman: rho.unwrap_or(0.0),
        degenerate: rho.is_none(),
        rel_error,
        scale,
        lipschitz_ratio: lip,
        gradient_error: if n_pairs == 0 {
            0.0
        } else {
            grad_err / n_pairs as f64
        },
        n_pairs,
    })
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub spearman: f64,
    pub rel_error: f64,
    pub lipschitz_ratio: f64,
}

pub const METRICS_HEADER: &str =
    "run_id,seed,step,success_rate,collision_rate,spearman,rel_error,lipschitz_ratio";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.run_id,
            r.seed,
            r.step,
            r.success_rate,
            r.collision_rate,
            r.spearman,
            r.rel_error,
            r.lipschitz_ratio
        ));
    }
    out
}

/// Parses a table written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "expected metrics header, got {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(Error::Format(format!(
                    "metrics row {}: expected 8 fields, got {}",
                    i + 1,
                    f.len()
                )));
            }
            let bad = |what: &str| Error::Format(format!("metrics row {}: bad {what}", i + 1));
            let float = |j: usize, what: &str| f[j].parse::<f64>().map_err(|_| bad(what));
            Ok(MetricsRow {
                run_id: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad("seed"))?,
                step: f[2].parse().map_err(|_| bad("step"))?,
                success_rate: float(3, "success_rate")?,
                collision_rate: float(4, "collision_rate")?,
                spearman: float(5, "spearman")?,
                rel_error: float(6, "rel_error")?,
                lipschitz_ratio: float(7, "lipschitz_ratio")?,
            })
        })
        .collect()
}

/// Last row and the row with the highest success rate (earliest on ties).
pub fn best_and_last(rows: &[MetricsRow]) -> Option<(&MetricsRow, &MetricsRow)> {
    let last = rows.last()?;
    let best = rows.iter().fold(&rows[0], |b, r| {
        if r.success_rate > b.success_rate {
            r
        } else {
            b
        }
    });
    Some((best, last))
}
