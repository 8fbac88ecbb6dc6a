use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Geometric};

use crate::geometry::{Action, Dataset, State};
use crate::objectives::{GoalPairing, LocalBatch, QuasimetricBatch, ValueBatch};

/// Random access to a dataset for minibatch construction.
pub struct Sampler<'a> {
    data: &'a Dataset,
    /// Per trajectory: `s_0 … s_T` with `s_T` the last successor.
    states: Vec<Vec<State>>,
    /// Cumulative transition counts, for uniform transition sampling.
    cumulative: Vec<usize>,
    hindsight: Geometric,
}

/// One sampled transition with its trajectory position.
#[derive(Clone, Copy, Debug)]
pub struct Draw {
    pub traj: usize,
    pub t: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, hindsight_mean: f64) -> Self {
        let mut states = Vec::with_capacity(data.trajectories.len());
        let mut cumulative = Vec::with_capacity(data.trajectories.len());
        let mut total = 0;
        for tr in &data.trajectories {
            states.push(tr.states());
            total += tr.transitions.len();
            cumulative.push(total);
        }
        let hindsight =
            Geometric::new((1.0 / hindsight_mean).clamp(1e-9, 1.0)).expect("valid probability");
        Self {
            data,
            states,
            cumulative,
            hindsight,
        }
    }

    pub fn n_transitions(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn has_transitions(&self) -> bool {
        self.n_transitions() > 0
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let i = rng.random_range(0..self.n_transitions());
        let traj = self.cumulative.partition_point(|&c| c <= i);
        let start = if traj == 0 {
            0
        } else {
            self.cumulative[traj - 1]
        };
        Draw { traj, t: i - start }
    }

    pub fn state(&self, d: Draw) -> State {
        self.states[d.traj][d.t]
    }

    pub fn next_state(&self, d: Draw) -> State {
        self.states[d.traj][d.t + 1]
    }

    pub fn action(&self, d: Draw) -> Action {
        self.data.trajectories[d.traj].transitions[d.t].a
    }

    /// `s_{t+k}`, truncated at the trajectory end.
    pub fn ahead(&self, d: Draw, k: usize) -> State {
        let s = &self.states[d.traj];
        s[(d.t + k).min(s.len() - 1)]
    }

    /// Later state at a geometric offset of at least one step.
    pub fn hindsight<R: Rng + ?Sized>(&self, d: Draw, rng: &mut R) -> State {
        let k = 1 + self.hindsight.sample(rng) as usize;
        self.ahead(d, k)
    }

    pub fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let d = self.draw(rng);
        self.state(d)
    }

    /// Goal drawn from the (current, same trajectory, random) mixture.
    pub fn mixed_goal<R: Rng + ?Sized>(&self, d: Draw, mix: [f64; 3], rng: &mut R) -> State {
        let total: f64 = mix.iter().sum();
        let u = rng.random::<f64>() * total;
        if u < mix[0] {
            self.state(d)
        } else if u < mix[0] + mix[1] {
            self.hindsight(d, rng)
        } else {
            self.random_state(rng)
        }
    }

    /// Pairs for the spreading and Eikonal terms, with local transitions
    /// when `local` is set.
    pub fn quasimetric_batch<R: Rng + ?Sized>(
        &self,
        n: usize,
        pairing: GoalPairing,
        local: bool,
        rng: &mut R,
    ) -> QuasimetricBatch {
        let mut s = Array2::zeros((n, 2));
        let mut g = Array2::zeros((n, 2));
        if !self.has_transitions() {
            let pairs = &self.data.pairs;
            for r in 0..n {
                let (a, b) = pairs[rng.random_range(0..pairs.len())];
                put(&mut s, r, a);
                put(&mut g, r, b);
            }
            return QuasimetricBatch { s, g, local: None };
        }
        for r in 0..n {
            let d = self.draw(rng);
            put(&mut s, r, self.state(d));
            let goal = match pairing {
                GoalPairing::Independent => self.random_state(rng),
                GoalPairing::Coupled => self.hindsight(d, rng),
            };
            put(&mut g, r, goal);
        }
        let local = local.then(|| {
            let mut ls = Array2::zeros((n, 2));
            let mut ln = Array2::zeros((n, 2));
            let mut lg = Array2::zeros((n, 2));
            for r in 0..n {
                let d = self.draw(rng);
                put(&mut ls, r, self.state(d));
                put(&mut ln, r, self.next_state(d));
                put(&mut lg, r, self.hindsight(d, rng));
            }
            LocalBatch {
                s: ls,
                s_next: ln,
                g: lg,
            }
        });
        QuasimetricBatch { s, g, local }
    }

    pub fn value_batch<R: Rng + ?Sized>(&self, n: usize, mix: [f64; 3], rng: &mut R) -> ValueBatch {
        let mut s = Array2::zeros((n, 2));
        let mut s_next = Array2::zeros((n, 2));
        let mut g = Array2::zeros((n, 2));
        for r in 0..n {
            let d = self.draw(rng);
            put(&mut s, r, self.state(d));
            put(&mut s_next, r, self.next_state(d));
            put(&mut g, r, self.mixed_goal(d, mix, rng));
        }
        ValueBatch { s, s_next, g }
    }

    /// Transitions with a goal and the state `k` steps ahead.
    pub fn policy_batch<R: Rng + ?Sized>(
        &self,
        n: usize,
        k: usize,
        mix: [f64; 3],
        rng: &mut R,
    ) -> PolicyBatch {
        let mut b = PolicyBatch {
            s: Array2::zeros((n, 2)),
            a: Array2::zeros((n, 2)),
            s_next: Array2::zeros((n, 2)),
            s_ahead: Array2::zeros((n, 2)),
            g: Array2::zeros((n, 2)),
        };
        for r in 0..n {
            let d = self.draw(rng);
            put(&mut b.s, r, self.state(d));
            let a = self.action(d);
            b.a[[r, 0]] = a.dx;
            b.a[[r, 1]] = a.dy;
            put(&mut b.s_next, r, self.next_state(d));
            put(&mut b.s_ahead, r, self.ahead(d, k));
            put(&mut b.g, r, self.mixed_goal(d, mix, rng));
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct PolicyBatch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub s_next: Array2<f64>,
    pub s_ahead: Array2<f64>,
    pub g: Array2<f64>,
}

fn put(m: &mut Array2<f64>, r: usize, s: State) {
    m[[r, 0]] = s.x;
    m[[r, 1]] = s.y;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_dataset, GenerateConfig, OccupancyMap, Regime};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn draws_cover_and_stay_in_range() {
        let m = OccupancyMap::preset("maze7").unwrap();
        let mut cfg = GenerateConfig::new(Regime::Stitch, 5, 3);
        cfg.traj_len = 10;
        let data = generate_dataset(&m, &cfg).unwrap();
        let sm = Sampler::new(&data, 20.0);
        assert_eq!(sm.n_transitions(), 50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 50];
        for _ in 0..2000 {
            let d = sm.draw(&mut rng);
            assert!(d.t < 10);
            seen[d.traj * 10 + d.t] = true;
            let h = sm.hindsight(d, &mut rng);
            let states = &data.trajectories[d.traj].states();
            assert!(states[d.t + 1..].contains(&h));
        }
        assert!(seen.iter().all(|&x| x));
    }
}
