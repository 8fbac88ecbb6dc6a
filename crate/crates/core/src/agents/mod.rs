//! Agents: model bundles, training, checkpoints and action selection.

mod checkpoint;
mod sampler;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use sampler::Sampler;
pub use train::{initialise, resume, train, Phase, TrainLog};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Action, OccupancyMap, State};
use crate::nn::{Activation, Adam, Mlp};
use crate::quasimetric::{
    EncoderSpec, GoalRepresentation, LowLevelValue, QuasimetricModel, StateDistance, StateNorm,
};

/// Which actor structure sits on top of the quasimetric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// One policy `π(a | s, g)` with advantage `d(s, g) − d(s′, g)`.
    Flat,
    /// Two policies sharing the single quasimetric; subgoals are raw states.
    Hierarchical,
    /// Quasimetric high level plus low-level value and goal representation.
    /// With the `eik_qrl` variant this is Eik-HiQRL; with `qrl` it is the
    /// unconstrained ablation.
    HiQrl,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Flat => "flat",
            AgentKind::Hierarchical => "hierarchical",
            AgentKind::HiQrl => "hiqrl",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self, AgentKind::Flat)
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(AgentKind::Flat),
            "hierarchical" | "hier" => Ok(AgentKind::Hierarchical),
            "hiqrl" => Ok(AgentKind::HiQrl),
            other => Err(Error::InvalidConfig(format!(
                "unknown agent kind {other:?}"
            ))),
        }
    }
}

/// Coordinate projection onto the abstract state used by the high level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abstraction {
    pub selector: Vec<usize>,
}

impl Abstraction {
    pub fn identity() -> Self {
        Self {
            selector: vec![0, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 2];
        for &i in &self.selector {
            if i >= 2 || seen[i] {
                return Err(Error::InvalidConfig(format!(
                    "abstraction selector {:?} is invalid",
                    self.selector
                )));
            }
            seen[i] = true;
        }
        if self.selector.is_empty() {
            return Err(Error::InvalidConfig("abstraction selector is empty".into()));
        }
        Ok(())
    }

    pub fn project(&self, s: State) -> Vec<f64> {
        let a = s.to_array();
        self.selector.iter().map(|&i| a[i]).collect()
    }

    pub fn dim(&self) -> usize {
        self.selector.len()
    }
}

impl Default for Abstraction {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub value_hidden: [usize; 3],
    pub actor_hidden: [usize; 3],
    pub repr_hidden: [usize; 3],
    pub n_groups: usize,
    pub group_size: usize,
    pub z_dim: usize,
    pub activation: Activation,
    pub abstraction: Abstraction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Widths 64, latent 64 in 8 groups of 8.
    pub fn desk() -> Self {
        Self {
            value_hidden: [64; 3],
            actor_hidden: [64; 3],
            repr_hidden: [64; 3],
            n_groups: 8,
            group_size: 8,
            z_dim: 10,
            activation: Activation::Silu,
            abstraction: Abstraction::identity(),
        }
    }

    /// Widths 512, latent 512 in 64 groups of 8.
    pub fn paper() -> Self {
        Self {
            value_hidden: [512; 3],
            actor_hidden: [512; 3],
            repr_hidden: [512; 3],
            n_groups: 64,
            group_size: 8,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidConfig(format!(
                "unknown model preset {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.group_size == 0 || self.z_dim == 0 {
            return Err(Error::InvalidConfig("latent sizes must be positive".into()));
        }
        let widths = self
            .value_hidden
            .iter()
            .chain(&self.actor_hidden)
            .chain(&self.repr_hidden);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(
                "hidden widths must be positive".into(),
            ));
        }
        self.abstraction.validate()
    }
}

/// All learnable blocks of an agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub quasimetric: QuasimetricModel,
    pub low_value: LowLevelValue,
    pub goal_repr: GoalRepresentation,
    pub policy_high: Mlp,
    pub policy_low: Mlp,
}

/// Optimiser state for each independently updated group of blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub quasimetric: Adam,
    pub value: Adam,
    pub policy_high: Adam,
    pub policy_low: Adam,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(
        kind: AgentKind,
        cfg: &ModelConfig,
        norm: StateNorm,
        rng: &mut R,
    ) -> Self {
        let ab = cfg.abstraction.dim();
        let spec = EncoderSpec {
            input_dim: ab,
            hidden: cfg.value_hidden,
            n_groups: cfg.n_groups,
            group_size: cfg.group_size,
            activation: cfg.activation,
        };
        let quasimetric = QuasimetricModel::new(&spec, norm, rng);
        let low_value =
            LowLevelValue::new(2, cfg.z_dim, cfg.value_hidden, cfg.activation, norm, rng);
        let goal_repr =
            GoalRepresentation::new(2, cfg.z_dim, cfg.repr_hidden, cfg.activation, norm, rng);
        let sub_dim = Self::subgoal_dim(kind, cfg);
        let h = cfg.actor_hidden;
        let (hs, hc) = crate::quasimetric::norm_vectors(norm, ab, 0);
        let mut high_shift = hs.clone();
        high_shift.extend(&hs);
        let mut high_scale = hc.clone();
        high_scale.extend(&hc);
        let policy_high = Mlp::new(
            &[2 * ab, h[0], h[1], h[2], sub_dim],
            cfg.activation,
            1e-2,
            rng,
        )
        .with_input_norm(&high_shift, &high_scale);
        let (mut ls, mut lc) = crate::quasimetric::norm_vectors(norm, 2, 0);
        if kind == AgentKind::HiQrl {
            ls.extend(std::iter::repeat_n(0.0, sub_dim));
            lc.extend(std::iter::repeat_n(1.0, sub_dim));
        } else {
            let (gs, gc) = crate::quasimetric::norm_vectors(norm, 2, 0);
            ls.extend(gs);
            lc.extend(gc);
        }
        let policy_low = Mlp::new(
            &[2 + sub_dim, h[0], h[1], h[2], 2],
            cfg.activation,
            1e-2,
            rng,
        )
        .with_input_norm(&ls, &lc);
        Self {
            quasimetric,
            low_value,
            goal_repr,
            policy_high,
            policy_low,
        }
    }

    /// Width of what the low-level policy is conditioned on besides `s`.
    pub fn subgoal_dim(kind: AgentKind, cfg: &ModelConfig) -> usize {
        match kind {
            AgentKind::HiQrl => cfg.z_dim,
            _ => 2,
        }
    }

    pub fn optimizers(&self, lr: f64) -> Optimizers {
        let q = self
            .quasimetric
            .encoder
            .blocks()
            .iter()
            .chain(std::iter::once(&self.quasimetric.alpha_raw));
        let v = self
            .low_value
            .net
            .blocks()
            .iter()
            .chain(self.goal_repr.net.blocks());
        Optimizers {
            quasimetric: Adam::new(lr, q),
            value: Adam::new(lr, v),
            policy_high: Adam::new(lr, self.policy_high.blocks()),
            policy_low: Adam::new(lr, self.policy_low.blocks()),
        }
    }

    /// Named parameter blocks in a fixed order.
    pub fn named_blocks(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        let nets: [(&str, &Mlp); 6] = [
            ("quasimetric.encoder", &self.quasimetric.encoder),
            ("low_value.net", &self.low_value.net),
            ("low_value.target", &self.low_value.target),
            ("goal_repr.net", &self.goal_repr.net),
            ("policy_high", &self.policy_high),
            ("policy_low", &self.policy_low),
        ];
        for (prefix, m) in nets {
            for (i, b) in m.blocks().iter().enumerate() {
                let kind = if i % 2 == 0 { "w" } else { "b" };
                out.push((format!("{prefix}.{}.{kind}", i / 2), b));
            }
        }
        out.push(("quasimetric.alpha_raw".into(), &self.quasimetric.alpha_raw));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        out.extend(self.quasimetric.encoder.blocks_mut().iter_mut());
        out.extend(self.low_value.net.blocks_mut().iter_mut());
        out.extend(self.low_value.target.blocks_mut().iter_mut());
        out.extend(self.goal_repr.net.blocks_mut().iter_mut());
        out.extend(self.policy_high.blocks_mut().iter_mut());
        out.extend(self.policy_low.blocks_mut().iter_mut());
        out.push(&mut self.quasimetric.alpha_raw);
        out
    }

    /// FNV-1a over a group of blocks, for cheap change detection.
    pub fn hash_blocks(blocks: &[&Array2<f64>]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in blocks {
            for x in b.iter() {
                for byte in x.to_le_bytes() {
                    h = (h ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn value_hash(&self) -> u64 {
        let mut blocks: Vec<&Array2<f64>> = Vec::new();
        blocks.extend(self.quasimetric.encoder.blocks());
        blocks.push(&self.quasimetric.alpha_raw);
        blocks.extend(self.low_value.net.blocks());
        blocks.extend(self.low_value.target.blocks());
        blocks.extend(self.goal_repr.net.blocks());
        Self::hash_blocks(&blocks)
    }

    pub fn policy_hash(&self) -> u64 {
        let mut blocks: Vec<&Array2<f64>> = Vec::new();
        blocks.extend(self.policy_high.blocks());
        blocks.extend(self.policy_low.blocks());
        Self::hash_blocks(&blocks)
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("shape")
}

fn action_from(out: &Array2<f64>) -> Action {
    Action::new(out[[0, 0]], out[[0, 1]]).clamped()
}

impl Checkpoint {
    /// Deterministic action of a flat agent.
    pub fn act_flat(&self, s: State, g: State) -> Result<Action> {
        if self.kind != AgentKind::Flat {
            return Err(Error::WrongAgentKind {
                expected: "flat".into(),
                got: self.kind.name().into(),
            });
        }
        let x = row(&[s.x, s.y, g.x, g.y]);
        Ok(action_from(&self.bundle.policy_low.forward_plain(x.view())))
    }

    /// Subgoal (state or embedding) proposed by the high-level policy.
    pub fn subgoal(&self, s: State, g: State) -> Result<Vec<f64>> {
        if !self.kind.is_hierarchical() {
            return Err(Error::WrongAgentKind {
                expected: "hierarchical".into(),
                got: self.kind.name().into(),
            });
        }
        let ab = &self.model.abstraction;
        let mut x = ab.project(s);
        x.extend(ab.project(g));
        let mut z = self
            .bundle
            .policy_high
            .forward_plain(row(&x).view())
            .into_raw_vec_and_offset()
            .0;
        if self.kind == AgentKind::HiQrl {
            let c = self.bundle.goal_repr.norm_constant();
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            z.iter_mut().for_each(|v| *v *= c / n);
        }
        Ok(z)
    }

    /// Deterministic action of a hierarchical agent.
    pub fn act_hier(&self, s: State, g: State) -> Result<Action> {
        let z = self.subgoal(s, g)?;
        let mut x = vec![s.x, s.y];
        x.extend(z);
        Ok(action_from(
            &self.bundle.policy_low.forward_plain(row(&x).view()),
        ))
    }

    /// One descent step `s − η·∇_s d(s, g)` clipped to the map extent.
    pub fn gradient_controller(&self, map: &OccupancyMap, s: State, g: State, eta: f64) -> State {
        gradient_step(&self.bundle.quasimetric, map, s, g, eta)
    }

    /// Action used at evaluation: the trained actor, or gradient descent
    /// on `d` when no policy was trained.
    pub fn act(&self, map: &OccupancyMap, s: State, g: State, dt: f64) -> Action {
        let out = if !self.policies_trained {
            let next = self.gradient_controller(map, s, g, dt);
            Ok(Action::new((next.x - s.x) / dt, (next.y - s.y) / dt).clamped())
        } else if self.kind == AgentKind::Flat {
            self.act_flat(s, g)
        } else {
            self.act_hier(s, g)
        };
        out.unwrap_or_default()
    }
}

/// `s − η·∇_s d(s, g)`, clipped to the map extent; `s` itself when `s = g`.
pub fn gradient_step<M: StateDistance + ?Sized>(
    model: &M,
    map: &OccupancyMap,
    s: State,
    g: State,
    eta: f64,
) -> State {
    if s == g || eta == 0.0 {
        return s;
    }
    let grad = model.grad_state(s, g);
    if !grad.iter().all(|v| v.is_finite()) {
        return s;
    }
    let (w, h) = map.extent();
    let x = (s.x - eta * grad[0]).clamp(0.0, w);
    let y = (s.y - eta * grad[1]).clamp(0.0, h);
    State::new(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quasimetric::EuclideanCone;

    #[test]
    fn cone_descent_moves_toward_goal() {
        let map = OccupancyMap::empty(12, 1.0).unwrap();
        let s = State::new(2.0, 2.0);
        let g = State::new(5.0, 6.0);
        let n = gradient_step(&EuclideanCone, &map, s, g, 1.0);
        assert!((n.x - 2.6).abs() < 1e-12 && (n.y - 2.8).abs() < 1e-12);
        assert_eq!(gradient_step(&EuclideanCone, &map, g, g, 1.0), g);
        assert_eq!(gradient_step(&EuclideanCone, &map, s, g, 0.0), s);
        let n = gradient_step(
            &EuclideanCone,
            &map,
            State::new(0.0, 0.0),
            State::new(3.0, 4.0),
            1.0,
        );
        assert!((n.x - 0.6).abs() < 1e-12 && (n.y - 0.8).abs() < 1e-12);
    }

    fn checkpoint(kind: AgentKind) -> Checkpoint {
        use crate::geometry::{generate_dataset, GenerateConfig, Regime};
        use crate::objectives::{ObjectiveConfig, TrainConfig};
        let map = OccupancyMap::preset("maze7").unwrap();
        let mut g = GenerateConfig::new(Regime::Navigate, 2, 1);
        g.traj_len = 10;
        let data = generate_dataset(&map, &g).unwrap();
        let model = ModelConfig {
            value_hidden: [8; 3],
            actor_hidden: [8; 3],
            repr_hidden: [8; 3],
            n_groups: 2,
            group_size: 4,
            z_dim: 3,
            ..ModelConfig::desk()
        };
        let train = TrainConfig {
            value_steps: 0,
            high_steps: 0,
            low_steps: 0,
            ..TrainConfig::default()
        };
        train::initialise(
            &map,
            &data,
            kind,
            &model,
            &train,
            &ObjectiveConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn flat_actions() {
        let mut ck = checkpoint(AgentKind::Flat);
        let (s, g) = (State::new(1.5, 1.5), State::new(5.5, 5.5));
        assert_eq!(ck.act_flat(s, g).unwrap(), ck.act_flat(s, g).unwrap());
        ck.bundle.policy_low.zero_final();
        assert_eq!(ck.act_flat(s, g).unwrap(), Action::new(0.0, 0.0));
        let big = ck.bundle.policy_low.blocks_mut().len() - 1;
        ck.bundle.policy_low.blocks_mut()[big].fill(50.0);
        let a = ck.act_flat(s, g).unwrap();
        assert!(a.dx.hypot(a.dy) <= 1.0 + 1e-12);
        assert!(matches!(
            ck.act_hier(s, g),
            Err(Error::WrongAgentKind { .. })
        ));
    }

    #[test]
    fn hierarchical_actions() {
        let flat = checkpoint(AgentKind::Flat);
        let (s, g) = (State::new(1.5, 1.5), State::new(5.5, 5.5));
        assert!(matches!(
            flat.subgoal(s, g),
            Err(Error::WrongAgentKind { .. })
        ));
        for kind in [AgentKind::Hierarchical, AgentKind::HiQrl] {
            let ck = checkpoint(kind);
            assert_eq!(ck.bundle.policy_high.input_dim(), 4);
            assert!(matches!(
                ck.act_flat(s, g),
                Err(Error::WrongAgentKind { .. })
            ));
            assert_eq!(ck.act_hier(s, g).unwrap(), ck.act_hier(s, g).unwrap());
            let z = ck.subgoal(s, g).unwrap();
            assert!(z.iter().all(|v| v.is_finite()));
            if kind == AgentKind::HiQrl {
                assert_eq!(z.len(), 3);
                let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 3f64.sqrt()).abs() < 1e-9);
            } else {
                assert_eq!(z.len(), 2);
            }
        }
    }

    #[test]
    fn abstraction_validation() {
        assert!(Abstraction {
            selector: vec![0, 0]
        }
        .validate()
        .is_err());
        assert!(Abstraction { selector: vec![2] }.validate().is_err());
        assert_eq!(
            Abstraction::identity().project(State::new(1.0, 2.0)),
            vec![1.0, 2.0]
        );
    }
}
