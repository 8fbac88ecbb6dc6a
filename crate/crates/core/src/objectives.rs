//! Training losses for the quasimetric, the low-level value and the
//! policies, plus the scalar primitives they are built from.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::State;
use crate::nn::Mlp;
use crate::quasimetric::{GoalRepresentation, LowLevelValue, QuasimetricModel, StateDistance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Qrl,
    HjbQrl,
    EikQrl,
    EikQrlLambda,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Qrl => "qrl",
            Variant::HjbQrl => "hjb_qrl",
            Variant::EikQrl => "eik_qrl",
            Variant::EikQrlLambda => "eik_qrl_lambda",
        }
    }

    /// Whether the variant only needs `(s, g)` pairs.
    pub fn trajectory_free(self) -> bool {
        matches!(self, Variant::EikQrl | Variant::EikQrlLambda)
    }

    /// Whether `λ` is updated by dual ascent.
    pub fn has_dual(self) -> bool {
        matches!(self, Variant::Qrl | Variant::EikQrlLambda)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qrl" => Ok(Variant::Qrl),
            "hjb_qrl" => Ok(Variant::HjbQrl),
            "eik_qrl" => Ok(Variant::EikQrl),
            "eik_qrl_lambda" => Ok(Variant::EikQrlLambda),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zeta {
    #[default]
    Log1p,
}

/// How goals for the spreading term are paired with states on trajectory data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalPairing {
    /// Goal is an independent random dataset state.
    #[default]
    Independent,
    /// Goal is a later state of the same trajectory.
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub epsilon: f64,
    pub lambda_init: f64,
    pub lambda_lr: f64,
    pub zeta: Zeta,
    pub margin_cost: f64,
    pub gr_pairing: GoalPairing,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            variant: Variant::EikQrl,
            epsilon: 0.25,
            lambda_init: 1.0,
            lambda_lr: 1e-2,
            zeta: Zeta::Log1p,
            margin_cost: 1.0,
            gr_pairing: GoalPairing::Independent,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("epsilon must be non-negative".into()));
        }
        if !(self.lambda_init >= 0.0) || !(self.lambda_lr >= 0.0) {
            return Err(Error::InvalidConfig(
                "lambda and its step must be non-negative".into(),
            ));
        }
        if !(self.margin_cost > 0.0) {
            return Err(Error::InvalidConfig("margin_cost must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub iota: f64,
    pub beta: f64,
    pub subgoal_k: usize,
    /// Steps of the value phase (quasimetric plus low-level value).
    pub value_steps: u64,
    pub high_steps: u64,
    pub low_steps: u64,
    pub seed: u64,
    pub awr_clip: f64,
    /// Mean of the geometric hindsight offset.
    pub hindsight_mean: f64,
    /// Goal mixture for value and policy targets: current, same trajectory, random.
    pub goal_mix: [f64; 3],
    /// Goal mixture for policy batches.
    pub policy_goal_mix: [f64; 3],
    pub policy_log_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch: 256,
            lr: 3e-4,
            tau: 0.005,
            iota: 0.7,
            beta: 3.0,
            subgoal_k: 25,
            value_steps: 20_000,
            high_steps: 20_000,
            low_steps: 20_000,
            seed: 0,
            awr_clip: 100.0,
            hindsight_mean: 20.0,
            goal_mix: [0.2, 0.5, 0.3],
            policy_goal_mix: [0.0, 0.5, 0.5],
            policy_log_std: 0.0,
        }
    }
}

impl TrainConfig {
    /// Full-scale values: batch 1024, same rates and step budget.
    pub fn paper() -> Self {
        Self {
            batch: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.5..=1.0).contains(&self.iota) {
            return bad("iota must lie in [0.5, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if self.subgoal_k < 1 {
            return bad("subgoal_k must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0) || !(self.awr_clip > 0.0) || !(self.hindsight_mean >= 1.0) {
            return bad("lr and awr_clip must be positive, hindsight_mean at least 1");
        }
        for mix in [self.goal_mix, self.policy_goal_mix] {
            if mix.iter().any(|&p| !(p >= 0.0)) || mix.iter().sum::<f64>() <= 0.0 {
                return bad("goal mixture weights must be non-negative with a positive sum");
            }
        }
        Ok(())
    }
}

/// `log(1 + x)` for `x ≥ 0`.
pub fn zeta(x: f64) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::NegativeInput(x));
    }
    Ok(x.ln_1p())
}

/// `max(d − 1, 0)²`.
pub fn qrl_local_penalty(d: f64) -> f64 {
    let e = (d - 1.0).max(0.0);
    e * e
}

/// `(∇_s d(s, g) · (s′ − s) + 1)²`.
pub fn hjb_residual<M: StateDistance + ?Sized>(
    model: &M,
    s: State,
    s_next: State,
    g: State,
) -> f64 {
    let grad = model.grad_state(s, g);
    let r = grad[0] * (s_next.x - s.x) + grad[1] * (s_next.y - s.y) + 1.0;
    r * r
}

/// `(‖∇_s d(s, g)‖ − 1)²`.
pub fn eikonal_residual<M: StateDistance + ?Sized>(model: &M, s: State, g: State) -> f64 {
    let grad = model.grad_state(s, g);
    let r = grad[0].hypot(grad[1]) - 1.0;
    r * r
}

/// `|ι − 𝟙(x < 0)|·x²`.
pub fn expectile_loss(x: f64, iota: f64) -> f64 {
    let w = if x < 0.0 { 1.0 - iota } else { iota };
    w * x * x
}

/// `min(exp(β·Ã), clip)`.
pub fn awr_weight(advantage: f64, beta: f64, clip: f64) -> f64 {
    let e = (beta * advantage).exp();
    if e.is_nan() {
        clip
    } else {
        e.min(clip)
    }
}

/// Log-density of `target` under `N(mean, exp(log_std)²·I)`.
pub fn gaussian_log_prob(mean: &[f64], target: &[f64], log_std: f64) -> f64 {
    let var = (2.0 * log_std).exp();
    let d = mean.len() as f64;
    let sq: f64 = mean
        .iter()
        .zip(target)
        .map(|(m, t)| (t - m) * (t - m))
        .sum();
    -0.5 * sq / var - d * log_std - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// `−mean[w·log π(target | inputs)]` for fixed-std Gaussian heads whose
/// means are the rows of `means`.
pub fn awr_policy_loss(
    means: &Array2<f64>,
    targets: &Array2<f64>,
    advantages: &[f64],
    beta: f64,
    clip: f64,
    log_std: f64,
) -> f64 {
    let n = means.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|r| {
            let lp = gaussian_log_prob(
                means.row(r).as_slice().unwrap(),
                targets.row(r).as_slice().unwrap(),
                log_std,
            );
            awr_weight(advantages[r], beta, clip) * lp
        })
        .sum();
    -total / n as f64
}

/// Plain negative log-likelihood.
pub fn behavior_cloning_loss(means: &Array2<f64>, targets: &Array2<f64>, log_std: f64) -> f64 {
    let zeros = vec![0.0; means.nrows()];
    awr_policy_loss(means, targets, &zeros, 1.0, f64::INFINITY, log_std)
}

/// Transitions with hindsight goals for the local terms of `Qrl`/`HjbQrl`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalBatch {
    pub s: Array2<f64>,
    pub s_next: Array2<f64>,
    pub g: Array2<f64>,
}

/// Everything a quasimetric update consumes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuasimetricBatch {
    /// States and goals of the spreading term (and of the Eikonal residual).
    pub s: Array2<f64>,
    pub g: Array2<f64>,
    pub local: Option<LocalBatch>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub loss: f64,
    pub mean_d: f64,
    pub mean_residual: f64,
    pub lambda: f64,
}

impl Diagnostics {
    pub const CSV_HEADER: &'static str = "step,variant,loss,mean_d,mean_residual,lambda";

    pub fn csv_row(&self, step: u64, variant: Variant) -> String {
        format!(
            "{step},{},{},{},{},{}",
            variant.name(),
            self.loss,
            self.mean_d,
            self.mean_residual,
            self.lambda
        )
    }
}

/// Loss value, diagnostics and parameter gradients (encoder blocks, then α).
pub struct QuasimetricStep {
    pub diagnostics: Diagnostics,
    pub grads: Vec<Array2<f64>>,
}

fn mean_value(tape: &Tape, v: Var) -> f64 {
    let x = tape.value(v);
    x.sum() / x.len().max(1) as f64
}

/// Builds the variant's loss on a fresh tape and differentiates it.
///
/// The λ-weighted forms include the constant `−λ·ε²` in the reported loss.
pub fn quasimetric_loss(
    model: &QuasimetricModel,
    batch: &QuasimetricBatch,
    cfg: &ObjectiveConfig,
    lambda: f64,
) -> Result<QuasimetricStep> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let eps2 = cfg.epsilon * cfg.epsilon;
    let need_local = || {
        batch
            .local
            .as_ref()
            .ok_or_else(|| Error::VariantDataMismatch {
                variant: cfg.variant.name().into(),
                regime: "trajectory_free".into(),
            })
    };
    let (loss, mean_d, mean_res) = match cfg.variant {
        Variant::EikQrl | Variant::EikQrlLambda => {
            let (d, grads) =
                model.distance_with_grad(&mut tape, &b, batch.s.clone(), batch.g.clone());
            let gr = gr_term(&mut tape, d);
            let res = eikonal_graph(&mut tape, &grads);
            let res_mean = tape.mean_all(res);
            let loss = if cfg.variant == Variant::EikQrl {
                tape.add(gr, res_mean)
            } else {
                let w = tape.scale(res_mean, lambda);
                let l = tape.add(gr, w);
                tape.shift(l, -lambda * eps2)
            };
            (loss, mean_value(&tape, d), tape.scalar(res_mean))
        }
        Variant::Qrl => {
            let local = need_local()?;
            let d = model.distance_graph(&mut tape, &b, batch.s.clone(), batch.g.clone());
            let gr = gr_term(&mut tape, d);
            let dl = model.distance_graph(&mut tape, &b, local.s.clone(), local.s_next.clone());
            let over = tape.shift(dl, -cfg.margin_cost);
            let over = tape.relu(over);
            let pen = tape.square(over);
            let pen_mean = tape.mean_all(pen);
            let w = tape.scale(pen_mean, lambda);
            let l = tape.add(gr, w);
            let loss = tape.shift(l, -lambda * eps2);
            (loss, mean_value(&tape, d), tape.scalar(pen_mean))
        }
        Variant::HjbQrl => {
            let local = need_local()?;
            let d = model.distance_graph(&mut tape, &b, batch.s.clone(), batch.g.clone());
            let gr = gr_term(&mut tape, d);
            let (_, grads) =
                model.distance_with_grad(&mut tape, &b, local.s.clone(), local.g.clone());
            let disp = &local.s_next - &local.s;
            let mut dot: Option<Var> = None;
            for (k, gk) in grads.iter().enumerate() {
                let col = tape.constant(disp.column(k).to_owned().insert_axis(ndarray::Axis(1)));
                let term = tape.mul(*gk, col);
                dot = Some(match dot {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
            let r = tape.shift(
                dot.expect("state has at least one coordinate"),
                cfg.margin_cost,
            );
            let res = tape.square(r);
            let res_mean = tape.mean_all(res);
            let loss = tape.add(gr, res_mean);
            (loss, mean_value(&tape, d), tape.scalar(res_mean))
        }
    };
    let value = tape.scalar(loss);
    let mut g = tape.backward(loss);
    let mut grads: Vec<Array2<f64>> = b.encoder.iter().map(|&v| g.take(v)).collect();
    grads.push(g.take(b.alpha_raw));
    let diagnostics = Diagnostics {
        loss: value,
        mean_d,
        mean_residual: mean_res,
        lambda,
    };
    Ok(QuasimetricStep { diagnostics, grads })
}

/// `mean[−ζ(d)]` on the tape.
fn gr_term(tape: &mut Tape, d: Var) -> Var {
    let z = tape.log1p(d);
    let m = tape.mean_all(z);
    tape.scale(m, -1.0)
}

/// Per-row `(‖∇‖ − 1)²` from gradient components.
fn eikonal_graph(tape: &mut Tape, grads: &[Var]) -> Var {
    let mut sq: Option<Var> = None;
    for &gk in grads {
        let s = tape.square(gk);
        sq = Some(match sq {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    let n = tape.sqrt(sq.expect("state has at least one coordinate"));
    let r = tape.shift(n, -1.0);
    tape.square(r)
}

/// Projected dual ascent `λ ← max(0, λ + η·(mean residual − ε²))`.
pub fn dual_update(lambda: f64, mean_residual: f64, cfg: &ObjectiveConfig) -> f64 {
    let eps2 = cfg.epsilon * cfg.epsilon;
    (lambda + cfg.lambda_lr * (mean_residual - eps2)).max(0.0)
}

/// Transitions with relabelled goals for the implicit value update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValueBatch {
    pub s: Array2<f64>,
    pub s_next: Array2<f64>,
    pub g: Array2<f64>,
}

pub struct ValueStep {
    pub loss: f64,
    pub value_grads: Vec<Array2<f64>>,
    pub repr_grads: Vec<Array2<f64>>,
}

fn rows_equal(a: &Array2<f64>, b: &Array2<f64>, r: usize) -> bool {
    a.row(r) == b.row(r)
}

/// Expectile regression of `V(s, φ(g, s))` onto `r + γ·V̄(s′, φ(g, s′))`.
///
/// The reward is −1 away from the goal and 0 at it; the bootstrap term is
/// dropped when `s = g`. The target network and `z′` receive no gradient.
pub fn low_value_loss(
    value: &LowLevelValue,
    repr: &GoalRepresentation,
    batch: &ValueBatch,
    gamma: f64,
    iota: f64,
) -> ValueStep {
    let n = batch.s.nrows();
    let at_goal: Vec<bool> = (0..n).map(|r| rows_equal(&batch.s, &batch.g, r)).collect();
    let gs_next = ndarray::concatenate![ndarray::Axis(1), batch.g.view(), batch.s_next.view()];
    let z_next = repr.embed_batch(gs_next.view());
    let x_next = ndarray::concatenate![ndarray::Axis(1), batch.s_next.view(), z_next.view()];
    let v_next = value.target.forward_plain(x_next.view());
    let target = Array2::from_shape_fn((n, 1), |(r, _)| {
        if at_goal[r] {
            0.0
        } else {
            -1.0 + gamma * v_next[[r, 0]]
        }
    });

    let mut tape = Tape::new();
    let pv = value.net.bind(&mut tape, true);
    let pr = repr.net.bind(&mut tape, true);
    let gs = ndarray::concatenate![ndarray::Axis(1), batch.g.view(), batch.s.view()];
    let gs = tape.constant(gs);
    let z = repr.forward(&mut tape, &pr, gs);
    let s = tape.constant(batch.s.clone());
    let x = tape.concat(s, z);
    let v = value.net.forward(&mut tape, &pv, x);
    let t = tape.constant(target);
    let diff = tape.sub(t, v);
    let loss = expectile_graph(&mut tape, diff, iota);
    let lv = tape.scalar(loss);
    let mut g = tape.backward(loss);
    ValueStep {
        loss: lv,
        value_grads: pv.iter().map(|&p| g.take(p)).collect(),
        repr_grads: pr.iter().map(|&p| g.take(p)).collect(),
    }
}

/// `mean[|ι − 𝟙(x < 0)|·x²]` on the tape.
pub fn expectile_graph(tape: &mut Tape, x: Var, iota: f64) -> Var {
    let w = tape
        .value(x)
        .mapv(|v| if v < 0.0 { 1.0 - iota } else { iota });
    let w = tape.constant(w);
    let sq = tape.square(x);
    let weighted = tape.mul(sq, w);
    tape.mean_all(weighted)
}

/// Gradient of the AWR loss for a policy mean network.
pub struct PolicyStep {
    pub loss: f64,
    pub grads: Vec<Array2<f64>>,
}

/// Advantage-weighted regression of `policy(inputs)` onto `targets`.
pub fn awr_policy_step(
    policy: &Mlp,
    inputs: Array2<f64>,
    targets: Array2<f64>,
    advantages: &[f64],
    beta: f64,
    clip: f64,
    log_std: f64,
) -> PolicyStep {
    let n = inputs.nrows();
    let dim = targets.ncols() as f64;
    let weights = Array2::from_shape_fn((n, 1), |(r, _)| awr_weight(advantages[r], beta, clip));
    let mut tape = Tape::new();
    let p = policy.bind(&mut tape, true);
    let x = tape.constant(inputs);
    let mean = policy.forward(&mut tape, &p, x);
    let t = tape.constant(targets);
    let diff = tape.sub(mean, t);
    let sq = tape.square(diff);
    let ss = tape.sum_cols(sq);
    let var = (2.0 * log_std).exp();
    let lp = tape.scale(ss, -0.5 / var);
    let lp = tape.shift(
        lp,
        -dim * log_std - 0.5 * dim * (2.0 * std::f64::consts::PI).ln(),
    );
    let w = tape.constant(weights);
    let wl = tape.mul(lp, w);
    let m = tape.mean_all(wl);
    let loss = tape.scale(m, -1.0);
    let lv = tape.scalar(loss);
    let mut g = tape.backward(loss);
    PolicyStep {
        loss: lv,
        grads: p.iter().map(|&v| g.take(v)).collect(),
    }
}
