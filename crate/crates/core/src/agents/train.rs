use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::sampler::{PolicyBatch, Sampler};
use super::{AgentKind, Checkpoint, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{Dataset, OccupancyMap, Regime};
use crate::objectives::{
    awr_policy_step, dual_update, low_value_loss, quasimetric_loss, Diagnostics, ObjectiveConfig,
    TrainConfig, Variant,
};
use crate::quasimetric::StateNorm;

/// Stream used for parameter initialisation; sampling uses stream 1.
const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Value,
    HighPolicy,
    LowPolicy,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Value => "value",
            Phase::HighPolicy => "high_policy",
            Phase::LowPolicy => "low_policy",
        }
    }
}

/// Diagnostics recorded while training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, quasimetric diagnostics)` for every value step.
    pub value: Vec<(u64, Diagnostics)>,
    /// `(step, phase, loss)` for the value-function and policy updates.
    pub other: Vec<(u64, &'static str, f64)>,
}

impl TrainLog {
    pub fn diagnostics_csv(&self, variant: Variant) -> String {
        let mut out = String::from(Diagnostics::CSV_HEADER);
        out.push('\n');
        for (step, d) in &self.value {
            out.push_str(&d.csv_row(*step, variant));
            out.push('\n');
        }
        out
    }
}

fn check_data(kind: AgentKind, obj: &ObjectiveConfig, data: &Dataset) -> Result<()> {
    let has_traj = data.n_transitions() > 0;
    let mismatch = || Error::VariantDataMismatch {
        variant: obj.variant.name().into(),
        regime: data.regime.name().into(),
    };
    if !has_traj && (!obj.variant.trajectory_free() || kind == AgentKind::HiQrl) {
        return Err(mismatch());
    }
    if !has_traj && data.pairs.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    Ok(())
}

/// Fresh checkpoint for `kind`, with parameters drawn from `train.seed`.
pub fn initialise(
    map: &OccupancyMap,
    data: &Dataset,
    kind: AgentKind,
    model: &ModelConfig,
    train: &TrainConfig,
    obj: &ObjectiveConfig,
) -> Result<Checkpoint> {
    model.validate()?;
    train.validate()?;
    obj.validate()?;
    check_data(kind, obj, data)?;
    let (w, h) = map.extent();
    let norm = StateNorm::for_extent(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(INIT_STREAM);
    let bundle = ModelBundle::new(kind, model, norm, &mut rng);
    let optim = bundle.optimizers(train.lr);
    Ok(Checkpoint {
        kind,
        model: model.clone(),
        train: train.clone(),
        objective: obj.clone(),
        norm,
        bundle,
        optim,
        lambda: obj.lambda_init,
        step: 0,
        rng_word_pos: 0,
        policies_trained: data.n_transitions() > 0 && data.regime != Regime::TrajectoryFree,
    })
}

/// Trains from scratch for the configured phase budgets.
pub fn train(
    map: &OccupancyMap,
    data: &Dataset,
    kind: AgentKind,
    model: &ModelConfig,
    train: &TrainConfig,
    obj: &ObjectiveConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let mut ck = initialise(map, data, kind, model, train, obj)?;
    let total = ck.total_steps();
    let log = resume(&mut ck, data, total)?;
    Ok((ck, log))
}

impl Checkpoint {
    /// Phase budgets in execution order, skipping phases that do not apply.
    pub fn schedule(&self) -> Vec<(Phase, u64)> {
        let mut s = vec![(Phase::Value, self.train.value_steps)];
        if self.policies_trained {
            if self.kind.is_hierarchical() {
                s.push((Phase::HighPolicy, self.train.high_steps));
            }
            s.push((Phase::LowPolicy, self.train.low_steps));
        }
        s
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule().iter().map(|(_, n)| n).sum()
    }

    pub fn phase_at(&self, step: u64) -> Option<Phase> {
        let mut end = 0;
        for (p, n) in self.schedule() {
            end += n;
            if step < end {
                return Some(p);
            }
        }
        None
    }
}

/// Continues training until `until` total steps (capped by the schedule).
pub fn resume(ck: &mut Checkpoint, data: &Dataset, until: u64) -> Result<TrainLog> {
    check_data(ck.kind, &ck.objective, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ck.train.seed);
    rng.set_stream(SAMPLE_STREAM);
    rng.set_word_pos(ck.rng_word_pos);
    let sampler = Sampler::new(data, ck.train.hindsight_mean);
    let until = until.min(ck.total_steps());
    let mut log = TrainLog::default();
    while ck.step < until {
        let phase = ck.phase_at(ck.step).expect("step is inside the schedule");
        match phase {
            Phase::Value => value_step(ck, &sampler, &mut rng, &mut log)?,
            Phase::HighPolicy => high_step(ck, &sampler, &mut rng, &mut log)?,
            Phase::LowPolicy => low_step(ck, &sampler, &mut rng, &mut log)?,
        }
        ck.step += 1;
        ck.rng_word_pos = rng.get_word_pos();
    }
    Ok(log)
}

fn nan_guard<B: Serialize>(loss: f64, phase: Phase, step: u64, batch: &B) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::NaNDetected {
        phase: phase.name().into(),
        step,
        batch: serde_json::to_string(batch).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}")),
    })
}

fn grads_finite(grads: &[Array2<f64>]) -> bool {
    grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
}

fn value_step(
    ck: &mut Checkpoint,
    sampler: &Sampler,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    let obj = &ck.objective;
    let need_local = matches!(obj.variant, Variant::Qrl | Variant::HjbQrl);
    let batch = sampler.quasimetric_batch(ck.train.batch, obj.gr_pairing, need_local, rng);
    let out = quasimetric_loss(&ck.bundle.quasimetric, &batch, obj, ck.lambda)?;
    let loss = if grads_finite(&out.grads) {
        out.diagnostics.loss
    } else {
        f64::NAN
    };
    nan_guard(loss, Phase::Value, ck.step, &batch)?;
    let q = &mut ck.bundle.quasimetric;
    let params = q
        .encoder
        .blocks_mut()
        .iter_mut()
        .chain(std::iter::once(&mut q.alpha_raw));
    ck.optim.quasimetric.step(params, &out.grads);
    if obj.variant.has_dual() {
        ck.lambda = dual_update(ck.lambda, out.diagnostics.mean_residual, obj);
    }
    log.value.push((ck.step, out.diagnostics));

    if ck.kind == AgentKind::HiQrl {
        let vb = sampler.value_batch(ck.train.batch, ck.train.goal_mix, rng);
        let b = &mut ck.bundle;
        let step = low_value_loss(
            &b.low_value,
            &b.goal_repr,
            &vb,
            ck.train.gamma,
            ck.train.iota,
        );
        let mut grads = step.value_grads;
        grads.extend(step.repr_grads);
        let loss = if grads_finite(&grads) {
            step.loss
        } else {
            f64::NAN
        };
        nan_guard(loss, Phase::Value, ck.step, &vb)?;
        let params = b
            .low_value
            .net
            .blocks_mut()
            .iter_mut()
            .chain(b.goal_repr.net.blocks_mut().iter_mut());
        ck.optim.value.step(params, &grads);
        b.low_value.target_update(ck.train.tau);
        log.other.push((ck.step, "low_value", step.loss));
    }
    Ok(())
}

fn hstack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate![Axis(1), a.view(), b.view()]
}

/// Columns of `m` picked by the abstraction selector.
fn project(m: &Array2<f64>, selector: &[usize]) -> Array2<f64> {
    m.select(Axis(1), selector)
}

fn high_step(
    ck: &mut Checkpoint,
    sampler: &Sampler,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    let pb = sampler.policy_batch(
        ck.train.batch,
        ck.train.subgoal_k,
        ck.train.policy_goal_mix,
        rng,
    );
    let b = &ck.bundle;
    let sel = &ck.model.abstraction.selector;
    let (s_bar, g_bar, ahead_bar) = (
        project(&pb.s, sel),
        project(&pb.g, sel),
        project(&pb.s_ahead, sel),
    );
    let d_now = b.quasimetric.distance_batch(s_bar.view(), g_bar.view());
    let d_ahead = b.quasimetric.distance_batch(ahead_bar.view(), g_bar.view());
    let adv: Vec<f64> = d_now.iter().zip(&d_ahead).map(|(a, c)| a - c).collect();
    let targets = match ck.kind {
        AgentKind::HiQrl => b.goal_repr.embed_batch(hstack(&pb.s_ahead, &pb.s).view()),
        _ => ahead_bar,
    };
    let inputs = hstack(&s_bar, &g_bar);
    policy_update(ck, Phase::HighPolicy, inputs, targets, &adv, &pb, log)
}

fn low_step(
    ck: &mut Checkpoint,
    sampler: &Sampler,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    let pb = sampler.policy_batch(
        ck.train.batch,
        ck.train.subgoal_k,
        ck.train.policy_goal_mix,
        rng,
    );
    let b = &ck.bundle;
    let q = &b.quasimetric;
    let (inputs, adv) = match ck.kind {
        AgentKind::Flat => {
            let a = q.distance_batch(pb.s.view(), pb.g.view());
            let c = q.distance_batch(pb.s_next.view(), pb.g.view());
            (hstack(&pb.s, &pb.g), diff(&a, &c))
        }
        AgentKind::Hierarchical => {
            let a = q.distance_batch(pb.s.view(), pb.s_ahead.view());
            let c = q.distance_batch(pb.s_next.view(), pb.s_ahead.view());
            (hstack(&pb.s, &pb.s_ahead), diff(&a, &c))
        }
        AgentKind::HiQrl => {
            let z = b.goal_repr.embed_batch(hstack(&pb.s_ahead, &pb.s).view());
            let z_next = b
                .goal_repr
                .embed_batch(hstack(&pb.s_ahead, &pb.s_next).view());
            let v = b.low_value.net.forward_plain(hstack(&pb.s, &z).view());
            let v_next = b
                .low_value
                .net
                .forward_plain(hstack(&pb.s_next, &z_next).view());
            let adv = v_next.iter().zip(v.iter()).map(|(n, c)| n - c).collect();
            (hstack(&pb.s, &z), adv)
        }
    };
    let targets = pb.a.clone();
    policy_update(ck, Phase::LowPolicy, inputs, targets, &adv, &pb, log)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn policy_update(
    ck: &mut Checkpoint,
    phase: Phase,
    inputs: Array2<f64>,
    targets: Array2<f64>,
    adv: &[f64],
    batch: &PolicyBatch,
    log: &mut TrainLog,
) -> Result<()> {
    let t = &ck.train;
    let (net, opt) = match phase {
        Phase::HighPolicy => (&mut ck.bundle.policy_high, &mut ck.optim.policy_high),
        _ => (&mut ck.bundle.policy_low, &mut ck.optim.policy_low),
    };
    let step = awr_policy_step(
        net,
        inputs,
        targets,
        adv,
        t.beta,
        t.awr_clip,
        t.policy_log_std,
    );
    let loss = if grads_finite(&step.grads) {
        step.loss
    } else {
        f64::NAN
    };
    nan_guard(loss, phase, ck.step, batch)?;
    opt.step(net.blocks_mut().iter_mut(), &step.grads);
    log.other.push((ck.step, phase.name(), step.loss));
    Ok(())
}
