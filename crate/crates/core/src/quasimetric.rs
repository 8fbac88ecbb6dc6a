//! Learnable quasimetric `d(s, g)`, the low-level value `V(s, z)` and the
//! goal representation `φ(g, s)`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::State;
use crate::nn::{Activation, Mlp};

/// Anything that maps `(s, g)` to a travel time and its state gradient.
pub trait StateDistance: Sync {
    fn distance(&self, s: State, g: State) -> f64;
    fn grad_state(&self, s: State, g: State) -> [f64; 2];
}

/// `d(s, g) = ‖s − g‖`, the exact solution on an obstacle-free plane.
#[derive(Clone, Copy, Debug, Default)]
pub struct EuclideanCone;

impl StateDistance for EuclideanCone {
    fn distance(&self, s: State, g: State) -> f64 {
        s.dist(g)
    }

    fn grad_state(&self, s: State, g: State) -> [f64; 2] {
        let n = s.dist(g);
        if n == 0.0 {
            return [0.0, 0.0];
        }
        [(s.x - g.x) / n, (s.y - g.y) / n]
    }
}

/// Fixed affine map of world coordinates onto roughly `[-1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNorm {
    pub shift: [f64; 2],
    pub scale: [f64; 2],
}

impl StateNorm {
    pub fn identity() -> Self {
        Self {
            shift: [0.0; 2],
            scale: [1.0; 2],
        }
    }

    /// Centres a `width × height` world-unit rectangle at the origin.
    pub fn for_extent(width: f64, height: f64) -> Self {
        Self {
            shift: [-width / 2.0, -height / 2.0],
            scale: [2.0 / width, 2.0 / height],
        }
    }
}

/// Per-group union measures of the intervals `[u_i, max(u_i, v_i)]`.
///
/// Returns the components and the Jacobians with respect to `u` and `v`.
/// Each merged interval has derivative −1 on its leftmost start and +1 on
/// its rightmost end; a tie `u_i = v_i` is an empty interval and carries no
/// derivative.
pub fn iqe_components(u: &[f64], v: &[f64], group_size: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = u.len();
    let n_groups = m / group_size;
    let mut comps = vec![0.0; n_groups];
    let mut du = vec![0.0; m];
    let mut dv = vec![0.0; m];
    let mut idx: Vec<usize> = Vec::with_capacity(group_size);
    for j in 0..n_groups {
        idx.clear();
        idx.extend((j * group_size..(j + 1) * group_size).filter(|&i| v[i] > u[i]));
        idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
        let mut total = 0.0;
        let mut it = idx.iter();
        let Some(&first) = it.next() else { continue };
        let (mut start_i, mut end_i) = (first, first);
        for &i in it {
            if u[i] <= v[end_i] {
                if v[i] > v[end_i] {
                    end_i = i;
                }
            } else {
                total += v[end_i] - u[start_i];
                du[start_i] -= 1.0;
                dv[end_i] += 1.0;
                start_i = i;
                end_i = i;
            }
        }
        total += v[end_i] - u[start_i];
        du[start_i] -= 1.0;
        dv[end_i] += 1.0;
        comps[j] = total;
    }
    (comps, du, dv)
}

/// Max-mean combination `α·max_j c_j + (1 − α)·mean_j c_j`.
pub fn iqe_distance(
    u: &[f64],
    v: &[f64],
    n_groups: usize,
    group_size: usize,
    alpha: f64,
) -> Result<f64> {
    let m = n_groups * group_size;
    for len in [u.len(), v.len()] {
        if len != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: len,
            });
        }
    }
    let (c, _, _) = iqe_components(u, v, group_size);
    Ok(combine(&c, alpha))
}

fn combine(c: &[f64], alpha: f64) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    alpha * max + (1.0 - alpha) * mean
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden: [usize; 3],
    pub n_groups: usize,
    pub group_size: usize,
    pub activation: Activation,
}

/// Encoder plus interval-quasimetric head.
#[derive(Clone, Debug, PartialEq)]
pub struct QuasimetricModel {
    pub encoder: Mlp,
    pub n_groups: usize,
    pub group_size: usize,
    /// Unconstrained parameter behind `α = sigmoid(alpha_raw)`.
    pub alpha_raw: Array2<f64>,
}

/// Parameters of a [`QuasimetricModel`] placed on a tape.
pub struct BoundQuasimetric {
    pub encoder: Vec<Var>,
    pub alpha_raw: Var,
}

impl QuasimetricModel {
    pub fn new<R: Rng + ?Sized>(spec: &EncoderSpec, norm: StateNorm, rng: &mut R) -> Self {
        let m = spec.n_groups * spec.group_size;
        let sizes = [
            spec.input_dim,
            spec.hidden[0],
            spec.hidden[1],
            spec.hidden[2],
            m,
        ];
        let mut shift = vec![0.0; spec.input_dim];
        let mut scale = vec![1.0; spec.input_dim];
        let n = spec.input_dim.min(2);
        shift[..n].copy_from_slice(&norm.shift[..n]);
        scale[..n].copy_from_slice(&norm.scale[..n]);
        let encoder = Mlp::new(&sizes, spec.activation, 1e-2, rng).with_input_norm(&shift, &scale);
        Self {
            encoder,
            n_groups: spec.n_groups,
            group_size: spec.group_size,
            alpha_raw: Array2::zeros((1, 1)),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.n_groups * self.group_size
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_raw[[0, 0]])
    }

    pub fn encode(&self, s: &[f64]) -> Result<Vec<f64>> {
        let d = self.encoder.input_dim();
        if s.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.len(),
            });
        }
        let x = ArrayView2::from_shape((1, d), s).expect("shape");
        Ok(self.encoder.forward_plain(x).into_raw_vec_and_offset().0)
    }

    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.encoder.forward_plain(x)
    }

    pub fn iqe_distance(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        iqe_distance(u, v, self.n_groups, self.group_size, self.alpha())
    }

    /// Batched `d(s_r, g_r)` over matching rows.
    pub fn distance_batch(&self, s: ArrayView2<f64>, g: ArrayView2<f64>) -> Vec<f64> {
        let u = self.encode_batch(s);
        let v = self.encode_batch(g);
        let alpha = self.alpha();
        u.rows()
            .into_iter()
            .zip(v.rows())
            .map(|(ur, vr)| {
                let (c, _, _) = iqe_components(
                    ur.as_slice().unwrap(),
                    vr.as_slice().unwrap(),
                    self.group_size,
                );
                combine(&c, alpha)
            })
            .collect()
    }

    pub fn distance_points(&self, s: &[f64], g: &[f64]) -> Result<f64> {
        let u = self.encode(s)?;
        let v = self.encode(g)?;
        self.iqe_distance(&u, &v)
    }

    /// `∇_s d(s, g)` for a general input vector.
    pub fn grad_points(&self, s: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        let d = self.encoder.input_dim();
        for len in [s.len(), g.len()] {
            if len != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: len,
                });
            }
        }
        let sm = Array2::from_shape_vec((1, d), s.to_vec()).expect("shape");
        let gm = Array2::from_shape_vec((1, d), g.to_vec()).expect("shape");
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (_, grads) = self.distance_with_grad(&mut tape, &b, sm, gm);
        Ok(grads.iter().map(|&v| tape.scalar(v)).collect())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundQuasimetric {
        let encoder = self.encoder.bind(tape, trainable);
        let alpha_raw = if trainable {
            tape.param(self.alpha_raw.clone())
        } else {
            tape.constant(self.alpha_raw.clone())
        };
        BoundQuasimetric { encoder, alpha_raw }
    }

    fn head(
        &self,
        tape: &mut Tape,
        b: &BoundQuasimetric,
        u: Var,
        v: Var,
    ) -> (Var, Var, Array2<f64>, Array2<f64>) {
        let (rows, m) = tape.shape(u);
        let g = self.n_groups;
        let mut comps = Array2::zeros((rows, g));
        let mut du = Array2::zeros((rows, m));
        let mut dv = Array2::zeros((rows, m));
        {
            let uv = tape.value(u);
            let vv = tape.value(v);
            for r in 0..rows {
                let (c, a, bb) = iqe_components(
                    uv.row(r).as_slice().unwrap(),
                    vv.row(r).as_slice().unwrap(),
                    self.group_size,
                );
                comps.row_mut(r).assign(&ndarray::ArrayView1::from(&c));
                du.row_mut(r).assign(&ndarray::ArrayView1::from(&a));
                dv.row_mut(r).assign(&ndarray::ArrayView1::from(&bb));
            }
        }
        let c = tape.iqe(u, v, comps, du.clone(), dv, self.group_size);
        let alpha = tape.sigmoid(b.alpha_raw);
        let mx = tape.max_cols(c);
        let sum = tape.sum_cols(c);
        let mean = tape.scale(sum, 1.0 / g as f64);
        let diff = tape.sub(mx, mean);
        let mixed = tape.mul_scalar(diff, alpha);
        let d = tape.add(mean, mixed);
        // one-hot of the max group expanded over its coordinates
        let arg: Vec<usize> = tape
            .value(c)
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let mask = Array2::from_shape_fn((rows, m), |(r, i)| {
            if i / self.group_size == arg[r] {
                1.0
            } else {
                0.0
            }
        });
        (d, alpha, du, mask)
    }

    /// `d(s, g)` as a `B×1` tape node.
    pub fn distance_graph(
        &self,
        tape: &mut Tape,
        b: &BoundQuasimetric,
        s: Array2<f64>,
        g: Array2<f64>,
    ) -> Var {
        let sv = tape.constant(s);
        let gv = tape.constant(g);
        let u = self.encoder.forward(tape, &b.encoder, sv);
        let v = self.encoder.forward(tape, &b.encoder, gv);
        self.head(tape, b, u, v).0
    }

    /// `d(s, g)` together with each component of `∇_s d`, all `B×1` nodes.
    ///
    /// The gradient nodes depend on the parameters, so penalties built from
    /// them can be differentiated again with respect to the parameters.
    pub fn distance_with_grad(
        &self,
        tape: &mut Tape,
        b: &BoundQuasimetric,
        s: Array2<f64>,
        g: Array2<f64>,
    ) -> (Var, Vec<Var>) {
        let (rows, dim) = s.dim();
        let dirs: Vec<Array2<f64>> = (0..dim)
            .map(|k| Array2::from_shape_fn((rows, dim), |(_, c)| if c == k { 1.0 } else { 0.0 }))
            .collect();
        let sv = tape.constant(s);
        let gv = tape.constant(g);
        let (u, tangents) = self.encoder.forward_tangent(tape, &b.encoder, sv, &dirs);
        let v = self.encoder.forward(tape, &b.encoder, gv);
        let (d, alpha, du, mask) = self.head(tape, b, u, v);
        let g_count = self.n_groups as f64;
        let w_max = tape.constant(&mask * &du);
        let w_mean = tape.constant(du / g_count);
        let grads = tangents
            .into_iter()
            .map(|t| {
                let a = tape.mul(t, w_max);
                let a = tape.sum_cols(a);
                let mn = tape.mul(t, w_mean);
                let mn = tape.sum_cols(mn);
                let diff = tape.sub(a, mn);
                let mixed = tape.mul_scalar(diff, alpha);
                tape.add(mn, mixed)
            })
            .collect();
        (d, grads)
    }
}

impl StateDistance for QuasimetricModel {
    fn distance(&self, s: State, g: State) -> f64 {
        self.distance_points(&s.to_array(), &g.to_array())
            .unwrap_or(f64::NAN)
    }

    fn grad_state(&self, s: State, g: State) -> [f64; 2] {
        match self.grad_points(&s.to_array(), &g.to_array()) {
            Ok(v) => [v[0], v[1]],
            Err(_) => [f64::NAN; 2],
        }
    }
}

/// `V(s, z)` with a Polyak-averaged target copy.
#[derive(Clone, Debug, PartialEq)]
pub struct LowLevelValue {
    pub net: Mlp,
    pub target: Mlp,
    pub state_dim: usize,
}

impl LowLevelValue {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        z_dim: usize,
        hidden: [usize; 3],
        act: Activation,
        norm: StateNorm,
        rng: &mut R,
    ) -> Self {
        let sizes = [state_dim + z_dim, hidden[0], hidden[1], hidden[2], 1];
        let (shift, scale) = norm_vectors(norm, state_dim, z_dim);
        let net = Mlp::new(&sizes, act, 1e-2, rng).with_input_norm(&shift, &scale);
        let target = net.clone();
        Self {
            net,
            target,
            state_dim,
        }
    }

    pub fn value(&self, s: &[f64], z: &[f64]) -> Result<f64> {
        Self::eval(&self.net, s, z)
    }

    pub fn target_value(&self, s: &[f64], z: &[f64]) -> Result<f64> {
        Self::eval(&self.target, s, z)
    }

    fn eval(net: &Mlp, s: &[f64], z: &[f64]) -> Result<f64> {
        let mut x = s.to_vec();
        x.extend_from_slice(z);
        if x.len() != net.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: net.input_dim(),
                got: x.len(),
            });
        }
        let xm = Array2::from_shape_vec((1, x.len()), x).expect("shape");
        Ok(net.forward_plain(xm.view())[[0, 0]])
    }

    /// `θ̄ ← (1 − τ)·θ̄ + τ·θ`.
    pub fn target_update(&mut self, tau: f64) {
        self.target.polyak_from(&self.net, tau);
    }
}

/// `φ(g, s)`, length-normalised to `√dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalRepresentation {
    pub net: Mlp,
}

impl GoalRepresentation {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        z_dim: usize,
        hidden: [usize; 3],
        act: Activation,
        norm: StateNorm,
        rng: &mut R,
    ) -> Self {
        let sizes = [2 * state_dim, hidden[0], hidden[1], hidden[2], z_dim];
        let mut shift = Vec::new();
        let mut scale = Vec::new();
        for _ in 0..2 {
            let (a, b) = norm_vectors(norm, state_dim, 0);
            shift.extend(a);
            scale.extend(b);
        }
        // the output is normalised, so the final layer keeps unit gain
        let net = Mlp::new(&sizes, act, 1.0, rng).with_input_norm(&shift, &scale);
        Self { net }
    }

    pub fn z_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn norm_constant(&self) -> f64 {
        (self.z_dim() as f64).sqrt()
    }

    pub fn goal_repr(&self, g: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let mut x = g.to_vec();
        x.extend_from_slice(s);
        if x.len() != self.net.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.net.input_dim(),
                got: x.len(),
            });
        }
        let xm = Array2::from_shape_vec((1, x.len()), x).expect("shape");
        Ok(self.embed_batch(xm.view()).into_raw_vec_and_offset().0)
    }

    /// Rows of `[g, s]` to normalised embeddings.
    pub fn embed_batch(&self, gs: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.net.forward_plain(gs);
        let c = self.norm_constant();
        for mut row in z.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| c * x / n);
        }
        z
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], gs: Var) -> Var {
        let raw = self.net.forward(tape, p, gs);
        tape.row_normalize(raw, self.norm_constant())
    }
}

pub(crate) fn norm_vectors(
    norm: StateNorm,
    state_dim: usize,
    extra: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut shift = vec![0.0; state_dim + extra];
    let mut scale = vec![1.0; state_dim + extra];
    let n = state_dim.min(2);
    shift[..n].copy_from_slice(&norm.shift[..n]);
    scale[..n].copy_from_slice(&norm.scale[..n]);
    (shift, scale)
}
