//! Fully connected networks, initialisation and the Adam optimiser.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    #[default]
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn node(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Silu => tape.silu(x),
        }
    }

    /// Activation and its derivative at the same pre-activation.
    fn node_and_prime(self, tape: &mut Tape, x: Var) -> (Var, Var) {
        match self {
            Activation::Tanh => {
                let y = tape.tanh(x);
                (y, tape.tanh_prime(x))
            }
            Activation::Silu => tape.silu_pair(x),
        }
    }
}

/// `rows×cols` matrix with orthonormal rows or columns, scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    gain: f64,
    rng: &mut R,
) -> Array2<f64> {
    let (n, k) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    // Gram-Schmidt over k Gaussian vectors of length n
    let mut q = Array2::<f64>::zeros((k, n));
    for i in 0..k {
        loop {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for j in 0..i {
                let prev = q.row(j);
                let dot: f64 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(prev.iter()) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (dst, a) in q.row_mut(i).iter_mut().zip(v) {
                    *dst = a / norm;
                }
                break;
            }
        }
    }
    let q = if rows >= cols { q.reversed_axes() } else { q };
    q * gain
}

/// Dense network with a fixed affine input normalisation.
///
/// Parameters are stored as `[w0, b0, w1, b1, ...]` with `w` shaped
/// `in×out` and `b` shaped `1×out`. The final layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    params: Vec<Array2<f64>>,
    activation: Activation,
    shift: Array2<f64>,
    scale: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        final_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n_layers = sizes.len() - 1;
        let mut params = Vec::with_capacity(2 * n_layers);
        for l in 0..n_layers {
            let gain = if l + 1 == n_layers { final_gain } else { 1.0 };
            params.push(orthogonal(sizes[l], sizes[l + 1], gain, rng));
            params.push(Array2::zeros((1, sizes[l + 1])));
        }
        let d = sizes[0];
        Self {
            params,
            activation,
            shift: Array2::zeros((1, d)),
            scale: Array2::ones((1, d)),
        }
    }

    /// Inputs are mapped to `(x + shift) · scale` before the first layer.
    pub fn with_input_norm(mut self, shift: &[f64], scale: &[f64]) -> Self {
        let d = self.input_dim();
        assert_eq!(shift.len(), d);
        assert_eq!(scale.len(), d);
        self.shift = Array2::from_shape_vec((1, d), shift.to_vec()).expect("shape");
        self.scale = Array2::from_shape_vec((1, d), scale.to_vec()).expect("shape");
        self
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.params[self.params.len() - 1].ncols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_scale(&self) -> &Array2<f64> {
        &self.scale
    }

    pub fn blocks(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn blocks_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.params.len() / 2
    }

    /// Zeroes the last weight matrix and bias, making the output constant 0.
    pub fn zero_final(&mut self) {
        let n = self.params.len();
        self.params[n - 1].fill(0.0);
        self.params[n - 2].fill(0.0);
    }

    /// Tape-free evaluation.
    pub fn forward_plain(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = (&x + &self.shift) * &self.scale;
        let n = self.n_layers();
        for l in 0..n {
            let mut pre = h.dot(&self.params[2 * l]) + &self.params[2 * l + 1];
            if l + 1 < n {
                let act = self.activation;
                pre.mapv_inplace(|v| act.apply(v));
            }
            h = pre;
        }
        h
    }

    /// Places the parameters on the tape, tracked or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn normalise(&self, tape: &mut Tape, x: Var) -> Var {
        let shift = tape.constant(self.shift.clone());
        let scale = tape.constant(self.scale.clone());
        let h = tape.add_row(x, shift);
        tape.mul_row(h, scale)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let mut h = self.normalise(tape, x);
        let n = self.n_layers();
        for l in 0..n {
            let z = tape.matmul(h, p[2 * l]);
            let pre = tape.add_row(z, p[2 * l + 1]);
            h = if l + 1 < n {
                self.activation.node(tape, pre)
            } else {
                pre
            };
        }
        h
    }

    /// Forward pass that also carries directional derivatives.
    ///
    /// Each entry of `tangents` is a `B×in` matrix of raw input directions;
    /// the returned tangents are the matching `B×out` output derivatives.
    /// They are ordinary tape nodes, so gradients of any function of them
    /// flow back into the parameters.
    pub fn forward_tangent(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        tangents: &[Array2<f64>],
    ) -> (Var, Vec<Var>) {
        let mut h = self.normalise(tape, x);
        let mut dh: Vec<Var> = tangents
            .iter()
            .map(|t| tape.constant(t * &self.scale))
            .collect();
        let n = self.n_layers();
        for l in 0..n {
            let z = tape.matmul(h, p[2 * l]);
            let pre = tape.add_row(z, p[2 * l + 1]);
            let dpre: Vec<Var> = dh.iter().map(|&d| tape.matmul(d, p[2 * l])).collect();
            if l + 1 < n {
                let (act, slope) = self.activation.node_and_prime(tape, pre);
                h = act;
                dh = dpre.into_iter().map(|d| tape.mul(d, slope)).collect();
            } else {
                h = pre;
                dh = dpre;
            }
        }
        (h, dh)
    }

    /// `self ← (1 − τ)·self + τ·online`.
    pub fn polyak_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            t.zip_mut_with(o, |t, &o| *t = (1.0 - tau) * *t + tau * o);
        }
    }
}

/// Rows of `a` stacked with rows of `b`.
pub fn stack_rows(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("equal column counts")
}

/// Adaptive-moment optimiser state for a fixed list of blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let zeros: Vec<Array2<f64>> = shapes.into_iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Array2<f64>>,
        grads: &[Array2<f64>],
    ) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let eps = self.eps;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
