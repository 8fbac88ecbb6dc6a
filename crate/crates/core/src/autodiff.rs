//! Minimal reverse-mode differentiation over dense row-major batches.
//!
//! Every value is an `Array2<f64>` with rows indexing the batch. State
//! gradients needed by the Eikonal and HJB penalties are produced by
//! propagating forward-mode tangents through the same tape, so the
//! parameter gradient of a gradient-norm penalty is an ordinary reverse
//! sweep over that extended graph.

use ndarray::{Array2, Axis, Zip};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + row` with `row` of shape `1×m`.
    AddRow(Var, Var),
    /// `a ⊙ row` with `row` of shape `1×m`.
    MulRow(Var, Var),
    /// `a ⊙ col` with `col` of shape `B×1`.
    MulCol(Var, Var),
    /// `a · s` with `s` of shape `1×1`.
    MulScalar(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    /// Derivative of tanh evaluated at the pre-activation: `1 − tanh²`.
    TanhPrime(Var),
    /// Carries `σ(a)` for the backward pass.
    Silu(Var, Array2<f64>),
    SiluPrime(Var, Array2<f64>),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Log1p(Var),
    Exp(Var),
    Relu(Var),
    SumCols(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Row-wise maximum with the arg-max column recorded.
    MaxCols(Var, Vec<usize>),
    Concat(Var, Var),
    /// Row-wise `scale · a / ‖a‖`.
    RowNormalize(Var, f64),
    /// Interval quasimetric components with locally constant Jacobians.
    Iqe {
        u: Var,
        v: Var,
        du: Array2<f64>,
        dv: Array2<f64>,
        group: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Computation record. Build values with the methods below, then call
/// [`Tape::backward`] on a `1×1` result.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient for `v`, zero-filled when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array2<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.tracked(v))
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let t = self.tracked(a);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let t = self.any_tracked(&[a, b]);
        self.push(value, op, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        self.binary(a, row, v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = self.value(a) * self.value(col);
        self.binary(a, col, v, Op::MulCol(a, col))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        debug_assert_eq!(self.shape(s), (1, 1));
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.binary(a, s, v, Op::MulScalar(a, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.unary(a, v, Op::Scale(a, k))
    }

    /// `a + k` elementwise.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.unary(a, v, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn tanh_prime(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| {
            let t = x.tanh();
            1.0 - t * t
        });
        self.unary(a, v, Op::TanhPrime(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let sig = self.value(a).mapv(sigmoid);
        self.silu_from(a, sig)
    }

    fn silu_from(&mut self, a: Var, sig: Array2<f64>) -> Var {
        let mut v = self.value(a).clone();
        v.zip_mut_with(&sig, |x, &s| *x *= s);
        self.unary(a, v, Op::Silu(a, sig))
    }

    pub fn silu_prime(&mut self, a: Var) -> Var {
        let sig = self.value(a).mapv(sigmoid);
        self.silu_prime_from(a, sig)
    }

    fn silu_prime_from(&mut self, a: Var, sig: Array2<f64>) -> Var {
        let mut v = self.value(a).clone();
        v.zip_mut_with(&sig, |x, &s| *x = s * (1.0 + *x * (1.0 - s)));
        self.unary(a, v, Op::SiluPrime(a, sig))
    }

    /// `(silu(a), silu′(a))` sharing one sigmoid evaluation.
    pub fn silu_pair(&mut self, a: Var) -> (Var, Var) {
        let sig = self.value(a).mapv(sigmoid);
        let y = self.silu_from(a, sig.clone());
        (y, self.silu_prime_from(a, sig))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln_1p);
        self.unary(a, v, Op::Log1p(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, v, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len().max(1) as f64);
        self.unary(a, v, Op::MeanAll(a))
    }

    pub fn max_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.nrows());
        let mut out = Array2::zeros((x.nrows(), 1));
        for (r, row) in x.rows().into_iter().enumerate() {
            let mut best = 0;
            for (j, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out[[r, 0]] = row[best];
        }
        self.unary(a, out, Op::MaxCols(a, arg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat requires equal row counts");
        self.binary(a, b, v, Op::Concat(a, b))
    }

    pub fn row_normalize(&mut self, a: Var, scale: f64) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| scale * x / n);
        }
        self.unary(a, v, Op::RowNormalize(a, scale))
    }

    /// Per-group union-of-intervals measure between latents `u` and `v`.
    ///
    /// The Jacobians `du`, `dv` (entries in {-1, 0, 1}) are computed by the
    /// caller and treated as locally constant.
    pub fn iqe(
        &mut self,
        u: Var,
        v: Var,
        comps: Array2<f64>,
        du: Array2<f64>,
        dv: Array2<f64>,
        group: usize,
    ) -> Var {
        self.binary(
            u,
            v,
            comps,
            Op::Iqe {
                u,
                v,
                du,
                dv,
                group,
            },
        )
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        grads[out.0] = Some(Array2::ones(self.nodes[out.0].value.dim()));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads, shapes }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        y: &Array2<f64>,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.tracked(*r) {
                    self.acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.tracked(*a) {
                    self.acc(grads, *a, g * self.value(*r));
                }
                if self.tracked(*r) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *r, gr);
                }
            }
            Op::MulCol(a, c) => {
                if self.tracked(*a) {
                    self.acc(grads, *a, g * self.value(*c));
                }
                if self.tracked(*c) {
                    let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *c, gc);
                }
            }
            Op::MulScalar(a, s) => {
                if self.tracked(*a) {
                    self.acc(grads, *a, g * self.scalar(*s));
                }
                if self.tracked(*s) {
                    let gs = (g * self.value(*a)).sum();
                    self.acc(grads, *s, Array2::from_elem((1, 1), gs));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Shift(a) => self.acc(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                self.acc(grads, *a, d);
            }
            Op::TanhPrime(a) => {
                // d/dx (1 − tanh²x) = −2 tanh x (1 − tanh² x)
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let t = x.tanh();
                    *d *= -2.0 * t * (1.0 - t * t);
                });
                self.acc(grads, *a, d);
            }
            Op::Silu(a, sig) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .and(sig)
                    .for_each(|d, &x, &s| {
                        *d *= s * (1.0 + x * (1.0 - s));
                    });
                self.acc(grads, *a, d);
            }
            Op::SiluPrime(a, sig) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .and(sig)
                    .for_each(|d, &x, &s| {
                        *d *= s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
                    });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(y)
                    .for_each(|d, &s| *d *= s * (1.0 - s));
                self.acc(grads, *a, d);
            }
            Op::Square(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= 2.0 * x);
                self.acc(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let mut d = g.clone();
                // zero subgradient at the origin of the square root
                Zip::from(&mut d)
                    .and(y)
                    .for_each(|d, &r| *d *= if r > 0.0 { 0.5 / r } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Log1p(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d /= 1.0 + x);
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * y),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let cols = self.shape(*a).1;
                let d = g
                    .broadcast(self.shape(*a))
                    .map(|b| b.to_owned())
                    .unwrap_or_else(|| {
                        Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]])
                    });
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1).max(1) as f64;
                self.acc(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::MaxCols(a, arg) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (r, &j) in arg.iter().enumerate() {
                    d[[r, j]] = g[[r, 0]];
                }
                self.acc(grads, *a, d);
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a).1;
                if self.tracked(*a) {
                    self.acc(grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                }
                if self.tracked(*b) {
                    self.acc(grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                }
            }
            Op::RowNormalize(a, scale) => {
                let x = self.value(*a);
                let mut d = Array2::zeros(x.dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.dot(&xr).sqrt().max(1e-12);
                    let gr = g.row(r);
                    let proj = xr.dot(&gr) / (n * n);
                    for c in 0..x.ncols() {
                        d[[r, c]] = scale / n * (gr[c] - xr[c] * proj);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Iqe {
                u,
                v,
                du,
                dv,
                group,
            } => {
                // expand the per-group upstream gradient over its coordinates
                let expand = |jac: &Array2<f64>| {
                    Array2::from_shape_fn(jac.dim(), |(r, i)| jac[[r, i]] * g[[r, i / group]])
                };
                if self.tracked(*u) {
                    self.acc(grads, *u, expand(du));
                }
                if self.tracked(*v) {
                    self.acc(grads, *v, expand(dv));
                }
            }
        }
    }
}
