use crate::error::{Error, Result};

use super::matrix::{Matrix, Real};

/// Log clamp applied inside cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Param,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    BiasAdd(Var, Var),
    Relu(Var),
    RowNormalize { input: Var, norms: Vec<T> },
    Softmax { input: Var, temperature: T },
    CrossEntropy { target: Matrix<T>, pred: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient, kept for parameter leaves only.
    grad: Option<Matrix<T>>,
}

/// Records a forward computation so gradients can be propagated in reverse
/// insertion order. One tape lives for one training step.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    frozen: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stops further recording. Backward and gradient reads stay available.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.frozen {
            return Err(Error::State("tape is frozen".into()));
        }
        let grad = matches!(op, Op::Param).then(|| Matrix::zeros(value.rows(), value.cols()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; its gradient buffer starts at exact zero.
    pub fn param(&mut self, value: Matrix<T>) -> Result<Var> {
        self.push(value, Op::Param, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    /// Same forward value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).scale(factor);
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).bias_add(self.value(bias))?;
        let rg = self.requires(a) || self.requires(bias);
        self.push(value, Op::BiasAdd(a, bias), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).relu();
        let rg = self.requires(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Unit-norm rows. With `detach_graph` the result is recorded as a constant.
    pub fn row_l2_normalize(&mut self, a: Var, detach_graph: bool) -> Result<Var> {
        let input = self.value(a);
        let norms = input.row_norms();
        let value = input.divide_rows(&norms)?;
        if detach_graph {
            self.constant(value)
        } else {
            let rg = self.requires(a);
            self.push(value, Op::RowNormalize { input: a, norms }, rg)
        }
    }

    pub fn softmax_rows(&mut self, z: Var, temperature: T) -> Result<Var> {
        let value = self.value(z).softmax_rows(temperature)?;
        let rg = self.requires(z);
        self.push(value, Op::Softmax { input: z, temperature }, rg)
    }

    /// Mean over rows of `-Σ_k target·ln(max(pred, 1e-12))`. `target` is a constant.
    pub fn cross_entropy_rows(&mut self, target: &Matrix<T>, pred: Var) -> Result<Var> {
        let p = self.value(pred);
        target.check_same_shape(p, "cross_entropy_rows")?;
        if p.data().iter().any(|&x| x < T::zero() || x.is_nan()) {
            return Err(Error::Domain {
                op: "cross_entropy_rows",
                detail: "prediction has negative or NaN entries".into(),
            });
        }
        let value = Matrix::scalar(cross_entropy_value(target, p));
        let rg = self.requires(pred);
        self.push(
            value,
            Op::CrossEntropy {
                target: target.clone(),
                pred,
            },
            rg,
        )
    }

    /// Propagates d`loss`/d(node) to every parameter leaf. Gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != [1, 1] {
            let [r, c] = self.value(loss).shape();
            return Err(Error::shape("backward", format!("loss must be 1x1, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    let acc = self.nodes[i].grad.as_mut().expect("param has grad buffer");
                    acc.add_assign(&g)?;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let da = g.matmul_t(self.value(b))?;
                        accumulate(&mut grads, a, da)?;
                    }
                    if self.requires(b) {
                        let db = self.value(a).t_matmul(&g)?;
                        accumulate(&mut grads, b, db)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a·bᵀ: da = g·b, db = gᵀ·a
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let da = g.matmul(self.value(b))?;
                        accumulate(&mut grads, a, da)?;
                    }
                    if self.requires(b) {
                        let db = g.t_matmul(self.value(a))?;
                        accumulate(&mut grads, b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        accumulate(&mut grads, a, g.clone())?;
                    }
                    if self.requires(b) {
                        accumulate(&mut grads, b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        accumulate(&mut grads, a, g.clone())?;
                    }
                    if self.requires(b) {
                        accumulate(&mut grads, b, g.scale(-T::one()))?;
                    }
                }
                Op::Scale(a, factor) => {
                    let a = *a;
                    let d = g.scale(*factor);
                    accumulate(&mut grads, a, d)?;
                }
                Op::BiasAdd(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    if self.requires(bias) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *acc = *acc + x;
                            }
                        }
                        accumulate(&mut grads, bias, db)?;
                    }
                    if self.requires(a) {
                        accumulate(&mut grads, a, g)?;
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let d = g.zip_map(self.value(a), "relu_backward", |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::RowNormalize { input, norms } => {
                    // y = x/|x|, dx = (g - y (g·y)) / |x|
                    let y = &node.value;
                    let mut d = g;
                    for (r, &norm) in norms.iter().enumerate() {
                        let gy: T = d.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                        for (dx, &yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                            *dx = (*dx - yv * gy) / norm;
                        }
                    }
                    let input = *input;
                    accumulate(&mut grads, input, d)?;
                }
                Op::Softmax { input, temperature } => {
                    // dz = p ⊙ (g - Σ g·p) / τ
                    let p = &node.value;
                    let mut d = g;
                    for r in 0..p.rows() {
                        let gp: T = d.row(r).iter().zip(p.row(r)).map(|(&a, &b)| a * b).sum();
                        for (dz, &pv) in d.row_mut(r).iter_mut().zip(p.row(r)) {
                            *dz = pv * (*dz - gp) / *temperature;
                        }
                    }
                    let input = *input;
                    accumulate(&mut grads, input, d)?;
                }
                Op::CrossEntropy { target, pred } => {
                    let upstream = g.item()?;
                    let p = self.value(*pred);
                    let eps = T::lit(LOG_CLAMP);
                    let n = T::from_usize(p.rows().max(1)).expect("row count");
                    let d = target.zip_map(p, "cross_entropy_backward", |t, pv| {
                        if pv > eps {
                            -upstream * t / (pv * n)
                        } else {
                            T::zero()
                        }
                    })?;
                    let pred = *pred;
                    accumulate(&mut grads, pred, d)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads[v.0] = Some(g);
            Ok(())
        }
    }
}

/// Mean over rows of `-Σ_k target·ln(max(pred, 1e-12))`.
pub fn cross_entropy_value<T: Real>(target: &Matrix<T>, pred: &Matrix<T>) -> T {
    let eps = T::lit(LOG_CLAMP);
    let mut total = T::zero();
    for r in 0..pred.rows() {
        let row: T = target
            .row(r)
            .iter()
            .zip(pred.row(r))
            .map(|(&t, &p)| t * p.max(eps).ln())
            .sum();
        total = total - row;
    }
    total / T::from_usize(pred.rows().max(1)).expect("row count")
}
