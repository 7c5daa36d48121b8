use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::KernelError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable tensor across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Relu,
        Activation::Softplus,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Sin,
        Activation::Cos,
    ];

    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Sin => x.sin(),
            Activation::Cos => x.cos(),
        }
    }

    /// Derivative given the input `x` and the already computed output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Sin => x.cos(),
            Activation::Cos => -x.sin(),
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// A primitive whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order. `None` means zero.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Activation { kind: Activation, x: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { x: Var, start: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run record of tensor operations.
///
/// With tracing disabled the tape only holds forward values, so the same
/// model code serves both inference and training.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    tracing: bool,
}

/// Gradients keyed by parameter. A parameter absent from the map has a zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new(tracing: bool) -> Self {
        Self { nodes: Vec::new(), tracing }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = self.tracing && requires_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `y = x Wᵀ + b` for `x: B×n`, `W: m×n`, `b: m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, KernelError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, n) = (xv.rows(), xv.cols());
        if wv.dims().len() != 2 || wv.cols() != n || bv.len() != wv.rows() {
            return Err(KernelError::Shape(format!(
                "linear: x {:?}, W {:?}, b {:?}",
                xv.dims(),
                wv.dims(),
                bv.dims()
            )));
        }
        let m = wv.rows();
        let mut out = Vec::with_capacity(batch * m);
        for _ in 0..batch {
            out.extend_from_slice(bv.data());
        }
        T::gemm(
            batch,
            n,
            m,
            T::one(),
            (xv.data(), n as isize, 1),
            (wv.data(), 1, n as isize),
            T::one(),
            (&mut out, m as isize, 1),
        );
        let value = Tensor::matrix(batch, m, out)?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.requires(x);
        self.push(value, Op::Activation { kind, x }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(KernelError::Shape(format!(
                "concat: {:?} vs {:?}",
                av.dims(),
                bv.dims()
            )));
        }
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::matrix(rows, ca + cb, out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::ConcatCols { a, b }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if len == 0 || start + len > cols {
            return Err(KernelError::Shape(format!(
                "slice [{start}, {}) of {cols} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::matrix(rows, len, out)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), KernelError> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(KernelError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.requires(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Records an externally computed primitive.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.requires(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from a scalar node. Every parameter on the tape receives
    /// a gradient, zero if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, KernelError> {
        if !self.tracing {
            return Err(KernelError::Contract("backward on a tape recorded without tracing".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(KernelError::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                lv.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lv.dims(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.param.is_some() {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                match out.grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.grads.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.requires(v) {
            return;
        }
        if let Some(acc) = grads[v.0].as_mut() {
            acc.add_assign(&g);
        } else {
            grads[v.0] = Some(g);
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), KernelError> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, n, m) = (xv.rows(), xv.cols(), wv.rows());
                if self.requires(*x) {
                    let mut dx = vec![T::zero(); batch * n];
                    T::gemm(
                        batch,
                        m,
                        n,
                        T::one(),
                        (g.data(), m as isize, 1),
                        (wv.data(), n as isize, 1),
                        T::zero(),
                        (&mut dx, n as isize, 1),
                    );
                    self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), dx)?);
                }
                if self.requires(*w) {
                    let mut dw = vec![T::zero(); m * n];
                    T::gemm(
                        m,
                        batch,
                        n,
                        T::one(),
                        (g.data(), 1, m as isize),
                        (xv.data(), n as isize, 1),
                        T::zero(),
                        (&mut dw, n as isize, 1),
                    );
                    self.accumulate(grads, *w, Tensor::new(wv.dims().to_vec(), dw)?);
                }
                if self.requires(*b) {
                    let mut db = vec![T::zero(); m];
                    for row in g.data().chunks_exact(m) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let dims = self.value(*b).dims().to_vec();
                    self.accumulate(grads, *b, Tensor::new(dims, db)?);
                }
            }
            Op::Activation { kind, x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), data)?);
            }
            Op::ConcatCols { a, b } => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = node.value.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in g.data().chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::new(self.value(*a).dims().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(self.value(*b).dims().to_vec(), gb)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols, len) = (xv.rows(), xv.cols(), node.value.cols());
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new(xv.dims().to_vec(), dx)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gi, bi| gi * bi));
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |gi, ai| gi * ai));
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Sum { x } => {
                let dims = self.value(*x).dims().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&dims, g.data()[0]));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let results = op.backward(&values, &node.value, g);
                if results.len() != inputs.len() {
                    return Err(KernelError::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        results.len(),
                        inputs.len()
                    )));
                }
                for (&v, r) in inputs.iter().zip(results) {
                    if let Some(gr) = r {
                        if gr.dims() != self.value(v).dims() {
                            return Err(KernelError::Shape(format!(
                                "custom op {} gradient dims {:?} for input {:?}",
                                op.name(),
                                gr.dims(),
                                self.value(v).dims()
                            )));
                        }
                        self.accumulate(grads, v, gr);
                    }
                }
            }
        }
        Ok(())
    }
}
