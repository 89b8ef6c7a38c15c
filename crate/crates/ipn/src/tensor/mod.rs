//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass and is
//! consumed by [`Tape::backward`], which propagates exact analytic gradients
//! back to every tensor with `requires_grad` set. Frozen tensors participate
//! in the forward pass and let gradients flow *through* them, but never
//! receive a gradient buffer themselves.
//!
//! The element type is generic: training runs in `f32`, gradient checking in
//! `f64` (central finite differences need the precision).

mod check;
mod optim;

pub use check::{finite_diff_grad, max_rel_err, rel_err};
pub use optim::{cosine_lr, AdamW, DEFAULT_WEIGHT_DECAY};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt::{Debug, Display};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Element type bound for all tensor math.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + 'static {}
impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + 'static
{
}

/// Shorthand for writing numeric literals in generic code.
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal not representable")
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: index {index} out of range for size {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter `{name}` has no gradient buffer")]
    MissingGrad { name: String },
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Dense n-dimensional value, optionally tracked for gradients.
///
/// Cloning a `Tensor` clones the handle, not the storage.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad: false,
                grad: None,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); n])
    }

    pub fn scalar(x: T) -> Self {
        Tensor::new(vec![1], vec![x])
    }

    /// Trainable leaf: gradient buffer allocated up front.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Self {
        let t = Tensor::new(shape, data);
        t.set_requires_grad(true);
        t
    }

    /// Stable identity of the storage, used as a tape key.
    fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    pub fn set_data(&self, data: Vec<T>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "value() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Toggles tracking; the gradient buffer exists iff tracking is on.
    pub fn set_requires_grad(&self, on: bool) {
        let mut inner = self.inner.borrow_mut();
        inner.requires_grad = on;
        if on {
            let n = inner.data.len();
            if inner.grad.is_none() {
                inner.grad = Some(vec![T::zero(); n]);
            }
        } else {
            inner.grad = None;
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn norm(&self) -> f64 {
        self.inner
            .borrow()
            .data
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap_or(0.0);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.inner
            .borrow()
            .data
            .iter()
            .map(|x| x.to_f32().unwrap())
            .collect()
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| lit::<T>(x as f64)).collect())
    }

    fn accum_grad(&self, delta: &[T]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let g = inner.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    /// Interprets the tensor as a matrix: 1-D `[n]` reads as `[1, n]`.
    fn dims2(&self) -> (usize, usize) {
        let inner = self.inner.borrow();
        match inner.shape.len() {
            1 => (1, inner.shape[0]),
            2 => (inner.shape[0], inner.shape[1]),
            _ => panic!("rank > 2 unsupported: {:?}", inner.shape),
        }
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            inner.shape, inner.requires_grad
        )
    }
}

/// Transient gradient store used during one backward sweep.
///
/// Tensors produced on the tape get an entry here; trackable leaves
/// accumulate straight into their persistent buffer; frozen leaves are
/// skipped entirely (their gradient is never even computed).
struct GradSink<'a, T: Scalar> {
    transient: HashMap<usize, Vec<T>>,
    on_tape: &'a HashSet<usize>,
}

impl<'a, T: Scalar> GradSink<'a, T> {
    fn wants(&self, t: &Tensor<T>) -> bool {
        self.on_tape.contains(&t.id()) || t.requires_grad()
    }

    fn accum(&mut self, t: &Tensor<T>, compute: impl FnOnce() -> Vec<T>) {
        if self.on_tape.contains(&t.id()) {
            let delta = compute();
            let entry = self
                .transient
                .entry(t.id())
                .or_insert_with(|| vec![T::zero(); t.len()]);
            for (gi, di) in entry.iter_mut().zip(&delta) {
                *gi = *gi + *di;
            }
        } else if t.requires_grad() {
            let delta = compute();
            t.accum_grad(&delta);
        }
    }

    fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        self.transient.remove(&t.id())
    }
}

type BackFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    out: Tensor<T>,
    backward: Option<BackFn<T>>,
}

/// Records one forward pass; consumed by [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    on_tape: RefCell<HashSet<usize>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            on_tape: RefCell::new(HashSet::new()),
            recording: true,
        }
    }

    /// Forward-only tape: values are computed, nothing is recorded.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            on_tape: RefCell::new(HashSet::new()),
            recording: false,
        }
    }

    fn push(&self, out: &Tensor<T>, backward: BackFn<T>) {
        if !self.recording {
            return;
        }
        self.on_tape.borrow_mut().insert(out.id());
        self.nodes.borrow_mut().push(Node {
            out: out.clone(),
            backward: Some(backward),
        });
    }

    /// Propagates gradients from a scalar loss back through the tape,
    /// consuming it. Tracked leaves accumulate into their persistent
    /// gradient buffers; untracked leaves receive nothing.
    pub fn backward(self, loss: &Tensor<T>) -> Result<(), TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape(),
            });
        }
        let on_tape = self.on_tape.into_inner();
        let mut sink = GradSink {
            transient: HashMap::new(),
            on_tape: &on_tape,
        };
        if on_tape.contains(&loss.id()) {
            sink.transient.insert(loss.id(), vec![T::one()]);
        } else if loss.requires_grad() {
            loss.accum_grad(&[T::one()]);
            return Ok(());
        } else {
            // loss disconnected from the tape: nothing to do
            return Ok(());
        }
        let mut nodes = self.nodes.into_inner();
        for node in nodes.iter_mut().rev() {
            if let Some(g) = sink.take(&node.out) {
                if let Some(back) = node.backward.take() {
                    back(&g, &mut sink);
                }
            }
        }
        Ok(())
    }

    // ---- primitives ---------------------------------------------------

    /// `a [m,k] x b [k,n] -> [m,n]`
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = {
            let av = a.data();
            let bv = b.data();
            let mut c = vec![T::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] = crow[j] + aip * brow[j];
                    }
                }
            }
            Tensor::new(vec![m, n], c)
        };
        let (ac, bc) = (a.clone(), b.clone());
        self.push(
            &out,
            Box::new(move |g, sink| {
                if sink.wants(&ac) {
                    let bv = bc.to_vec();
                    sink.accum(&ac, || {
                        let mut da = vec![T::zero(); m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == T::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] = da[i * k + p] + gij * bv[p * n + j];
                                }
                            }
                        }
                        da
                    });
                }
                if sink.wants(&bc) {
                    let av = ac.to_vec();
                    sink.accum(&bc, || {
                        let mut db = vec![T::zero(); k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == T::zero() {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + aip * g[i * n + j];
                                }
                            }
                        }
                        db
                    });
                }
            }),
        );
        Ok(out)
    }

    /// `a [m,k] x b^T` where `b` is `[n,k]` -> `[m,n]`
    pub fn matmul_nt(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k) = a.dims2();
        let (n, k2) = b.dims2();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = {
            let av = a.data();
            let bv = b.data();
            let mut c = vec![T::zero(); m * n];
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut s = T::zero();
                    for p in 0..k {
                        s = s + arow[p] * brow[p];
                    }
                    c[i * n + j] = s;
                }
            }
            Tensor::new(vec![m, n], c)
        };
        let (ac, bc) = (a.clone(), b.clone());
        self.push(
            &out,
            Box::new(move |g, sink| {
                if sink.wants(&ac) {
                    let bv = bc.to_vec();
                    sink.accum(&ac, || {
                        // dA = g . B
                        let mut da = vec![T::zero(); m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == T::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] = da[i * k + p] + gij * bv[j * k + p];
                                }
                            }
                        }
                        da
                    });
                }
                if sink.wants(&bc) {
                    let av = ac.to_vec();
                    sink.accum(&bc, || {
                        // dB = g^T . A
                        let mut db = vec![T::zero(); n * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == T::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    db[j * k + p] = db[j * k + p] + gij * av[i * k + p];
                                }
                            }
                        }
                        db
                    });
                }
            }),
        );
        Ok(out)
    }

    /// Elementwise add; `b` may also be a `[n]` (or `[1,n]`) row vector
    /// broadcast over the rows of `a [m,n]`.
    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, n) = a.dims2();
        let (bm, bn) = b.dims2();
        let broadcast = bm == 1 && m > 1 && bn == n;
        if !broadcast && (bm != m || bn != n) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = {
            let av = a.data();
            let bv = b.data();
            let mut c = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    let bij = if broadcast { bv[j] } else { bv[i * n + j] };
                    c.push(av[i * n + j] + bij);
                }
            }
            Tensor::new(a.shape(), c)
        };
        let (ac, bc) = (a.clone(), b.clone());
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&ac, || g.to_vec());
                sink.accum(&bc, || {
                    if broadcast {
                        let mut db = vec![T::zero(); n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] = db[j] + g[i * n + j];
                            }
                        }
                        db
                    } else {
                        g.to_vec()
                    }
                });
            }),
        );
        Ok(out)
    }

    /// Elementwise product, same shapes.
    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let out = {
            let av = a.data();
            let bv = b.data();
            Tensor::new(
                a.shape(),
                av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect(),
            )
        };
        let (ac, bc) = (a.clone(), b.clone());
        self.push(
            &out,
            Box::new(move |g, sink| {
                if sink.wants(&ac) {
                    let bv = bc.to_vec();
                    sink.accum(&ac, || g.iter().zip(&bv).map(|(&gi, &bi)| gi * bi).collect());
                }
                if sink.wants(&bc) {
                    let av = ac.to_vec();
                    sink.accum(&bc, || g.iter().zip(&av).map(|(&gi, &ai)| gi * ai).collect());
                }
            }),
        );
        Ok(out)
    }

    pub fn scale(&self, a: &Tensor<T>, s: T) -> Tensor<T> {
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| x * s).collect());
        let ac = a.clone();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&ac, || g.iter().map(|&gi| gi * s).collect());
            }),
        );
        out
    }

    pub fn tanh(&self, a: &Tensor<T>) -> Tensor<T> {
        let out = Tensor::new(a.shape(), a.data().iter().map(|x| x.tanh()).collect());
        let (ac, oc) = (a.clone(), out.clone());
        self.push(
            &out,
            Box::new(move |g, sink| {
                let y = oc.to_vec();
                sink.accum(&ac, || {
                    g.iter()
                        .zip(&y)
                        .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                        .collect()
                });
            }),
        );
        out
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Tensor<T>) -> Tensor<T> {
        let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
        let k = lit::<T>(0.044715);
        let half = lit::<T>(0.5);
        let gelu_val = |x: T| half * x * (T::one() + (c * (x + k * x * x * x)).tanh());
        let out = Tensor::new(a.shape(), a.data().iter().map(|&x| gelu_val(x)).collect());
        let ac = a.clone();
        self.push(
            &out,
            Box::new(move |g, sink| {
                let xs = ac.to_vec();
                sink.accum(&ac, || {
                    g.iter()
                        .zip(&xs)
                        .map(|(&gi, &x)| {
                            let u = c * (x + k * x * x * x);
                            let t = u.tanh();
                            let sech2 = T::one() - t * t;
                            let du = c * (T::one() + lit::<T>(3.0) * k * x * x);
                            let d = half * (T::one() + t) + half * x * sech2 * du;
                            gi * d
                        })
                        .collect()
                });
            }),
        );
        out
    }

    /// Softmax over the last axis (each row of a matrix).
    pub fn softmax(&self, a: &Tensor<T>) -> Tensor<T> {
        let (m, n) = a.dims2();
        let out = {
            let av = a.data();
            let mut c = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    c[i * n + j] = e;
                    z = z + e;
                }
                for j in 0..n {
                    c[i * n + j] = c[i * n + j] / z;
                }
            }
            Tensor::new(a.shape(), c)
        };
        let (ac, oc) = (a.clone(), out.clone());
        self.push(
            &out,
            Box::new(move |g, sink| {
                let s = oc.to_vec();
                sink.accum(&ac, || {
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + g[i * n + j] * s[i * n + j];
                        }
                        for j in 0..n {
                            da[i * n + j] = s[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                    da
                });
            }),
        );
        out
    }

    /// Row-wise layer norm with affine terms. A constant row normalizes to
    /// zeros before `gamma`/`beta` (epsilon keeps the denominator finite).
    pub fn layer_norm(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let (m, n) = x.dims2();
        if gamma.len() != n || beta.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape(),
                rhs: gamma.shape(),
            });
        }
        let eps = lit::<T>(LAYER_NORM_EPS);
        let nn = lit::<T>(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let out = {
            let xv = x.data();
            let gv = gamma.data();
            let bv = beta.data();
            let mut c = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mut mu = T::zero();
                for &v in row {
                    mu = mu + v;
                }
                mu = mu / nn;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mu;
                    var = var + d * d;
                }
                var = var / nn;
                let istd = T::one() / (var + eps).sqrt();
                inv_std[i] = istd;
                for j in 0..n {
                    let xh = (row[j] - mu) * istd;
                    xhat[i * n + j] = xh;
                    c[i * n + j] = xh * gv[j] + bv[j];
                }
            }
            Tensor::new(x.shape(), c)
        };
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        self.push(
            &out,
            Box::new(move |g, sink| {
                let gv = gc.to_vec();
                if sink.wants(&xc) {
                    sink.accum(&xc, || {
                        let mut dx = vec![T::zero(); m * n];
                        for i in 0..m {
                            // dxhat = g * gamma; standard layer-norm backward
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for j in 0..n {
                                let d = g[i * n + j] * gv[j];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xhat[i * n + j];
                            }
                            let mean_d = sum_d / nn;
                            let mean_dx = sum_dx / nn;
                            for j in 0..n {
                                let d = g[i * n + j] * gv[j];
                                dx[i * n + j] =
                                    inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
                            }
                        }
                        dx
                    });
                }
                sink.accum(&gc, || {
                    let mut dg = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] = dg[j] + g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    dg
                });
                sink.accum(&bc, || {
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g[i * n + j];
                        }
                    }
                    db
                });
            }),
        );
        Ok(out)
    }

    /// Embedding lookup: rows of `table [V,d]` selected by `ids`.
    pub fn embed(&self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>, TensorError> {
        let (v, d) = table.dims2();
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    len: v,
                });
            }
        }
        let out = {
            let tv = table.data();
            let mut c = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                c.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], c)
        };
        let tc = table.clone();
        let ids = ids.to_vec();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&tc, || {
                    let mut dt = vec![T::zero(); v * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[row * d + j];
                        }
                    }
                    dt
                });
            }),
        );
        Ok(out)
    }

    /// Stacks matrices along the row (sequence) axis.
    pub fn concat_rows(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, n) = parts[0].dims2();
        let mut rows = 0;
        for p in parts {
            let (pm, pn) = p.dims2();
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            rows += pm;
        }
        let out = {
            let mut c = Vec::with_capacity(rows * n);
            for p in parts {
                c.extend_from_slice(&p.data());
            }
            Tensor::new(vec![rows, n], c)
        };
        let handles: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        self.push(
            &out,
            Box::new(move |g, sink| {
                let mut offset = 0;
                for h in &handles {
                    let len = h.len();
                    let seg = g[offset..offset + len].to_vec();
                    sink.accum(h, || seg);
                    offset += len;
                }
            }),
        );
        Ok(out)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(
        &self,
        a: &Tensor<T>,
        start: usize,
        end: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let (m, n) = a.dims2();
        if start > end || end > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: m,
            });
        }
        let out = Tensor::new(
            vec![end - start, n],
            a.data()[start * n..end * n].to_vec(),
        );
        let ac = a.clone();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&ac, || {
                    let mut da = vec![T::zero(); m * n];
                    da[start * n..end * n].copy_from_slice(g);
                    da
                });
            }),
        );
        Ok(out)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(
        &self,
        a: &Tensor<T>,
        start: usize,
        end: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let (m, n) = a.dims2();
        if start > end || end > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: n,
            });
        }
        let w = end - start;
        let out = {
            let av = a.data();
            let mut c = Vec::with_capacity(m * w);
            for i in 0..m {
                c.extend_from_slice(&av[i * n + start..i * n + end]);
            }
            Tensor::new(vec![m, w], c)
        };
        let ac = a.clone();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&ac, || {
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + end]
                            .copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    da
                });
            }),
        );
        Ok(out)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (m, _) = parts[0].dims2();
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.dims2();
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            total += pn;
        }
        let out = {
            let mut c = vec![T::zero(); m * total];
            let mut col = 0;
            for p in parts {
                let (_, pn) = p.dims2();
                let pv = p.data();
                for i in 0..m {
                    c[i * total + col..i * total + col + pn]
                        .copy_from_slice(&pv[i * pn..(i + 1) * pn]);
                }
                col += pn;
            }
            Tensor::new(vec![m, total], c)
        };
        let handles: Vec<(Tensor<T>, usize)> = parts.iter().map(|p| ((*p).clone(), p.dims2().1)).collect();
        self.push(
            &out,
            Box::new(move |g, sink| {
                let mut col = 0;
                for (h, pn) in &handles {
                    let pn = *pn;
                    let seg: Vec<T> = (0..m)
                        .flat_map(|i| g[i * total + col..i * total + col + pn].to_vec())
                        .collect();
                    sink.accum(h, || seg);
                    col += pn;
                }
            }),
        );
        Ok(out)
    }

    /// Mean over the row axis: `[m,n] -> [1,n]`.
    pub fn mean_rows(&self, a: &Tensor<T>) -> Tensor<T> {
        let (m, n) = a.dims2();
        let mm = lit::<T>(m as f64);
        let out = {
            let av = a.data();
            let mut c = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    c[j] = c[j] + av[i * n + j];
                }
            }
            for cj in c.iter_mut() {
                *cj = *cj / mm;
            }
            Tensor::new(vec![1, n], c)
        };
        let ac = a.clone();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&ac, || {
                    let mut da = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        da.extend(g.iter().map(|&gj| gj / mm));
                    }
                    da
                });
            }),
        );
        out
    }

    /// Mean of all elements.
    pub fn mean(&self, a: &Tensor<T>) -> Tensor<T> {
        let n = a.len();
        let nn = lit::<T>(n as f64);
        let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let out = Tensor::scalar(s / nn);
        let ac = a.clone();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&ac, || vec![g[0] / nn; n]);
            }),
        );
        out
    }

    /// Sum of all elements.
    pub fn sum(&self, a: &Tensor<T>) -> Tensor<T> {
        let n = a.len();
        let s = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let out = Tensor::scalar(s);
        let ac = a.clone();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&ac, || vec![g[0]; n]);
            }),
        );
        out
    }

    /// Mean next-token negative log-likelihood over `targets`.
    pub fn cross_entropy(
        &self,
        logits: &Tensor<T>,
        targets: &[usize],
    ) -> Result<Tensor<T>, TensorError> {
        let (m, v) = logits.dims2();
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: v,
                });
            }
        }
        let mm = lit::<T>(m as f64);
        let mut probs = vec![T::zero(); m * v];
        let mut nll = T::zero();
        {
            let lv = logits.data();
            for i in 0..m {
                let row = &lv[i * v..(i + 1) * v];
                let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..v {
                    let e = (row[j] - mx).exp();
                    probs[i * v + j] = e;
                    z = z + e;
                }
                for j in 0..v {
                    probs[i * v + j] = probs[i * v + j] / z;
                }
                nll = nll - probs[i * v + targets[i]].max(lit::<T>(1e-30)).ln();
            }
        }
        let out = Tensor::scalar(nll / mm);
        let lc = logits.clone();
        let targets = targets.to_vec();
        self.push(
            &out,
            Box::new(move |g, sink| {
                sink.accum(&lc, || {
                    let mut dl = Vec::with_capacity(m * v);
                    let scale = g[0] / mm;
                    for i in 0..m {
                        for j in 0..v {
                            let p = probs[i * v + j];
                            let y = if targets[i] == j { T::one() } else { T::zero() };
                            dl.push(scale * (p - y));
                        }
                    }
                    dl
                });
            }),
        );
        Ok(out)
    }

    /// Adds a causal mask in-place as a constant: entry (i, j) gets a large
    /// negative value when j > i.
    pub fn causal_mask(&self, scores: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, n) = scores.dims2();
        let mut mask = vec![T::zero(); m * n];
        for i in 0..m {
            for j in (i + 1)..n {
                mask[i * n + j] = lit::<T>(MASK_NEG);
            }
        }
        self.add(scores, &Tensor::new(vec![m, n], mask))
    }
}
