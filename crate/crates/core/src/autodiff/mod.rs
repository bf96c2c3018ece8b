//! Tape-based eager reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] computes its value immediately and appends a
//! node to the owning [`Tape`]. [`Tape::backward`] walks the nodes in exact
//! reverse order of recording, accumulating gradients additively.

mod finite_diff;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use finite_diff::{finite_diff_grad, relative_error};

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::tensor::conv::{self, ConvGeometry};
use crate::tensor::{reduced_shape, Real, Shape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Param`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named model tensor. Trainable params receive gradients; the rest are
/// persisted state (such as the ActNorm init flag).
#[derive(Debug)]
pub struct Param<T: Real> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Real> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad: None,
            trainable: true,
        }
    }

    /// Non-trainable persisted state.
    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            trainable: false,
            ..Param::new(name, value)
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad = Some(match self.grad.take() {
            Some(old) => old.add(g)?,
            None => g.clone(),
        });
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    LogAbs(usize),
    Square(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Elu(usize),
    Affine(usize, T),
    Clamp(usize, T, T),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        mask: Option<Rc<[bool]>>,
        geom: ConvGeometry,
    },
    ChannelMatmul(usize, usize),
    LogAbsDet(usize),
    Reduce(usize, ReduceOp),
    BroadcastTo(usize),
    SliceChannels(usize, usize),
    ConcatChannels(Vec<usize>),
    Squeeze(usize),
    Unsqueeze(usize),
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass. Confined to one thread.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    strict: bool,
    backward_done: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    /// A strict tape: division by an exact zero is an error.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            strict: true,
            backward_done: Cell::new(false),
        }
    }

    /// A tape that lets division by zero produce (and then reject) non-finite values.
    pub fn lenient() -> Self {
        Tape {
            strict: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated binds of the same param return one node.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&p.id) {
            return Var { tape: self, id };
        }
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.borrow_mut().insert(p.id, v.id);
        v
    }

    /// Clears the backward flag so the tape may be differentiated again.
    pub fn reset(&self) {
        self.backward_done.set(false);
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::DetachedGraph);
        }
        if self.backward_done.get() {
            return Err(Error::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != Shape::SCALAR {
            return Err(Error::NonScalarLoss(shape));
        }
        if !nodes[loss.id].requires_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let inputs = backward_node(&nodes, node, &g)?;
            grads[id] = Some(g);
            for (input, gi) in inputs {
                if !nodes[input].requires_grad {
                    continue;
                }
                accumulate(&mut grads, input, gi)?;
            }
        }
        self.backward_done.set(true);
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) -> Result<()> {
    grads[id] = Some(match grads[id].take() {
        Some(old) => old.add(&g)?,
        None => g,
    });
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// Broadcast-aware gradient pair for binary ops.
fn binary_grads<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ga: Tensor<T>,
    gb: Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((ga.reduce_to(a.shape())?, gb.reduce_to(b.shape())?))
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |i: usize| nodes[i].value.as_ref();
    let y = node.value.as_ref();
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => {
            let (ga, gb) = binary_grads(val(*a), val(*b), g.clone(), g.clone())?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Sub(a, b) => {
            let (ga, gb) = binary_grads(val(*a), val(*b), g.clone(), g.map(|v| -v))?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let ga = g.mul(val(*b))?;
            let gb = g.mul(val(*a))?;
            let (ga, gb) = binary_grads(val(*a), val(*b), ga, gb)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            let ga = g.div(bv)?;
            // d(a/b)/db = -(a/b)/b = -y/b
            let gb = g.mul(y)?.div(bv)?.map(|v| -v);
            let (ga, gb) = binary_grads(val(*a), bv, ga, gb)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Neg(a) => vec![(*a, g.map(|v| -v))],
        Op::Exp(a) => vec![(*a, g.mul(y)?)],
        Op::Log(a) | Op::LogAbs(a) => vec![(*a, g.div(val(*a))?)],
        Op::Square(a) => vec![(*a, g.zip_with(val(*a), "square", |gv, x| gv * (x + x))?)],
        Op::Sigmoid(a) => vec![(
            *a,
            g.zip_with(y, "sigmoid", |gv, s| gv * s * (T::one() - s))?,
        )],
        Op::LogSigmoid(a) => vec![(
            *a,
            g.zip_with(val(*a), "log_sigmoid", |gv, x| gv * sigmoid(-x))?,
        )],
        Op::Elu(a) => vec![(
            *a,
            g.zip_with(val(*a), "elu", |gv, x| {
                if x > T::zero() {
                    gv
                } else {
                    gv * x.exp()
                }
            })?,
        )],
        Op::Affine(a, scale) => vec![(*a, g.scale(*scale))],
        Op::Clamp(a, lo, hi) => vec![(
            *a,
            g.zip_with(val(*a), "clamp", |gv, x| {
                if x < *lo || x > *hi {
                    T::zero()
                } else {
                    gv
                }
            })?,
        )],
        Op::Conv2d {
            x,
            w,
            b,
            mask,
            geom,
        } => {
            let (gx, gw, gb) = conv::conv2d_backward(val(*x), val(*w), mask.as_deref(), geom, g)?;
            let mut out = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                out.push((*b, gb));
            }
            out
        }
        Op::ChannelMatmul(x, w) => {
            let xv = val(*x);
            let wv = val(*w);
            let [_, _, co, ci] = wv.shape().0;
            // gx = g W, i.e. channel_matmul with W^T.
            let wt = Tensor::from_fn(Shape::new(1, 1, ci, co), |[_, _, i, o]| wv.at(0, 0, o, i));
            let gx = g.channel_matmul(&wt)?;
            let rows = xv.len() / ci;
            let mut gw = vec![T::zero(); co * ci];
            let (gd, xd) = (g.data(), xv.data());
            for r in 0..rows {
                for o in 0..co {
                    let gv = gd[r * co + o];
                    for i in 0..ci {
                        gw[o * ci + i] = gw[o * ci + i] + gv * xd[r * ci + i];
                    }
                }
            }
            vec![(*x, gx), (*w, Tensor::from_vec(wv.shape(), gw)?)]
        }
        Op::LogAbsDet(w) => {
            let wv = val(*w);
            let n = wv.shape().c();
            let inv = Lu::new(&wv.to_f64_vec(), n)?.inverse();
            // d ln|det W| / dW = W^{-T}
            let gs = g.item().as_f64();
            let gw = Tensor::from_fn(wv.shape(), |[_, _, r, c]| T::lit(gs * inv[c * n + r]));
            vec![(*w, gw)]
        }
        Op::Reduce(a, op) => {
            let av = val(*a);
            let gb = g.broadcast_to(av.shape())?;
            let gi = match op {
                ReduceOp::Sum => gb,
                ReduceOp::Mean => {
                    let k = T::lit((av.len() / y.len()) as f64);
                    gb.map(|v| v / k)
                }
                ReduceOp::LogSumExp => {
                    let w = av.sub(y)?.map(|v| v.exp());
                    gb.mul(&w)?
                }
            };
            vec![(*a, gi)]
        }
        Op::BroadcastTo(a) => vec![(*a, g.reduce_to(val(*a).shape())?)],
        Op::SliceChannels(a, start) => {
            let av = val(*a);
            let c = av.shape().c();
            let len = g.shape().c();
            let mut gi = Tensor::zeros(av.shape());
            let rows = av.len() / c;
            let gd = g.data();
            let out = gi.data_mut();
            for r in 0..rows {
                out[r * c + start..r * c + start + len]
                    .copy_from_slice(&gd[r * len..(r + 1) * len]);
            }
            vec![(*a, gi)]
        }
        Op::ConcatChannels(parts) => {
            let mut start = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let len = val(p).shape().c();
                out.push((p, g.slice_channels(start, len)?));
                start += len;
            }
            out
        }
        Op::Squeeze(a) => vec![(*a, g.unsqueeze2x2()?)],
        Op::Unsqueeze(a) => vec![(*a, g.squeeze2x2()?)],
    })
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a recorded value (None if it did not influence the loss).
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a parameter bound on the tape.
    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params
            .get(&p.id)
            .and_then(|&id| self.grads.get(id))
            .and_then(|g| g.as_ref())
    }

    /// Adds each parameter's gradient into `Param::grad` (zeros if unused).
    pub fn accumulate_into<'a>(
        &self,
        params: impl IntoIterator<Item = &'a mut Param<T>>,
    ) -> Result<()> {
        for p in params {
            if !p.trainable {
                continue;
            }
            match self.param(p) {
                Some(g) => {
                    let g = g.clone();
                    p.accumulate_grad(&g)?
                }
                None => {
                    let z = Tensor::zeros(p.value.shape());
                    p.accumulate_grad(&z)?
                }
            }
        }
        Ok(())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::DetachedGraph)
        }
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        let v = self.value().map(f);
        self.tape.push_checked(name, v, op(self.id), &[self.id])
    }

    pub fn add(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(o)?;
        let v = self.value().add(&o.value())?;
        self.tape
            .push_checked("add", v, Op::Add(self.id, o.id), &[self.id, o.id])
    }

    pub fn sub(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(o)?;
        let v = self.value().sub(&o.value())?;
        self.tape
            .push_checked("sub", v, Op::Sub(self.id, o.id), &[self.id, o.id])
    }

    pub fn mul(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(o)?;
        let v = self.value().mul(&o.value())?;
        self.tape
            .push_checked("mul", v, Op::Mul(self.id, o.id), &[self.id, o.id])
    }

    pub fn div(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(o)?;
        let d = o.value();
        if self.tape.strict && d.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::ZeroDivisor);
        }
        let v = self.value().div(&d)?;
        self.tape
            .push_checked("div", v, Op::Div(self.id, o.id), &[self.id, o.id])
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.unary("neg", |x| -x, Op::Neg)
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        self.unary("exp", |x| x.exp(), Op::Exp)
    }

    pub fn log(&self) -> Result<Var<'t, T>> {
        self.unary("log", |x| x.ln(), Op::Log)
    }

    /// `ln |x|`
    pub fn log_abs(&self) -> Result<Var<'t, T>> {
        self.unary("log_abs", |x| x.abs().ln(), Op::LogAbs)
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.unary("square", |x| x * x, Op::Square)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid)
    }

    /// Numerically stable `ln sigmoid(x)`.
    pub fn log_sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary("log_sigmoid", log_sigmoid, Op::LogSigmoid)
    }

    /// ELU with alpha = 1.
    pub fn elu(&self) -> Result<Var<'t, T>> {
        self.unary("elu", elu, Op::Elu)
    }

    /// `scale * x + shift` with scalar constants.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t, T>> {
        let (a, b) = (T::lit(scale), T::lit(shift));
        self.unary("affine", move |x| a * x + b, move |id| Op::Affine(id, a))
    }

    pub fn add_scalar(&self, shift: f64) -> Result<Var<'t, T>> {
        self.affine(1.0, shift)
    }

    pub fn mul_scalar(&self, scale: f64) -> Result<Var<'t, T>> {
        self.affine(scale, 0.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t, T>> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(
            "clamp",
            move |x| x.max(l).min(h),
            move |id| Op::Clamp(id, l, h),
        )
    }

    /// "Same" convolution with weight `[kh, kw, cin, cout]` and optional
    /// `[1, 1, 1, cout]` bias; `mask` is a `[1, 1, kh, kw]` 0/1 tensor.
    pub fn conv2d(
        &self,
        w: &Var<'t, T>,
        b: Option<&Var<'t, T>>,
        mask: Option<&Tensor<T>>,
        geom: ConvGeometry,
    ) -> Result<Var<'t, T>> {
        let taps: Option<Rc<[bool]>> = match mask {
            Some(m) => Some(conv::mask_taps(m, geom.kh, geom.kw)?.into()),
            None => None,
        };
        self.conv2d_taps(w, b, taps, geom)
    }

    /// [`Var::conv2d`] with a pre-validated tap mask.
    pub fn conv2d_taps(
        &self,
        w: &Var<'t, T>,
        b: Option<&Var<'t, T>>,
        taps: Option<Rc<[bool]>>,
        geom: ConvGeometry,
    ) -> Result<Var<'t, T>> {
        self.same_tape(w)?;
        let bias_val = b.map(|b| b.value());
        let v = conv::conv2d(
            &self.value(),
            &w.value(),
            bias_val.as_deref(),
            taps.as_deref(),
            &geom,
        )?;
        let mut inputs = vec![self.id, w.id];
        if let Some(b) = b {
            self.same_tape(b)?;
            inputs.push(b.id);
        }
        self.tape.push_checked(
            "conv2d",
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                mask: taps,
                geom,
            },
            &inputs,
        )
    }

    /// `y[p, o] = sum_i W[o, i] x[p, i]` with `W` shaped `[1, 1, c_out, c_in]`.
    pub fn channel_matmul(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(w)?;
        let v = self.value().channel_matmul(&w.value())?;
        self.tape.push_checked(
            "channel_matmul",
            v,
            Op::ChannelMatmul(self.id, w.id),
            &[self.id, w.id],
        )
    }

    /// `ln |det W|` of a `[1, 1, c, c]` matrix, as a scalar.
    pub fn log_abs_det(&self) -> Result<Var<'t, T>> {
        let wv = self.value();
        let s = wv.shape();
        if s.n() != 1 || s.h() != 1 || s.w() != s.c() {
            return Err(Error::Shape(format!(
                "log_abs_det needs [1,1,c,c], got {s:?}"
            )));
        }
        let lad = Lu::new(&wv.to_f64_vec(), s.c())?.log_abs_det();
        self.tape.push_checked(
            "log_abs_det",
            Tensor::scalar(T::lit(lad)),
            Op::LogAbsDet(self.id),
            &[self.id],
        )
    }

    /// Reduction over `axes`, keeping them with extent 1.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out_shape = reduced_shape(x.shape(), axes)?;
        let v = match op {
            ReduceOp::Sum => x.sum_axes(axes)?,
            ReduceOp::Mean => {
                let k = T::lit((x.len() / out_shape.numel().max(1)) as f64);
                x.sum_axes(axes)?.map(|v| v / k)
            }
            ReduceOp::LogSumExp => logsumexp(&x, axes)?,
        };
        self.tape
            .push_checked("reduce", v, Op::Reduce(self.id, op), &[self.id])
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Sum, axes)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Mean, axes)
    }

    pub fn logsumexp(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::LogSumExp, axes)
    }

    pub fn sum_all(&self) -> Result<Var<'t, T>> {
        self.sum(&[0, 1, 2, 3])
    }

    /// Per-batch-element sum, shape `[n, 1, 1, 1]`.
    pub fn sum_per_item(&self) -> Result<Var<'t, T>> {
        self.sum(&[1, 2, 3])
    }

    pub fn broadcast_to(&self, shape: Shape) -> Result<Var<'t, T>> {
        if self.shape() == shape {
            return Ok(*self);
        }
        let v = self.value().broadcast_to(shape)?;
        self.tape
            .push_checked("broadcast_to", v, Op::BroadcastTo(self.id), &[self.id])
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.value().slice_channels(start, len)?;
        self.tape.push_checked(
            "slice_channels",
            v,
            Op::SliceChannels(self.id, start),
            &[self.id],
        )
    }

    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero vars".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_channels(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first
            .tape
            .push_checked("concat_channels", v, Op::ConcatChannels(ids.clone()), &ids)
    }

    pub fn squeeze2x2(&self) -> Result<Var<'t, T>> {
        let v = self.value().squeeze2x2()?;
        self.tape
            .push_checked("squeeze", v, Op::Squeeze(self.id), &[self.id])
    }

    pub fn unsqueeze2x2(&self) -> Result<Var<'t, T>> {
        let v = self.value().unsqueeze2x2()?;
        self.tape
            .push_checked("unsqueeze", v, Op::Unsqueeze(self.id), &[self.id])
    }
}

fn logsumexp<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let out_shape = reduced_shape(x.shape(), axes)?;
    // max over the reduced axes, via broadcast bookkeeping
    let mut m = Tensor::full(out_shape, T::neg_infinity());
    {
        let ms = out_shape.strides();
        let [n, h, w, c] = x.shape().0;
        let od = out_shape.0;
        let md = m.data_mut();
        let xd = x.data();
        let mut idx = 0;
        for a in 0..n {
            for b in 0..h {
                for d in 0..w {
                    for e in 0..c {
                        let o = (if od[0] == 1 { 0 } else { a }) * ms[0]
                            + (if od[1] == 1 { 0 } else { b }) * ms[1]
                            + (if od[2] == 1 { 0 } else { d }) * ms[2]
                            + (if od[3] == 1 { 0 } else { e });
                        md[o] = md[o].max(xd[idx]);
                        idx += 1;
                    }
                }
            }
        }
    }
    let shifted = x.sub(&m)?.map(|v| v.exp()).sum_axes(axes)?;
    m.add(&shifted.map(|v| v.ln()))
}

/// Plain (untaped) numeric helpers shared by inverse passes.
pub mod func {
    use crate::tensor::Real;

    pub fn sigmoid<T: Real>(x: T) -> T {
        super::sigmoid(x)
    }

    pub fn log_sigmoid<T: Real>(x: T) -> T {
        super::log_sigmoid(x)
    }

    pub fn elu<T: Real>(x: T) -> T {
        super::elu(x)
    }
}
