//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it is evaluated. Handles ([`Var`])
//! are cheap `Copy` indices into the tape; calling [`Tape::backward`] on a
//! scalar walks the records in reverse and accumulates gradients.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, Axis, IxDyn, Zip};

use super::params::ParamStore;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    SumAxis(usize),
    SumAll(usize),
    Softmax(usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    Unfold {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Clamp(usize, f64, f64),
}

struct Node {
    value: Rc<ArrayD<f64>>,
    op: Op,
}

/// Operation recorder. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
    params: BTreeMap<String, usize>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> ArrayD<f64> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(&var.shape())))
    }

    /// Gradients of the parameters of `store` lifted onto the tape, keyed by
    /// name. Parameters that did not reach the loss get zero gradients;
    /// parameters lifted from other stores are skipped.
    pub fn params(&self, store: &ParamStore) -> BTreeMap<String, ArrayD<f64>> {
        self.params
            .iter()
            .filter(|(name, _)| store.get(name).is_some())
            .map(|(name, &id)| {
                let g = self.grads[id].clone().unwrap_or_else(|| {
                    ArrayD::zeros(IxDyn(store.get(name).expect("param on tape").shape()))
                });
                (name.clone(), g)
            })
            .collect()
    }
}

fn to_2d(a: &ArrayD<f64>, rows: usize, cols: usize) -> Array2<f64> {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("matmul reshape")
}

fn matmul_2d(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to(mut grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while grad.ndim() > shape.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && grad.shape()[axis] != 1 {
            grad = grad.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    grad
}

fn broadcast_binary(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|x, &y| *x = f(*x, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("incompatible broadcast shapes {a:?} and {b:?}"),
            }
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A value that receives no gradient bookkeeping of its own.
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Lift a named parameter onto the tape. Repeated lifts share one leaf.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { tape: self, id };
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let var = self.push(value, Op::Leaf);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(ArrayD::from_elem(
            IxDyn(nodes[output.id].value.shape()),
            1.0,
        ));

        let accumulate = |grads: &mut Vec<Option<ArrayD<f64>>>, id: usize, g: ArrayD<f64>| {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(grad);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(grad.clone(), val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(grad, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(grad.clone(), val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(-grad, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let ga = broadcast_binary(&grad, val(*b), |g, y| g * y);
                    let gb = broadcast_binary(&grad, val(*a), |g, x| g * x);
                    accumulate(&mut grads, *a, reduce_to(ga, val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(gb, val(*b).shape()));
                }
                Op::Div(a, b) => {
                    let ga = broadcast_binary(&grad, val(*b), |g, y| g / y);
                    // d(a/b)/db = -out / b
                    let q = broadcast_binary(out, val(*b), |o, y| -o / y);
                    let gb = &grad * &q;
                    accumulate(&mut grads, *a, reduce_to(ga, val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(gb, val(*b).shape()));
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -grad),
                Op::Scale(a, s) => accumulate(&mut grads, *a, grad * *s),
                Op::AddScalar(a) => accumulate(&mut grads, *a, grad),
                Op::MatMul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let k = bv.shape()[0];
                    let n = bv.shape()[1];
                    let rows = av.len() / k;
                    let a2 = to_2d(av, rows, k);
                    let b2 = to_2d(bv, k, n);
                    let g2 = to_2d(&grad, rows, n);
                    let ga = matmul_2d(&g2, &b2.t().to_owned());
                    let gb = matmul_2d(&a2.t().to_owned(), &g2);
                    accumulate(
                        &mut grads,
                        *a,
                        ga.into_shape_with_order(IxDyn(av.shape())).unwrap(),
                    );
                    accumulate(&mut grads, *b, gb.into_dyn());
                }
                Op::BatchMatMul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = bv.shape()[2];
                    let mut ga = ArrayD::zeros(IxDyn(&[batch, m, k]));
                    let mut gb = ArrayD::zeros(IxDyn(&[batch, k, n]));
                    for i in 0..batch {
                        let g = grad.index_axis(Axis(0), i);
                        let g = g.into_dimensionality::<ndarray::Ix2>().unwrap();
                        let ai = av.index_axis(Axis(0), i);
                        let ai = ai.into_dimensionality::<ndarray::Ix2>().unwrap();
                        let bi = bv.index_axis(Axis(0), i);
                        let bi = bi.into_dimensionality::<ndarray::Ix2>().unwrap();
                        ga.index_axis_mut(Axis(0), i).assign(&g.dot(&bi.t()));
                        gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&g));
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let g = grad
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned();
                    accumulate(&mut grads, *a, g);
                }
                Op::Reshape(a) => {
                    let g = grad
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(val(*a).shape()))
                        .unwrap();
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = broadcast_binary(&grad, val(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = broadcast_binary(&grad, out, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = broadcast_binary(&grad, out, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, g);
                }
                Op::Exp(a) => {
                    let g = broadcast_binary(&grad, out, |g, y| g * y);
                    accumulate(&mut grads, *a, g);
                }
                Op::Log(a) => {
                    let g = broadcast_binary(&grad, val(*a), |g, x| g / x);
                    accumulate(&mut grads, *a, g);
                }
                Op::Softplus(a) => {
                    let g = broadcast_binary(&grad, val(*a), |g, x| g * sigmoid(x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sqrt(a) => {
                    let g = broadcast_binary(&grad, out, |g, y| g * 0.5 / y);
                    accumulate(&mut grads, *a, g);
                }
                Op::Square(a) => {
                    let g = broadcast_binary(&grad, val(*a), |g, x| 2.0 * g * x);
                    accumulate(&mut grads, *a, g);
                }
                Op::Abs(a) => {
                    let g = broadcast_binary(&grad, val(*a), |g, x| if x == 0.0 { 0.0 } else { g * x.signum() });
                    accumulate(&mut grads, *a, g);
                }
                Op::SumAxis(a) | Op::SumAll(a) => {
                    let shape = val(*a).shape().to_vec();
                    let g = grad
                        .broadcast(IxDyn(&shape))
                        .expect("sum backward broadcast")
                        .to_owned();
                    accumulate(&mut grads, *a, g);
                }
                Op::Softmax(a) => {
                    let last = Axis(out.ndim() - 1);
                    let gy = &grad * &**out;
                    let s = gy.sum_axis(last).insert_axis(last);
                    let g = &gy - &(&**out * &s);
                    accumulate(&mut grads, *a, g);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        let g = grad
                            .slice_axis(Axis(*axis), (start..start + len).into())
                            .to_owned();
                        accumulate(&mut grads, p, g);
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let mut g = ArrayD::zeros(IxDyn(val(*a).shape()));
                    let len = grad.shape()[*axis];
                    g.slice_axis_mut(Axis(*axis), (*start..*start + len).into())
                        .assign(&grad);
                    accumulate(&mut grads, *a, g);
                }
                Op::Unfold {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let x = val(*input);
                    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let t_out = grad.shape()[1];
                    let mut g = ArrayD::zeros(IxDyn(&[b, t, c]));
                    for bi in 0..b {
                        for to in 0..t_out {
                            for j in 0..*kernel {
                                let ti = (to * stride + j) as isize - *pad as isize;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    g[[bi, ti as usize, ci]] += grad[[bi, to, j * c + ci]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let g = broadcast_binary(&grad, val(*a), |g, x| {
                        if x > lo && x < hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, g);
                }
            }
        }

        Grads {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.value().iter().all(|x| x.is_finite())
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().mapv(f);
        self.tape.push(v, op)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let v = broadcast_binary(&self.value(), &other.value(), f);
        self.tape.push(v, op)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&self, w: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = w.value();
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D");
        let (k, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(
            *a.shape().last().unwrap(),
            k,
            "matmul inner dims {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let rows = a.len() / k;
        let out = matmul_2d(&to_2d(&a, rows, k), &to_2d(&b, k, n));
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.tape.push(out, Op::MatMul(self.id, w.id))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert!(a.ndim() == 3 && b.ndim() == 3 && a.shape()[0] == b.shape()[0]);
        assert_eq!(a.shape()[2], b.shape()[1]);
        let (batch, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
        for i in 0..batch {
            let ai = a.index_axis(Axis(0), i);
            let ai = ai.into_dimensionality::<ndarray::Ix2>().unwrap();
            let bi = b.index_axis(Axis(0), i);
            let bi = bi.into_dimensionality::<ndarray::Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.tape.push(out, Op::BatchMatMul(self.id, other.id))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t> {
        let v = (*self.value())
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.tape.push(v, Op::Permute(self.id, axes.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Var<'t> {
        let n = self.shape().len();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", self.shape()));
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Subgradient 0 at 0.
    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_keepdim(&self, axis: usize) -> Var<'t> {
        let v = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.tape.push(v, Op::SumAxis(self.id))
    }

    pub fn mean_keepdim(&self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_keepdim(axis).scale(1.0 / n)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t> {
        let x = self.value();
        let last = Axis(x.ndim() - 1);
        let max = x.fold_axis(last, f64::NEG_INFINITY, |&m, &v| m.max(v));
        let shifted = &*x - &max.insert_axis(last);
        let e = shifted.mapv(f64::exp);
        let s = e.sum_axis(last).insert_axis(last);
        let out = &e / &s;
        self.tape.push(out, Op::Softmax(self.id))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self
            .value()
            .slice_axis(Axis(axis), (start..start + len).into())
            .to_owned();
        self.tape.push(v, Op::Narrow(self.id, axis, start))
    }

    /// Sliding windows over the time axis of a `[B, T, C]` tensor, producing
    /// `[B, T_out, kernel * C]` with zero padding on both ends.
    pub fn unfold_time(&self, kernel: usize, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "unfold_time expects [B, T, C]");
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(t + 2 * pad >= kernel, "sequence too short for kernel");
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[b, t_out, kernel * c]));
        for bi in 0..b {
            for to in 0..t_out {
                for j in 0..kernel {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for ci in 0..c {
                        out[[bi, to, j * c + ci]] = x[[bi, ti as usize, ci]];
                    }
                }
            }
        }
        self.tape.push(
            out,
            Op::Unfold {
                input: self.id,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Scale rows of the last axis to unit l2 norm.
    pub fn l2_normalize(&self) -> Var<'t> {
        let last = self.shape().len() - 1;
        let norm = self.square().sum_keepdim(last).add_scalar(1e-24).sqrt();
        self.div(norm)
    }
}

/// Concatenate along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
    tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis))
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(&self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(&self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(&self, rhs)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(&self, rhs)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self::Output {
        Var::neg(&self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Compare the tape gradient of `f` at `x` with central differences.
    fn check(shape: &[usize], f: impl for<'t> Fn(Var<'t>) -> Var<'t>, x: ArrayD<f64>) {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = f(xv);
        let grads = tape.backward(y);
        let analytic = grads.get_or_zeros(xv);
        assert_eq!(analytic.shape(), shape);

        let h = 1e-6;
        for i in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            let eval = |v: ArrayD<f64>| {
                let t = Tape::new();
                f(t.constant(v)).item()
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let c = random(&[1, 4], &mut rng);
        check(&[3, 4], |v| v.tanh().sum_all(), x.clone());
        check(&[3, 4], |v| v.sigmoid().square().sum_all(), x.clone());
        check(&[3, 4], |v| v.softplus().ln().sum_all(), x.clone());
        check(&[3, 4], |v| v.exp().sqrt().mean_all(), x.clone());
        check(&[3, 4], |v| v.abs().mean_all(), x.clone());
        check(
            &[3, 4],
            |v| {
                let k = v.tape().constant(c.clone());
                (v * k + v.square() / k.exp()).sum_all()
            },
            x.clone(),
        );
        check(&[3, 4], |v| v.relu().add_scalar(0.5).ln().sum_all(), x.mapv(|a| a + 0.01));
    }

    #[test]
    fn broadcasting_ops_reduce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = random(&[2, 3, 4], &mut rng);
        check(
            &[3, 1],
            |v| {
                let b = v.tape().constant(big.clone());
                (b - v).square().sum_all()
            },
            random(&[3, 1], &mut rng),
        );
        check(
            &[4],
            |v| {
                let b = v.tape().constant(big.clone());
                (b / v.exp()).sum_all()
            },
            random(&[4], &mut rng),
        );
    }

    #[test]
    fn matmul_and_bmm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&[4, 5], &mut rng);
        check(
            &[2, 3, 4],
            |v| v.matmul(v.tape().constant(w.clone())).tanh().sum_all(),
            random(&[2, 3, 4], &mut rng),
        );
        let x = random(&[2, 3, 4], &mut rng);
        check(
            &[4, 5],
            |v| v.tape().constant(x.clone()).matmul(v).square().sum_all(),
            w.clone(),
        );
        let other = random(&[2, 4, 3], &mut rng);
        check(
            &[2, 3, 4],
            |v| {
                v.bmm(v.tape().constant(other.clone()))
                    .softmax_last()
                    .square()
                    .sum_all()
            },
            x.clone(),
        );
        check(
            &[2, 3, 4],
            |v| v.bmm(v.transpose_last()).tanh().sum_all(),
            x,
        );
    }

    #[test]
    fn shape_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 5, 3], &mut rng);
        let weights = random(&[2, 3, 5], &mut rng);
        check(
            &[2, 5, 3],
            |v| {
                let w = v.tape().constant(weights.clone());
                (v.permute(&[0, 2, 1]) * w).sum_all()
            },
            x.clone(),
        );
        check(
            &[2, 5, 3],
            |v| v.reshape(&[10, 3]).softmax_last().square().sum_all(),
            x.clone(),
        );
        check(
            &[2, 5, 3],
            |v| {
                let a = v.narrow(1, 1, 2);
                let b = v.narrow(1, 3, 2).tanh();
                concat(&[a, b, v], 1).square().sum_all()
            },
            x.clone(),
        );
        check(
            &[2, 5, 3],
            |v| v.unfold_time(3, 2, 1).square().sum_keepdim(2).sqrt().sum_all(),
            x.clone(),
        );
        check(
            &[2, 5, 3],
            |v| {
                let w = v.tape().constant(weights.clone().into_shape_with_order(IxDyn(&[2, 15])).unwrap());
                (v.l2_normalize().reshape(&[2, 15]) * w).sum_all()
            },
            x,
        );
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let tape = Tape::new();
        let x = tape.constant(ndarray::arr1(&[-2.0, 0.0, 2.0]).into_dyn());
        let y = x.clamp(-1.0, 1.0).sum_all();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn params_share_one_leaf_and_collect_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", ndarray::arr1(&[2.0]).into_dyn());
        store.insert("unused", ndarray::arr1(&[1.0, 1.0]).into_dyn());
        let tape = Tape::new();
        let a = tape.param(&store, "w");
        let b = tape.param(&store, "w");
        assert_eq!(a.id(), b.id());
        let _ = tape.param(&store, "unused");
        let y = (a * b).sum_all();
        let grads = tape.backward(y).params(&store);
        assert_eq!(grads["w"].as_slice().unwrap(), &[4.0]);
        assert_eq!(grads["unused"].as_slice().unwrap(), &[0.0, 0.0]);
    }
}
