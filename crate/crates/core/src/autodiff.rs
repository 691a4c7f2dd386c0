//! Reverse-mode differentiation over the tensor kernels.
//!
//! Values are computed eagerly when an operation is recorded; the tape keeps
//! each node's inputs and whatever forward state its backward rule needs.
//! Node ids are assigned in recording order, which is therefore a valid
//! topological order, and [`Tape::backward`] walks it once in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Axis, BinaryOp, Broadcast, ConvGeometry, PoolMode, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        a: NodeId,
        b: NodeId,
        op: BinaryOp,
        broadcast: Broadcast,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Activation {
        x: NodeId,
        act: Activation,
    },
    Conv {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: Axis,
    },
    MaxMinus {
        x: NodeId,
        axis: Axis,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    Resize {
        x: NodeId,
    },
    Pool {
        x: NodeId,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    /// A scalar function of `x` whose gradient was computed during the forward pass.
    ScalarFn {
        x: NodeId,
        local_grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording of tensor operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {})", self.id.0, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input or parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn owns(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::CrossTape)
        }
    }

    /// Concatenates along channels, preserving order.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        for p in parts {
            self.owns(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = tensor::concat_channels(&refs)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Records a scalar-valued function of `x` given its value and gradient.
    pub(crate) fn scalar_fn<'t>(&'t self, x: Var<'t>, value: f64, local_grad: Tensor) -> Result<Var<'t>> {
        self.owns(&x)?;
        debug_assert_eq!(local_grad.shape(), x.shape());
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x: x.id, local_grad }))
    }

    /// Gradients of `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.owns(&loss)?;
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id.0].value.shape();
        if loss_shape != Shape::scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.id.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |id: NodeId| nodes[id.0].value.as_ref();
            let mut contributions: Vec<(NodeId, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Binary { a, b, op, broadcast } => {
                    let (av, bv) = (val(*a), val(*b));
                    let sa = av.shape();
                    let mut gb = Tensor::zeros(bv.shape());
                    let ga = match op {
                        BinaryOp::Add => {
                            for (i, gi) in g.data().iter().enumerate() {
                                gb.data_mut()[broadcast.source(sa, i)] += gi;
                            }
                            g.clone()
                        }
                        BinaryOp::Mul => {
                            for (i, gi) in g.data().iter().enumerate() {
                                gb.data_mut()[broadcast.source(sa, i)] += gi * av.data()[i];
                            }
                            g.map_indexed(|i, gi| gi * bv.data()[broadcast.source(sa, i)])
                        }
                    };
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::Scale { x, k } => contributions.push((*x, g.scale(*k))),
                Op::ScaleBy { x, s } => {
                    let (xv, sv) = (val(*x), val(*s).data()[0]);
                    let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    contributions.push((*x, g.scale(sv)));
                    contributions.push((*s, Tensor::scalar(ds)));
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    contributions.push((*x, Tensor::full(val(*x).shape(), gv)));
                }
                Op::Activation { x, act } => {
                    let y = node.value.as_ref();
                    let dx = match act {
                        Activation::Relu => {
                            g.map_indexed(|i, gi| if y.data()[i] > 0.0 { gi } else { 0.0 })
                        }
                        Activation::Sigmoid => g.map_indexed(|i, gi| {
                            let s = y.data()[i];
                            gi * s * (1.0 - s)
                        }),
                    };
                    contributions.push((*x, dx));
                }
                Op::Conv {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (xv, kv) = (val(*x), val(*kernel));
                    contributions.push((*x, tensor::conv2d_grad_input(&g, kv, xv.shape(), *geom)));
                    contributions.push((*kernel, tensor::conv2d_grad_kernel(&g, xv, kv.shape(), *geom)));
                    if let Some(b) = bias {
                        let sums = tensor::channel_sums(&g);
                        contributions.push((*b, Tensor::from_vec(val(*b).shape(), sums)?));
                    }
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    contributions.push((*a, tensor::matmul(&g, &tensor::transpose(bv))?));
                    contributions.push((*b, tensor::matmul(&tensor::transpose(av), &g)?));
                }
                Op::Transpose { x } => contributions.push((*x, tensor::transpose(&g))),
                Op::Reshape { x } => contributions.push((*x, g.reshape(val(*x).shape())?)),
                Op::Softmax { x, axis } => {
                    let y = node.value.as_ref();
                    let (outer, len, inner) = axis.split(y.shape());
                    let mut dx = Tensor::zeros(y.shape());
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + k;
                            let dot: f64 = (0..len).map(|i| g.data()[at(i)] * y.data()[at(i)]).sum();
                            for i in 0..len {
                                dx.data_mut()[at(i)] = y.data()[at(i)] * (g.data()[at(i)] - dot);
                            }
                        }
                    }
                    contributions.push((*x, dx));
                }
                Op::MaxMinus { x, axis } => {
                    let xv = val(*x);
                    let (outer, len, inner) = axis.split(xv.shape());
                    let mut dx = g.scale(-1.0);
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + k;
                            let mut best = 0;
                            for i in 1..len {
                                if xv.data()[at(i)] > xv.data()[at(best)] {
                                    best = i;
                                }
                            }
                            let total: f64 = (0..len).map(|i| g.data()[at(i)]).sum();
                            dx.data_mut()[at(best)] += total;
                        }
                    }
                    contributions.push((*x, dx));
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let c = val(*p).shape().c;
                        contributions.push((*p, tensor::slice_channels(&g, start, c)?));
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let s = val(*x).shape();
                    let gs = g.shape();
                    let mut dx = Tensor::zeros(s);
                    let plane = s.plane();
                    for n in 0..s.n {
                        let src = &g.data()[n * gs.c * plane..][..gs.c * plane];
                        dx.data_mut()[(n * s.c + start) * plane..][..gs.c * plane].copy_from_slice(src);
                    }
                    contributions.push((*x, dx));
                }
                Op::Resize { x } => {
                    contributions.push((*x, tensor::resize_bilinear_grad(&g, val(*x).shape())));
                }
                Op::Pool { x, mode, argmax } => {
                    let s = val(*x).shape();
                    let mut dx = Tensor::zeros(s);
                    for (o, gv) in g.data().iter().enumerate() {
                        if mode.is_max() {
                            dx.data_mut()[argmax[o]] += gv;
                        } else {
                            let members: Vec<usize> = mode.members(s, o).collect();
                            let share = gv / members.len() as f64;
                            for i in members {
                                dx.data_mut()[i] += share;
                            }
                        }
                    }
                    contributions.push((*x, dx));
                }
                Op::Dropout { x, mask } => {
                    contributions.push((*x, g.map_indexed(|i, gi| gi * mask[i])));
                }
                Op::ScalarFn { x, local_grad } => {
                    contributions.push((*x, local_grad.scale(g.data()[0])));
                }
            }
            for (id, c) in contributions {
                match &mut grads[id.0] {
                    Some(acc) => acc.accumulate(&c),
                    slot => *slot = Some(c),
                }
            }
            // Keep gradients of leaves; interior gradients are not needed afterwards.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient for a leaf; zeros when the leaf does not reach the loss.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: NodeId) -> Tensor {
        self.grads
            .get(id.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0]))
    }

    /// True when some gradient reached this node.
    pub fn reached(&self, v: Var<'_>) -> bool {
        self.grads.get(v.id.0).is_some_and(Option::is_some)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id.0].value.shape()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn binary(self, other: Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
        self.tape.owns(&other)?;
        let (a, b) = (self.value(), other.value());
        let broadcast = Broadcast::resolve(a.shape(), b.shape())?;
        let out = tensor::binary_ew(&a, &b, op)?;
        Ok(self.tape.push(
            out,
            Op::Binary {
                a: self.id,
                b: other.id,
                op,
                broadcast,
            },
        ))
    }

    /// Elementwise sum; `other` may be a spatial map or channel vector.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    /// Elementwise product; `other` may be a spatial map or channel vector.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().scale(k);
        self.unary(out, Op::Scale { x: self.id, k })
    }

    /// Multiplies by a recorded scalar.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        self.tape.owns(&s)?;
        let sv = s.value();
        if sv.shape() != Shape::scalar() {
            return Err(Error::invalid("scale_by", format!("expected scalar, got {}", sv.shape())));
        }
        let out = self.value().scale(sv.data()[0]);
        Ok(self.unary(out, Op::ScaleBy { x: self.id, s: s.id }))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum { x: self.id })
    }

    pub fn relu(self) -> Var<'t> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.activation(Activation::Sigmoid)
    }

    pub fn activation(self, act: Activation) -> Var<'t> {
        let out = tensor::pointwise(&self.value(), act);
        self.unary(out, Op::Activation { x: self.id, act })
    }

    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Result<Var<'t>> {
        self.tape.owns(&kernel)?;
        let bias_value = match bias {
            Some(b) => {
                self.tape.owns(&b)?;
                Some(b.value())
            }
            None => None,
        };
        let out = tensor::conv2d_with(
            &self.value(),
            &kernel.value(),
            bias_value.as_ref().map(|b| b.data()),
            geom,
        )?;
        Ok(self.unary(
            out,
            Op::Conv {
                x: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
        ))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.owns(&other)?;
        let out = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.unary(out, Op::Matmul { a: self.id, b: other.id }))
    }

    pub fn transpose(self) -> Var<'t> {
        let out = tensor::transpose(&self.value());
        self.unary(out, Op::Transpose { x: self.id })
    }

    pub fn reshape(self, shape: Shape) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape { x: self.id }))
    }

    pub fn softmax(self, axis: Axis) -> Var<'t> {
        let out = tensor::softmax_axis(&self.value(), axis);
        self.unary(out, Op::Softmax { x: self.id, axis })
    }

    /// `max_along_axis - x`, entrywise.
    pub fn max_minus(self, axis: Axis) -> Var<'t> {
        let out = tensor::max_minus(&self.value(), axis);
        self.unary(out, Op::MaxMinus { x: self.id, axis })
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = tensor::slice_channels(&self.value(), start, len)?;
        Ok(self.unary(out, Op::Slice { x: self.id, start }))
    }

    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(Error::invalid("upsample_bilinear", "factor must be positive"));
        }
        let s = self.shape();
        self.resize(s.h * factor, s.w * factor)
    }

    /// Bilinear resize to an explicit output size.
    pub fn resize(self, h: usize, w: usize) -> Result<Var<'t>> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("resize", "output size must be positive"));
        }
        let out = tensor::resize_bilinear(&self.value(), h, w);
        Ok(self.unary(out, Op::Resize { x: self.id }))
    }

    pub fn pool(self, mode: PoolMode) -> Result<Var<'t>> {
        let (out, argmax) = tensor::pool_with_argmax(&self.value(), mode)?;
        Ok(self.unary(out, Op::Pool { x: self.id, mode, argmax }))
    }

    /// Inverted dropout; the sampled mask is kept for the backward pass.
    pub fn dropout(self, p: f64, rng: &mut impl Rng, training: bool) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let mask = tensor::dropout_mask(x.len(), p, rng);
        let out = x.map_indexed(|i, v| v * mask[i]);
        Ok(self.unary(out, Op::Dropout { x: self.id, mask }))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |numeric|) over the checked coordinates.
    pub max_relative_error: f64,
    /// `(parameter index, element index)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Candidates passed over because a kink lay inside the stencil.
    pub skipped: usize,
}

/// Every coordinate of every parameter.
pub fn all_coordinates(params: &[Tensor]) -> Vec<(usize, usize)> {
    params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect()
}

/// `count` distinct coordinates drawn uniformly over all parameter elements.
pub fn random_coordinates(params: &[Tensor], count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let all = all_coordinates(params);
    let count = count.min(all.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, all.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Compares taped gradients of `program` against central differences with step `eps`.
pub fn grad_check<F>(params: &[Tensor], coords: &[(usize, usize)], eps: f64, program: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_coordinates(params, coords, coords.len(), eps, None, program)
}

/// Like [`grad_check`], but walks `candidates` until `count` coordinates have
/// been checked, skipping those whose stencil straddles a non-differentiable
/// point (relu, max, sort order). A coordinate is skipped when the central
/// differences at `eps` and `eps / 2` disagree by more than `kink_tol`
/// relative; on smooth stretches they agree to O(eps²).
pub fn grad_check_smooth<F>(
    params: &[Tensor],
    candidates: &[(usize, usize)],
    count: usize,
    eps: f64,
    kink_tol: f64,
    program: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_coordinates(params, candidates, count, eps, Some(kink_tol), program)
}

fn check_coordinates<F>(
    params: &[Tensor],
    candidates: &[(usize, usize)],
    count: usize,
    eps: f64,
    kink_tol: Option<f64>,
    program: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = program(&tape, &vars)?;
        out.value().item()
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = program(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get(*v)).collect()
    };

    let mut work = params.to_vec();
    let mut central = |p: usize, i: usize, h: f64| -> Result<f64> {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - h;
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;
        Ok((plus - minus) / (2.0 * h))
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for &(p, i) in candidates {
        if report.checked == count {
            break;
        }
        let numeric = central(p, i, eps)?;
        if let Some(tol) = kink_tol {
            let half = central(p, i, eps / 2.0)?;
            if (numeric - half).abs() > tol * numeric.abs().max(1.0) {
                report.skipped += 1;
                continue;
            }
        }
        let err = (analytic[p].data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at parameter {p}, element {i}")));
        }
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = err.max(report.max_relative_error);
            report.worst = Some((p, i));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn rand_t(shape: Shape, r: &mut ChaCha8Rng) -> Tensor {
        Tensor::random_uniform(shape, -1.0, 1.0, r)
    }

    /// Keeps values at least `margin` away from zero, preserving sign.
    fn away_from_zero(t: &Tensor, margin: f64) -> Tensor {
        t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
    }

    #[test]
    fn smooth_check_skips_kinks_but_not_wrong_gradients() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![5e-5, 0.7]).unwrap();
        let coords = all_coordinates(std::slice::from_ref(&x));
        let r = grad_check_smooth(&[x.clone()], &coords, 2, 1e-4, 1e-6, |_, v| Ok(v[0].relu().sum())).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_relative_error < 1e-9);

        // Value Σx² recorded with gradient 3x: off by x everywhere, no kinks.
        let r = grad_check_smooth(&[x.clone()], &coords, 2, 1e-4, 1e-6, |tape, v| {
            let t = v[0].value();
            tape.scalar_fn(v[0], t.data().iter().map(|a| a * a).sum(), t.scale(3.0))
        })
        .unwrap();
        assert_eq!((r.checked, r.skipped), (2, 0));
        assert!(r.max_relative_error > 0.5);
    }

    fn check<F>(params: &[Tensor], program: F) -> f64
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        grad_check(params, &all_coordinates(params), 1e-4, program)
            .unwrap()
            .max_relative_error
    }

    #[test]
    fn forward_equals_kernel_and_tape_grows() {
        let mut r = rng();
        let tape = Tape::new();
        let (a, b) = (rand_t(Shape::new(1, 2, 2, 2), &mut r), rand_t(Shape::new(1, 2, 2, 2), &mut r));
        let x = tape.leaf(a.clone());
        let y = tape.leaf(b.clone());
        let before = tape.len();
        let s = x.add(y).unwrap();
        let _ = s.mul(x).unwrap().sum();
        assert_eq!(tape.len(), before + 3);
        assert_eq!(*s.value(), tensor::binary_ew(&a, &b, BinaryOp::Add).unwrap());
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut r = rng();
            let tape = Tape::new();
            let x = tape.leaf(rand_t(Shape::new(1, 2, 4, 4), &mut r));
            let k = tape.leaf(rand_t(Shape::new(3, 2, 3, 3), &mut r));
            let y = x.conv2d(k, None, ConvGeometry::same(3, 1)).unwrap().relu().sum();
            let g = tape.backward(y).unwrap();
            (y.value().item().unwrap(), g.get(k))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut r = rng();
        let xt = rand_t(Shape::new(1, 2, 3, 3), &mut r);
        let tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x), Tensor::ones(xt.shape()));

        let tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x), xt.scale(2.0));
    }

    #[test]
    fn rejects_non_scalar_and_cross_tape() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let b = t2.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)));
        assert!(matches!(t1.backward(a), Err(Error::NonScalarLoss(_))));
        assert!(matches!(a.add(b), Err(Error::CrossTape)));
        assert!(matches!(t1.backward(b.sum()), Err(Error::CrossTape)));
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let unused = tape.leaf(Tensor::ones(Shape::new(1, 3, 1, 1)));
        let g = tape.backward(x.sum()).unwrap();
        assert!(!g.reached(unused));
        assert_eq!(g.get(unused), Tensor::zeros(Shape::new(1, 3, 1, 1)));
    }

    #[test]
    fn linear_program_is_exact() {
        let mut r = rng();
        let params = vec![rand_t(Shape::new(1, 2, 3, 3), &mut r), rand_t(Shape::new(1, 2, 3, 3), &mut r)];
        let c = rand_t(Shape::new(1, 2, 3, 3), &mut r);
        let err = check(&params, |tape, v| {
            let k = tape.leaf(c.clone());
            Ok(v[0].mul(k)?.add(v[1].scale(3.0))?.sum())
        });
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn conv_relu_sum_matches_central_differences() {
        let mut r = rng();
        let x = rand_t(Shape::new(2, 2, 5, 5), &mut r);
        let k = rand_t(Shape::new(3, 2, 3, 3), &mut r);
        let b = rand_t(Shape::new(1, 1, 1, 3), &mut r);
        // Shift the bias so that no pre-activation sits near the relu kink.
        let pre = tensor::conv2d_with(&x, &k, Some(b.data()), ConvGeometry::new(2, 1, 2)).unwrap();
        assert!(pre.data().iter().all(|v| v.abs() > 1e-3));
        let err = check(&[x, k, b], |_, v| {
            Ok(v[0]
                .conv2d(v[1], Some(v[2]), ConvGeometry::new(2, 1, 2))?
                .relu()
                .sum())
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut r = rng();
        let s = Shape::new(2, 3, 2, 3);
        let x = away_from_zero(&rand_t(s, &mut r), 0.1);
        let y = rand_t(s, &mut r);
        let map = rand_t(Shape::new(2, 1, 2, 3), &mut r);
        let vecc = rand_t(Shape::new(2, 3, 1, 1), &mut r);
        let gamma = Tensor::scalar(0.7);
        let weights = rand_t(s, &mut r);
        let params = [x, y, map, vecc, gamma];
        let err = check(&params, |tape, v| {
            let w = tape.leaf(weights.clone());
            let a = v[0].relu().mul(v[1])?.add(v[2])?;
            let b = a.mul(v[3])?.sigmoid().scale_by(v[4])?;
            let c = b.softmax(Axis::Channel).add(v[0].max_minus(Axis::Width))?;
            let m = c.reshape(Shape::new(2, 1, 3, 6))?;
            let mm = m.matmul(m.transpose())?; // (2,1,3,3)
            let pooled = c.pool(PoolMode::ChannelAvg)?.add(c.pool(PoolMode::ChannelMax)?)?;
            let up = pooled.upsample(2)?.pool(PoolMode::SpatialAvg)?;
            let cat = tape.concat_channels(&[c, v[1]])?.slice_channels(2, 3)?;
            let total = cat.mul(w)?.sum().add(mm.softmax(Axis::Height).mul(mm)?.sum())?;
            Ok(total.add(up.sum())?.add(v[0].pool(PoolMode::SpatialMax)?.sum())?)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dropout_backward_reuses_mask() {
        let tape = Tape::new();
        let xt = Tensor::ones(Shape::new(1, 1, 10, 10));
        let x = tape.leaf(xt);
        let mut r = rng();
        let y = x.dropout(0.5, &mut r, true).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x), *y.value());
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut r = rng();
        let xt = rand_t(Shape::new(1, 2, 3, 3), &mut r);
        let grad_of = |alpha: f64, beta: f64| {
            let tape = Tape::new();
            let x = tape.leaf(xt.clone());
            let l1 = x.sigmoid().sum();
            let l2 = x.mul(x).unwrap().softmax(Axis::Width).mul(x).unwrap().sum();
            let l = l1.scale(alpha).add(l2.scale(beta)).unwrap();
            tape.backward(l).unwrap().get(x)
        };
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        let mixed = grad_of(2.5, -0.5);
        let expect = g1.map_indexed(|i, v| 2.5 * v - 0.5 * g2.data()[i]);
        assert!(mixed.max_abs_diff(&expect) < 1e-9);
    }
}
