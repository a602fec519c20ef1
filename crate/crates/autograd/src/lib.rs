//! Reverse-mode automatic differentiation over dynamically shaped `f64`
//! tensors.
//!
//! The engine is tape-based: every operation eagerly computes its value and
//! records itself on a shared graph. Backward passes are themselves built
//! from taped operations, so the result of [`grad`] is an ordinary [`Var`]
//! that can be differentiated again. That property is what makes gradient
//! penalties (gradients of gradient norms) expressible without any special
//! casing.
//!
//! Shapes are strict: elementwise operations require identical shapes and
//! broadcasting is always explicit via [`Var::broadcast_to`].

mod conv;
mod op;

pub use conv::{same_pads, ConvGeom};
pub use op::Op;

use ndarray::prelude::*;
use ndarray::{concatenate, ArcArray, Slice};
use std::cell::RefCell;
use std::rc::Rc;

/// Tensor payload; reference counted so reshapes and clones are cheap.
pub type Value = ArcArray<f64, IxDyn>;

pub(crate) struct Node {
    pub value: Value,
    pub op: Op,
    pub needs_grad: bool,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// Shared tape. Cloning is cheap (reference count); all [`Var`]s created from
/// one graph belong to the same tape.
#[derive(Clone, Default)]
pub struct Graph(Rc<RefCell<GraphInner>>);

/// Handle to one node of the tape.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

pub fn scalar_value(x: f64) -> Value {
    ArrayD::from_elem(IxDyn(&[1]), x).into_shared()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Value, op: Op, needs_grad: bool) -> Var {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// Node that does not require gradients.
    pub fn constant(&self, value: impl Into<Value>) -> Var {
        self.push(value.into(), Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(scalar_value(x))
    }

    /// Gradient leaf: [`grad`] reports cotangents with respect to these.
    pub fn leaf(&self, value: impl Into<Value>) -> Var {
        self.push(value.into(), Op::Leaf, true)
    }

    fn node_value(&self, id: usize) -> Value {
        self.0.borrow().nodes[id].value.clone()
    }

    fn node_needs_grad(&self, id: usize) -> bool {
        self.0.borrow().nodes[id].needs_grad
    }

    fn node_op(&self, id: usize) -> Op {
        self.0.borrow().nodes[id].op.clone()
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Value {
        self.graph.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.node_needs_grad(self.id)
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn unary(&self, value: ArrayD<f64>, op: Op) -> Var {
        self.graph.push(value.into_shared(), op, self.needs_grad())
    }

    fn binary(&self, rhs: &Var, value: ArrayD<f64>, op: Op) -> Var {
        assert!(
            Rc::ptr_eq(&self.graph.0, &rhs.graph.0),
            "operands from different graphs"
        );
        self.graph.push(
            value.into_shared(),
            op,
            self.needs_grad() || rhs.needs_grad(),
        )
    }

    fn same_shape(&self, rhs: &Var, what: &str) {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "{what}: shape mismatch (broadcasting is explicit)"
        );
    }

    pub fn add(&self, rhs: &Var) -> Var {
        self.same_shape(rhs, "add");
        let v = &self.value() + &rhs.value();
        self.binary(rhs, v, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        self.same_shape(rhs, "sub");
        let v = &self.value() - &rhs.value();
        self.binary(rhs, v, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        self.same_shape(rhs, "mul");
        let v = &self.value() * &rhs.value();
        self.binary(rhs, v, Op::Mul(self.id, rhs.id))
    }

    pub fn div(&self, rhs: &Var) -> Var {
        self.same_shape(rhs, "div");
        let v = &self.value() / &rhs.value();
        self.binary(rhs, v, Op::Div(self.id, rhs.id))
    }

    pub fn neg(&self) -> Var {
        let v = self.value().mapv(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().mapv(|x| c * x);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value().mapv(|x| x + c);
        self.unary(v, Op::AddScalar(self.id, c))
    }

    pub fn relu(&self) -> Var {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().mapv(stable_sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn sqrt(&self) -> Var {
        let v = self.value().mapv(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.value();
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            v.shape(),
            shape
        );
        let in_shape = v.shape().to_vec();
        let owned = v.as_standard_layout().to_owned();
        let reshaped = owned.into_shape_with_order(IxDyn(shape)).unwrap();
        self.unary(
            reshaped,
            Op::Reshape {
                x: self.id,
                in_shape,
            },
        )
    }

    /// Numpy-rule broadcast to `shape` (made explicit so the adjoint is a
    /// plain axis sum).
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let b = v
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {in_shape:?} to {shape:?}"))
            .to_owned();
        self.unary(
            b,
            Op::Broadcast {
                x: self.id,
                in_shape,
            },
        )
    }

    /// Sum over the given axes. With `keep` the reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Var {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut acc = v.to_owned();
        for &ax in sorted.iter().rev() {
            acc = acc.sum_axis(Axis(ax));
        }
        if keep {
            let mut shape = in_shape.clone();
            for &ax in &sorted {
                shape[ax] = 1;
            }
            acc = acc.into_shape_with_order(IxDyn(&shape)).unwrap();
        }
        self.unary(
            acc,
            Op::SumAxes {
                x: self.id,
                axes: sorted,
                keep,
                in_shape,
            },
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&self) -> Var {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let s = ArrayD::from_elem(IxDyn(&[1]), v.sum());
        self.unary(
            s,
            Op::SumAll {
                x: self.id,
                in_shape,
            },
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dims");
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        let y = a2.dot(&b2).into_dyn();
        self.binary(rhs, y, Op::MatMul(self.id, rhs.id))
    }

    /// Batched matrix product `[b,m,k] x [b,k,n]`.
    pub fn bmm(&self, rhs: &Var) -> Var {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 3, "bmm lhs must be 3-d");
        assert_eq!(b.ndim(), 3, "bmm rhs must be 3-d");
        assert_eq!(a.shape()[0], b.shape()[0], "bmm batch dims");
        assert_eq!(a.shape()[2], b.shape()[1], "bmm inner dims");
        let (nb, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[nb, m, n]));
        for i in 0..nb {
            let ai = a
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let bi = b
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            y.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.binary(rhs, y, Op::Bmm(self.id, rhs.id))
    }

    pub fn swap_axes(&self, a: usize, b: usize) -> Var {
        let mut v = self.value().to_owned();
        v.swap_axes(a, b);
        let v = v.as_standard_layout().to_owned();
        self.unary(v, Op::SwapAxes { x: self.id, a, b })
    }

    /// Circular shift along `axis`: `out[i] = x[(i + offset) mod n]`.
    pub fn circshift(&self, axis: usize, offset: isize) -> Var {
        let v = self.value();
        let n = v.shape()[axis];
        let shift = offset.rem_euclid(n as isize) as usize;
        let out = if shift == 0 {
            v.to_owned()
        } else {
            let head = v.slice_axis(Axis(axis), Slice::from(shift..));
            let tail = v.slice_axis(Axis(axis), Slice::from(..shift));
            concatenate(Axis(axis), &[head, tail]).unwrap()
        };
        self.unary(
            out,
            Op::CircShift {
                x: self.id,
                axis,
                offset,
            },
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value();
        let in_size = v.shape()[axis];
        assert!(start + len <= in_size, "slice_axis out of bounds");
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.unary(
            out,
            Op::SliceAxis {
                x: self.id,
                axis,
                start,
                in_size,
            },
        )
    }

    /// SAME-padded strided convolution; `w` is `[out_ch, in_ch, k...]`.
    pub fn conv(&self, w: &Var, stride: usize) -> Var {
        let x = self.value();
        let wv = w.value();
        let rank = wv.ndim() - 2;
        assert_eq!(x.ndim(), rank + 2, "conv input rank");
        let geom = ConvGeom::same(&x.shape()[2..], &wv.shape()[2..], stride);
        let y = conv::conv_fwd(&x.to_owned(), &wv.to_owned(), &geom);
        self.binary(
            w,
            y,
            Op::Conv {
                x: self.id,
                w: w.id,
                geom,
            },
        )
    }

    /// Transposed convolution (exact adjoint of the SAME-padded strided
    /// convolution); `w` is `[in_ch, out_ch, k...]`, output spatial extent is
    /// `stride` times the input extent.
    pub fn deconv(&self, w: &Var, stride: usize) -> Var {
        let x = self.value();
        let wv = w.value();
        let rank = wv.ndim() - 2;
        assert_eq!(x.ndim(), rank + 2, "deconv input rank");
        let big: Vec<usize> = x.shape()[2..].iter().map(|&n| n * stride).collect();
        let geom = ConvGeom::same(&big, &wv.shape()[2..], stride);
        assert_eq!(
            geom.small_spatial,
            &x.shape()[2..],
            "deconv geometry mismatch"
        );
        let y = conv::conv_adj_fwd(&x.to_owned(), &wv.to_owned(), &geom);
        self.binary(
            w,
            y,
            Op::ConvAdj {
                x: self.id,
                w: w.id,
                geom,
            },
        )
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Concatenate along `axis`.
pub fn concat(axis: usize, xs: &[Var]) -> Var {
    assert!(!xs.is_empty(), "concat of zero tensors");
    let graph = xs[0].graph.clone();
    let values: Vec<Value> = xs.iter().map(|x| x.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let needs = xs.iter().any(|x| x.needs_grad());
    let sizes = values.iter().map(|v| v.shape()[axis]).collect();
    graph.push(
        out.into_shared(),
        Op::Concat {
            xs: xs.iter().map(|x| x.id).collect(),
            axis,
            sizes,
        },
        needs,
    )
}

/// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// The returned cotangents are live graph nodes, so they can enter further
/// computations and be differentiated again. Vars in `wrt` that the loss
/// does not depend on get zero cotangents.
pub fn grad(loss: &Var, wrt: &[&Var]) -> Vec<Var> {
    assert_eq!(loss.numel(), 1, "grad of a non-scalar loss");
    let graph = loss.graph.clone();
    let mut cot: Vec<Option<Var>> = vec![None; loss.id + 1];
    cot[loss.id] = Some(graph.constant(scalar_value(1.0)));

    for id in (0..=loss.id).rev() {
        let Some(g) = cot[id].take() else { continue };
        // keep the cotangent around for wrt lookups
        cot[id] = Some(g.clone());
        if !graph.node_needs_grad(id) {
            continue;
        }
        let op = graph.node_op(id);
        for (input, contrib) in op::backward(&graph, id, &op, &g) {
            if !graph.node_needs_grad(input) {
                continue;
            }
            cot[input] = Some(match cot[input].take() {
                None => contrib,
                Some(existing) => existing.add(&contrib),
            });
        }
    }

    wrt.iter()
        .map(|v| {
            assert!(
                Rc::ptr_eq(&v.graph.0, &graph.0),
                "wrt var from another graph"
            );
            match cot.get(v.id).and_then(|c| c.clone()) {
                Some(c) => c,
                None => graph.constant(ArrayD::zeros(IxDyn(&v.shape())).into_shared()),
            }
        })
        .collect()
}
