//! Taped operations and their backward rules.
//!
//! Every backward rule is expressed with ordinary [`Var`] operations, so the
//! produced cotangents are themselves differentiable graph nodes.

use crate::conv::{self, ConvGeom};
use crate::{concat, Graph, Var};
use ndarray::prelude::*;

#[derive(Clone)]
pub enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Sqrt(usize),
    Reshape {
        x: usize,
        in_shape: Vec<usize>,
    },
    Broadcast {
        x: usize,
        in_shape: Vec<usize>,
    },
    SumAxes {
        x: usize,
        axes: Vec<usize>,
        keep: bool,
        in_shape: Vec<usize>,
    },
    SumAll {
        x: usize,
        in_shape: Vec<usize>,
    },
    MatMul(usize, usize),
    Bmm(usize, usize),
    SwapAxes {
        x: usize,
        a: usize,
        b: usize,
    },
    CircShift {
        x: usize,
        axis: usize,
        offset: isize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
        sizes: Vec<usize>,
    },
    SliceAxis {
        x: usize,
        axis: usize,
        start: usize,
        in_size: usize,
    },
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ConvAdj {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    KernelGrad {
        x: usize,
        dy: usize,
        geom: ConvGeom,
    },
}

fn var(graph: &Graph, id: usize) -> Var {
    Var {
        graph: graph.clone(),
        id,
    }
}

pub(crate) fn push_conv(graph: &Graph, x: &Var, w: &Var, geom: &ConvGeom) -> Var {
    let y = conv::conv_fwd(&x.value().to_owned(), &w.value().to_owned(), geom);
    graph.push(
        y.into_shared(),
        Op::Conv {
            x: x.id,
            w: w.id,
            geom: geom.clone(),
        },
        x.needs_grad() || w.needs_grad(),
    )
}

pub(crate) fn push_conv_adj(graph: &Graph, a: &Var, w: &Var, geom: &ConvGeom) -> Var {
    let y = conv::conv_adj_fwd(&a.value().to_owned(), &w.value().to_owned(), geom);
    graph.push(
        y.into_shared(),
        Op::ConvAdj {
            x: a.id,
            w: w.id,
            geom: geom.clone(),
        },
        a.needs_grad() || w.needs_grad(),
    )
}

pub(crate) fn push_kernel_grad(graph: &Graph, xlike: &Var, dylike: &Var, geom: &ConvGeom) -> Var {
    let y = conv::kernel_grad(&xlike.value().to_owned(), &dylike.value().to_owned(), geom);
    graph.push(
        y.into_shared(),
        Op::KernelGrad {
            x: xlike.id,
            dy: dylike.id,
            geom: geom.clone(),
        },
        xlike.needs_grad() || dylike.needs_grad(),
    )
}

fn step_mask(graph: &Graph, x: usize, pos: f64, neg: f64) -> Var {
    let m = graph
        .node_value(x)
        .mapv(|v| if v > 0.0 { pos } else { neg });
    graph.constant(m.into_shared())
}

/// Cotangent contributions `(input_id, contribution)` for one node.
pub(crate) fn backward(graph: &Graph, node: usize, op: &Op, dy: &Var) -> Vec<(usize, Var)> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
        Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.neg())],
        Op::Mul(a, b) => {
            let va = var(graph, *a);
            let vb = var(graph, *b);
            vec![(*a, dy.mul(&vb)), (*b, dy.mul(&va))]
        }
        Op::Div(a, b) => {
            let vb = var(graph, *b);
            let y = var(graph, node);
            let da = dy.div(&vb);
            let db = dy.mul(&y).div(&vb).neg();
            vec![(*a, da), (*b, db)]
        }
        Op::Neg(a) => vec![(*a, dy.neg())],
        Op::Scale(a, c) => vec![(*a, dy.scale(*c))],
        Op::AddScalar(a, _) => vec![(*a, dy.clone())],
        Op::Relu(a) => {
            let m = step_mask(graph, *a, 1.0, 0.0);
            vec![(*a, dy.mul(&m))]
        }
        Op::LeakyRelu(a, slope) => {
            let m = step_mask(graph, *a, 1.0, *slope);
            vec![(*a, dy.mul(&m))]
        }
        Op::Sigmoid(a) => {
            let y = var(graph, node);
            let one_minus = y.neg().add_scalar(1.0);
            vec![(*a, dy.mul(&y).mul(&one_minus))]
        }
        Op::Sqrt(a) => {
            let y = var(graph, node);
            vec![(*a, dy.scale(0.5).div(&y))]
        }
        Op::Reshape { x, in_shape } => vec![(*x, dy.reshape(in_shape))],
        Op::Broadcast { x, in_shape } => {
            let to = dy.shape();
            let offset = to.len() - in_shape.len();
            let mut g = dy.clone();
            if offset > 0 {
                let lead: Vec<usize> = (0..offset).collect();
                g = g.sum_axes(&lead, false);
            }
            let keep_axes: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|&(i, &d)| d == 1 && g.shape()[i] != 1)
                .map(|(i, _)| i)
                .collect();
            if !keep_axes.is_empty() {
                g = g.sum_axes(&keep_axes, true);
            }
            if g.shape() != in_shape.as_slice() {
                g = g.reshape(in_shape);
            }
            vec![(*x, g)]
        }
        Op::SumAxes {
            x,
            axes,
            keep,
            in_shape,
        } => {
            let g = if *keep {
                dy.broadcast_to(in_shape)
            } else {
                let mut keep_shape = in_shape.clone();
                for &ax in axes {
                    keep_shape[ax] = 1;
                }
                dy.reshape(&keep_shape).broadcast_to(in_shape)
            };
            vec![(*x, g)]
        }
        Op::SumAll { x, in_shape } => vec![(*x, dy.broadcast_to(in_shape))],
        Op::MatMul(a, b) => {
            let va = var(graph, *a);
            let vb = var(graph, *b);
            let da = dy.matmul(&vb.swap_axes(0, 1));
            let db = va.swap_axes(0, 1).matmul(dy);
            vec![(*a, da), (*b, db)]
        }
        Op::Bmm(a, b) => {
            let va = var(graph, *a);
            let vb = var(graph, *b);
            let da = dy.bmm(&vb.swap_axes(1, 2));
            let db = va.swap_axes(1, 2).bmm(dy);
            vec![(*a, da), (*b, db)]
        }
        Op::SwapAxes { x, a, b } => vec![(*x, dy.swap_axes(*a, *b))],
        Op::CircShift { x, axis, offset } => vec![(*x, dy.circshift(*axis, -offset))],
        Op::Concat { xs, axis, sizes } => {
            let mut out = Vec::with_capacity(xs.len());
            let mut start = 0;
            for (&x, &len) in xs.iter().zip(sizes) {
                out.push((x, dy.slice_axis(*axis, start, len)));
                start += len;
            }
            out
        }
        Op::SliceAxis {
            x,
            axis,
            start,
            in_size,
        } => {
            // zero-pad the cotangent back to the source extent
            let dshape = dy.shape();
            let len = dshape[*axis];
            let mut parts: Vec<Var> = Vec::new();
            if *start > 0 {
                let mut s = dshape.clone();
                s[*axis] = *start;
                parts.push(graph.constant(ArrayD::zeros(IxDyn(&s)).into_shared()));
            }
            parts.push(dy.clone());
            if start + len < *in_size {
                let mut s = dshape.clone();
                s[*axis] = in_size - start - len;
                parts.push(graph.constant(ArrayD::zeros(IxDyn(&s)).into_shared()));
            }
            let g = if parts.len() == 1 {
                parts.pop().unwrap()
            } else {
                concat(*axis, &parts)
            };
            vec![(*x, g)]
        }
        Op::Conv { x, w, geom } => {
            let vw = var(graph, *w);
            let vx = var(graph, *x);
            let dx = push_conv_adj(graph, dy, &vw, geom);
            let dw = push_kernel_grad(graph, &vx, dy, geom);
            vec![(*x, dx), (*w, dw)]
        }
        Op::ConvAdj { x, w, geom } => {
            let vw = var(graph, *w);
            let va = var(graph, *x);
            let dx = push_conv(graph, dy, &vw, geom);
            let dw = push_kernel_grad(graph, dy, &va, geom);
            vec![(*x, dx), (*w, dw)]
        }
        Op::KernelGrad { .. } => {
            panic!("third-order derivatives through kernel gradients are not supported")
        }
    }
}
