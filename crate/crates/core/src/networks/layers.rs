//! Layer building blocks shared by the four networks.

use super::{BnBatchStats, Ctx, Mode, ParamKind};
use dakm_autograd::Var;
use ndarray::prelude::*;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

pub fn flatten(x: &Var) -> Var {
    let shape = x.shape();
    let rest: usize = shape[1..].iter().product();
    x.reshape(&[shape[0], rest])
}

/// Fully connected layer `[B, in] -> [B, out]`.
pub fn dense(ctx: &mut Ctx, prefix: &str, x: &Var, out: usize) -> Var {
    dense_impl(ctx, prefix, x, out, false)
}

/// Fully connected layer whose weights and bias start at zero.
pub fn dense_zeros(ctx: &mut Ctx, prefix: &str, x: &Var, out: usize) -> Var {
    dense_impl(ctx, prefix, x, out, true)
}

fn dense_impl(ctx: &mut Ctx, prefix: &str, x: &Var, out: usize, zeros: bool) -> Var {
    let shape = x.shape();
    assert_eq!(shape.len(), 2, "dense input must be [batch, features]");
    let (w, b) = if zeros {
        (
            ctx.param_zeros(&format!("{prefix}.w"), ParamKind::DenseWeight, &[shape[1], out]),
            ctx.param_zeros(&format!("{prefix}.b"), ParamKind::Bias, &[out]),
        )
    } else {
        (
            ctx.param(&format!("{prefix}.w"), ParamKind::DenseWeight, &[shape[1], out]),
            ctx.param(&format!("{prefix}.b"), ParamKind::Bias, &[out]),
        )
    };
    let y = x.matmul(&w);
    let bb = b.reshape(&[1, out]).broadcast_to(&[shape[0], out]);
    y.add(&bb)
}

fn bias_nd(b: &Var, like: &[usize]) -> Var {
    let c = like[1];
    let mut shape = vec![1, c];
    shape.extend(std::iter::repeat(1).take(like.len() - 2));
    b.reshape(&shape).broadcast_to(like)
}

/// SAME-padded strided convolution with bias.
pub fn conv_layer(ctx: &mut Ctx, prefix: &str, x: &Var, out_ch: usize, k: usize, stride: usize) -> Var {
    let shape = x.shape();
    let rank = shape.len() - 2;
    let mut wshape = vec![out_ch, shape[1]];
    wshape.extend(std::iter::repeat(k).take(rank));
    let w = ctx.param(&format!("{prefix}.w"), ParamKind::ConvWeight, &wshape);
    let b = ctx.param(&format!("{prefix}.b"), ParamKind::Bias, &[out_ch]);
    let y = x.conv(&w, stride);
    let yb = bias_nd(&b, &y.shape());
    y.add(&yb)
}

/// SAME-padded transposed convolution with bias; output extent is
/// `stride` times the input extent.
pub fn deconv_layer(
    ctx: &mut Ctx,
    prefix: &str,
    x: &Var,
    out_ch: usize,
    k: usize,
    stride: usize,
) -> Var {
    let shape = x.shape();
    let rank = shape.len() - 2;
    let mut wshape = vec![shape[1], out_ch];
    wshape.extend(std::iter::repeat(k).take(rank));
    let w = ctx.param(&format!("{prefix}.w"), ParamKind::DeconvWeight, &wshape);
    let b = ctx.param(&format!("{prefix}.b"), ParamKind::Bias, &[out_ch]);
    let y = x.deconv(&w, stride);
    let yb = bias_nd(&b, &y.shape());
    y.add(&yb)
}

/// Batch normalization over batch and spatial axes, per channel. Training
/// mode normalizes with batch statistics (and records them for the running
/// buffers); eval mode normalizes with the stored running statistics so that
/// outputs are batch-size independent.
pub fn batch_norm(ctx: &mut Ctx, prefix: &str, x: &Var) -> Var {
    let shape = x.shape();
    let c = shape[1];
    let gamma = ctx.param(&format!("{prefix}.gamma"), ParamKind::Gamma, &[c]);
    let beta = ctx.param(&format!("{prefix}.beta"), ParamKind::Beta, &[c]);

    let (mean_b, var_b) = match ctx.mode {
        Mode::Train => {
            let axes: Vec<usize> = std::iter::once(0).chain(2..shape.len()).collect();
            let n: usize = axes.iter().map(|&a| shape[a]).product();
            let mean = x.sum_axes(&axes, true).scale(1.0 / n as f64);
            let diff = x.sub(&mean.broadcast_to(&shape));
            let var = diff.square().sum_axes(&axes, true).scale(1.0 / n as f64);
            if ctx.record_bn {
                let mflat = Array1::from_iter(mean.value().iter().copied());
                let vflat = Array1::from_iter(var.value().iter().copied());
                ctx.bn_updates.push(BnBatchStats {
                    prefix: prefix.to_string(),
                    mean: mflat,
                    var: vflat,
                });
            }
            (mean, var)
        }
        Mode::Eval => {
            let rm = ctx.param(&format!("{prefix}.running_mean"), ParamKind::RunningMean, &[c]);
            let rv = ctx.param(&format!("{prefix}.running_var"), ParamKind::RunningVar, &[c]);
            let mut stat_shape = vec![1, c];
            stat_shape.extend(std::iter::repeat(1).take(shape.len() - 2));
            (rm.reshape(&stat_shape), rv.reshape(&stat_shape))
        }
    };
    // In eval mode the buffers were created by the init pass; touch them in
    // train mode too so checkpoints stay complete even before any update.
    if ctx.mode == Mode::Train {
        let _ = ctx.param(&format!("{prefix}.running_mean"), ParamKind::RunningMean, &[c]);
        let _ = ctx.param(&format!("{prefix}.running_var"), ParamKind::RunningVar, &[c]);
    }

    let denom = var_b.add_scalar(BN_EPS).sqrt();
    let xhat = x
        .sub(&mean_b.broadcast_to(&shape))
        .div(&denom.broadcast_to(&shape));
    let mut stat_shape = vec![1, c];
    stat_shape.extend(std::iter::repeat(1).take(shape.len() - 2));
    let g = gamma.reshape(&stat_shape).broadcast_to(&shape);
    let b = beta.reshape(&stat_shape).broadcast_to(&shape);
    xhat.mul(&g).add(&b)
}
