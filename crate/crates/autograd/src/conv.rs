//! Raw convolution kernels backing the taped operators.
//!
//! Layout convention is channels-first: activations are `[batch, channels,
//! spatial...]` with one or two spatial dimensions, kernels are
//! `[out_ch, in_ch, k...]`. All three primitives (forward, adjoint, kernel
//! gradient) share one geometry so that the adjoint is exact with respect to
//! the forward scatter pattern, including asymmetric same-padding.

use ndarray::prelude::*;

/// Geometry of one convolution: the "big" side is the conv-direction input,
/// the "small" side its strided output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub kernel: Vec<usize>,
    pub pads: Vec<(usize, usize)>,
    pub big_spatial: Vec<usize>,
    pub small_spatial: Vec<usize>,
}

/// TensorFlow-style SAME padding: total pad `max((out-1)*s + k - n, 0)` with
/// the extra element on the trailing side.
pub fn same_pads(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let needed = (out - 1) * s + k;
    let total = needed.saturating_sub(n);
    (total / 2, total - total / 2)
}

pub fn conv_out_len(n: usize, k: usize, s: usize, pads: (usize, usize)) -> usize {
    (n + pads.0 + pads.1 - k) / s + 1
}

impl ConvGeom {
    /// Geometry for a SAME-padded convolution from `big_spatial` down by `stride`.
    pub fn same(big_spatial: &[usize], kernel: &[usize], stride: usize) -> Self {
        assert_eq!(big_spatial.len(), kernel.len());
        let pads: Vec<_> = big_spatial
            .iter()
            .zip(kernel)
            .map(|(&n, &k)| same_pads(n, k, stride))
            .collect();
        let small_spatial = big_spatial
            .iter()
            .zip(kernel.iter().zip(&pads))
            .map(|(&n, (&k, &p))| conv_out_len(n, k, stride, p))
            .collect();
        ConvGeom {
            stride,
            kernel: kernel.to_vec(),
            pads,
            big_spatial: big_spatial.to_vec(),
            small_spatial,
        }
    }

    pub fn rank(&self) -> usize {
        self.kernel.len()
    }

    fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel.iter().product::<usize>()
    }

    fn n_patches(&self) -> usize {
        self.small_spatial.iter().product()
    }
}

/// Unfold one item `[C, spatial...]` into `[C * prod(k), n_patches]`.
fn im2col(x: ArrayViewD<f64>, g: &ConvGeom) -> Array2<f64> {
    let c = x.shape()[0];
    let mut cols = Array2::<f64>::zeros((g.patch_len(c), g.n_patches()));
    match g.rank() {
        1 => {
            let x = x.into_dimensionality::<Ix2>().unwrap();
            let (k, n, pl) = (g.kernel[0], g.big_spatial[0], g.pads[0].0 as isize);
            for p in 0..g.small_spatial[0] {
                for q in 0..k {
                    let i = (p * g.stride + q) as isize - pl;
                    if i < 0 || i >= n as isize {
                        continue;
                    }
                    for ch in 0..c {
                        cols[[ch * k + q, p]] = x[[ch, i as usize]];
                    }
                }
            }
        }
        2 => {
            let x = x.into_dimensionality::<Ix3>().unwrap();
            let (kh, kw) = (g.kernel[0], g.kernel[1]);
            let (nh, nw) = (g.big_spatial[0], g.big_spatial[1]);
            let (plh, plw) = (g.pads[0].0 as isize, g.pads[1].0 as isize);
            let ow = g.small_spatial[1];
            for ph in 0..g.small_spatial[0] {
                for pw in 0..ow {
                    let p = ph * ow + pw;
                    for qh in 0..kh {
                        let i = (ph * g.stride + qh) as isize - plh;
                        if i < 0 || i >= nh as isize {
                            continue;
                        }
                        for qw in 0..kw {
                            let j = (pw * g.stride + qw) as isize - plw;
                            if j < 0 || j >= nw as isize {
                                continue;
                            }
                            for ch in 0..c {
                                cols[[(ch * kh + qh) * kw + qw, p]] =
                                    x[[ch, i as usize, j as usize]];
                            }
                        }
                    }
                }
            }
        }
        r => panic!("unsupported convolution rank {r}"),
    }
    cols
}

/// Scatter-add `[C * prod(k), n_patches]` back onto `[C, spatial...]`; exact
/// adjoint of `im2col`.
fn col2im(cols: ArrayView2<f64>, c: usize, g: &ConvGeom) -> ArrayD<f64> {
    let mut shape = vec![c];
    shape.extend_from_slice(&g.big_spatial);
    let mut x = ArrayD::<f64>::zeros(IxDyn(&shape));
    match g.rank() {
        1 => {
            let mut xv = x.view_mut().into_dimensionality::<Ix2>().unwrap();
            let (k, n, pl) = (g.kernel[0], g.big_spatial[0], g.pads[0].0 as isize);
            for p in 0..g.small_spatial[0] {
                for q in 0..k {
                    let i = (p * g.stride + q) as isize - pl;
                    if i < 0 || i >= n as isize {
                        continue;
                    }
                    for ch in 0..c {
                        xv[[ch, i as usize]] += cols[[ch * k + q, p]];
                    }
                }
            }
        }
        2 => {
            let mut xv = x.view_mut().into_dimensionality::<Ix3>().unwrap();
            let (kh, kw) = (g.kernel[0], g.kernel[1]);
            let (nh, nw) = (g.big_spatial[0], g.big_spatial[1]);
            let (plh, plw) = (g.pads[0].0 as isize, g.pads[1].0 as isize);
            let ow = g.small_spatial[1];
            for ph in 0..g.small_spatial[0] {
                for pw in 0..ow {
                    let p = ph * ow + pw;
                    for qh in 0..kh {
                        let i = (ph * g.stride + qh) as isize - plh;
                        if i < 0 || i >= nh as isize {
                            continue;
                        }
                        for qw in 0..kw {
                            let j = (pw * g.stride + qw) as isize - plw;
                            if j < 0 || j >= nw as isize {
                                continue;
                            }
                            for ch in 0..c {
                                xv[[ch, i as usize, j as usize]] +=
                                    cols[[(ch * kh + qh) * kw + qw, p]];
                            }
                        }
                    }
                }
            }
        }
        r => panic!("unsupported convolution rank {r}"),
    }
    x
}

fn kernel_mat(w: &ArrayD<f64>) -> Array2<f64> {
    let o = w.shape()[0];
    let rest: usize = w.shape()[1..].iter().product();
    w.to_shape((o, rest)).unwrap().to_owned()
}

/// Strided correlation `x [B,C,s...] * w [O,C,k...] -> [B,O,so...]`.
pub fn conv_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let b = x.shape()[0];
    let (o, c) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.shape()[1], c, "conv: channel mismatch");
    assert_eq!(&x.shape()[2..], &g.big_spatial[..], "conv: spatial mismatch");
    let w2 = kernel_mat(w);
    let mut out_shape = vec![b, o];
    out_shape.extend_from_slice(&g.small_spatial);
    let mut y = ArrayD::<f64>::zeros(IxDyn(&out_shape));
    let p = g.n_patches();
    for bi in 0..b {
        let cols = im2col(x.index_axis(Axis(0), bi), g);
        let yb = w2.dot(&cols);
        y.index_axis_mut(Axis(0), bi)
            .assign(&yb.into_shape_with_order(IxDyn(&out_shape[1..])).unwrap());
        debug_assert_eq!(yb_len(o, p), o * p);
    }
    y
}

#[inline]
fn yb_len(o: usize, p: usize) -> usize {
    o * p
}

/// Exact adjoint of [`conv_fwd`]: `a [B,O,so...] -> [B,C,s...]`.
pub fn conv_adj_fwd(a: &ArrayD<f64>, w: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let b = a.shape()[0];
    let (o, c) = (w.shape()[0], w.shape()[1]);
    assert_eq!(a.shape()[1], o, "conv_adj: channel mismatch");
    assert_eq!(
        &a.shape()[2..],
        &g.small_spatial[..],
        "conv_adj: spatial mismatch"
    );
    let w2t = kernel_mat(w).reversed_axes().as_standard_layout().to_owned();
    let mut out_shape = vec![b, c];
    out_shape.extend_from_slice(&g.big_spatial);
    let mut y = ArrayD::<f64>::zeros(IxDyn(&out_shape));
    let p = g.n_patches();
    for bi in 0..b {
        let ab = a
            .index_axis(Axis(0), bi)
            .to_shape((o, p))
            .unwrap()
            .to_owned();
        let dcols = w2t.dot(&ab);
        y.index_axis_mut(Axis(0), bi)
            .assign(&col2im(dcols.view(), c, g));
    }
    y
}

/// Kernel gradient: given conv-direction input `x [B,C,s...]` and output
/// cotangent `dy [B,O,so...]`, returns `dw [O,C,k...]`.
pub fn kernel_grad(x: &ArrayD<f64>, dy: &ArrayD<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let o = dy.shape()[1];
    assert_eq!(dy.shape()[0], b, "kernel_grad: batch mismatch");
    let p = g.n_patches();
    let mut dw2 = Array2::<f64>::zeros((o, g.patch_len(c)));
    for bi in 0..b {
        let cols = im2col(x.index_axis(Axis(0), bi), g);
        let dyb = dy
            .index_axis(Axis(0), bi)
            .to_shape((o, p))
            .unwrap()
            .to_owned();
        dw2 = dw2 + dyb.dot(&cols.reversed_axes());
    }
    let mut shape = vec![o, c];
    shape.extend_from_slice(&g.kernel);
    dw2.into_shape_with_order(IxDyn(&shape)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_tf_rule() {
        assert_eq!(same_pads(32, 3, 2), (0, 1));
        assert_eq!(same_pads(32, 5, 2), (1, 2));
        assert_eq!(same_pads(32, 3, 1), (1, 1));
        assert_eq!(same_pads(32, 1, 1), (0, 0));
        assert_eq!(same_pads(1, 5, 2), (2, 2));
    }

    #[test]
    fn conv_and_adjoint_agree_on_inner_products() {
        // <conv(x), a> == <x, adj(a)> for random tensors: definition of adjoint.
        let g = ConvGeom::same(&[6, 8], &[3, 3], 2);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 6, 8]), |ix| {
            (ix[0] * 31 + ix[1] * 7 + ix[2] * 3 + ix[3]) as f64 * 0.01 - 0.5
        });
        let w = ArrayD::from_shape_fn(IxDyn(&[4, 3, 3, 3]), |ix| {
            ((ix[0] + 2 * ix[1] + 3 * ix[2] + ix[3]) as f64 * 0.1).sin()
        });
        let y = conv_fwd(&x, &w, &g);
        let a = ArrayD::from_shape_fn(y.raw_dim(), |ix| ((ix[1] + ix[2] * 2) as f64 * 0.3).cos());
        let lhs: f64 = (&y * &a).sum();
        let back = conv_adj_fwd(&a, &w, &g);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn kernel_grad_is_directional_derivative() {
        let g = ConvGeom::same(&[10], &[3], 2);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 10]), |ix| (ix[1] as f64 + ix[2] as f64).sin());
        let w = ArrayD::from_shape_fn(IxDyn(&[3, 2, 3]), |ix| 0.1 * (ix[0] as f64 - ix[2] as f64));
        let dy = ArrayD::from_shape_fn(IxDyn(&[1, 3, 5]), |ix| (1.0 + ix[1] as f64) * 0.2);
        let dw = kernel_grad(&x, &dy, &g);
        // finite difference along a single kernel entry
        let mut wp = w.clone();
        let h = 1e-6;
        wp[[1, 0, 2]] += h;
        let mut wm = w.clone();
        wm[[1, 0, 2]] -= h;
        let f = |wx: &ArrayD<f64>| (&conv_fwd(&x, wx, &g) * &dy).sum();
        let num = (f(&wp) - f(&wm)) / (2.0 * h);
        assert!((dw[[1, 0, 2]] - num).abs() < 1e-6);
    }
}
