//! Finite-difference checks for every operator, plus second-order checks for
//! the gradient-of-gradient path used by gradient penalties.

use dakm_autograd::{concat, grad, Graph, Var};
use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Central-difference check of `d f / d x` for a scalar-valued builder.
fn check_input_grad<F>(shape: &[usize], seed: u64, f: F)
where
    F: Fn(&Graph, &Var) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_array(&mut rng, shape);

    let g = Graph::new();
    let x = g.leaf(x0.clone().into_shared());
    let y = f(&g, &x);
    let dx = grad(&y, &[&x])[0].value();

    let h = 1e-6;
    let mut worst = 0.0_f64;
    for (idx, _) in x0.indexed_iter() {
        let mut xp = x0.clone();
        xp[&idx] += h;
        let mut xm = x0.clone();
        xm[&idx] -= h;
        let gp = Graph::new();
        let fp = f(&gp, &gp.leaf(xp.into_shared())).scalar();
        let gm = Graph::new();
        let fm = f(&gm, &gm.leaf(xm.into_shared())).scalar();
        let num = (fp - fm) / (2.0 * h);
        let ana = dx[&idx];
        let denom = ana.abs().max(num.abs()).max(1e-4);
        worst = worst.max((ana - num).abs() / denom);
    }
    assert!(worst < 1e-5, "gradient mismatch: rel err {worst:.3e}");
}

#[test]
fn elementwise_chain() {
    check_input_grad(&[3, 4], 1, |_g, x| {
        let a = x.scale(1.5).add_scalar(0.2);
        let b = a.sigmoid().mul(&a.relu().add_scalar(0.1));
        let c = b.div(&a.square().add_scalar(1.0));
        c.sum_all()
    });
}

#[test]
fn leaky_relu_sqrt_neg() {
    check_input_grad(&[5], 2, |g, x| {
        let a = x.leaky_relu(0.2).neg().add_scalar(2.0);
        let b = a.sqrt().sub(&x.scale(0.3));
        let _ = g;
        b.square().sum_all()
    });
}

#[test]
fn reductions_and_broadcast() {
    check_input_grad(&[2, 3, 4], 3, |g, x| {
        let m = x.sum_axes(&[0, 2], true).scale(1.0 / 8.0);
        let centered = x.sub(&m.broadcast_to(&[2, 3, 4]));
        let v = centered.square().sum_axes(&[0, 2], false).scale(1.0 / 8.0);
        let _ = g;
        v.add_scalar(1e-3).sqrt().sum_all()
    });
}

#[test]
fn matmul_and_bmm() {
    check_input_grad(&[2, 6], 4, |g, x| {
        let w = g.constant(
            ArrayD::from_shape_fn(IxDyn(&[6, 3]), |ix| ((ix[0] + 2 * ix[1]) as f64).sin())
                .into_shared(),
        );
        let y = x.matmul(&w).relu();
        let b = y.reshape(&[1, 2, 3]);
        let bt = b.swap_axes(1, 2);
        b.bmm(&bt).sum_all()
    });
}

#[test]
fn concat_slice_circshift() {
    check_input_grad(&[2, 8], 5, |_, x| {
        let left = x.slice_axis(1, 0, 3);
        let right = x.slice_axis(1, 3, 5).circshift(1, 2);
        let y = concat(1, &[right, left]);
        y.square().sum_all()
    });
}

#[test]
fn conv1d_input_and_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w0 = rand_array(&mut rng, &[3, 2, 3]);
    check_input_grad(&[1, 2, 8], 7, |g, x| {
        let w = g.leaf(w0.clone().into_shared());
        x.conv(&w, 2).relu().square().sum_all()
    });
    // kernel gradient
    let x0 = rand_array(&mut rng, &[1, 2, 8]);
    let check_w = |w0: &ArrayD<f64>| {
        let g = Graph::new();
        let x = g.constant(x0.clone().into_shared());
        let w = g.leaf(w0.clone().into_shared());
        let y = x.conv(&w, 2).square().sum_all();
        (y.scalar(), grad(&y, &[&w])[0].value())
    };
    let (_, dw) = check_w(&w0);
    let h = 1e-6;
    for idx in [[0usize, 0, 0], [2, 1, 2], [1, 0, 1]] {
        let mut wp = w0.clone();
        wp[IxDyn(&idx)] += h;
        let mut wm = w0.clone();
        wm[IxDyn(&idx)] -= h;
        let num = (check_w(&wp).0 - check_w(&wm).0) / (2.0 * h);
        assert!((dw[IxDyn(&idx)] - num).abs() < 1e-5);
    }
}

#[test]
fn conv2d_and_deconv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let wc = rand_array(&mut rng, &[4, 2, 3, 3]);
    let wd = rand_array(&mut rng, &[4, 2, 3, 3]);
    check_input_grad(&[1, 2, 6, 6], 9, |g, x| {
        let wcv = g.leaf(wc.clone().into_shared());
        let wdv = g.leaf(wd.clone().into_shared());
        let down = x.conv(&wcv, 2).leaky_relu(0.2);
        let up = down.deconv(&wdv, 2).sigmoid();
        up.sum_all()
    });
}

#[test]
fn deconv_doubles_extent() {
    let g = Graph::new();
    let x = g.constant(ArrayD::zeros(IxDyn(&[1, 3, 5, 7])).into_shared());
    let w = g.constant(ArrayD::zeros(IxDyn(&[3, 2, 3, 3])).into_shared());
    assert_eq!(x.deconv(&w, 2).shape(), vec![1, 2, 10, 14]);
}

#[test]
fn second_order_polynomial() {
    // f(x) = sum(x^3): grad = 3x^2, grad of sum(grad) = 6x.
    let g = Graph::new();
    let x0 = array![0.5, -1.25, 2.0].into_dyn();
    let x = g.leaf(x0.clone().into_shared());
    let f = x.square().mul(&x).sum_all();
    let gx = grad(&f, &[&x])[0].clone();
    for (i, &v) in x0.iter().enumerate() {
        assert!((gx.value()[[i]] - 3.0 * v * v).abs() < 1e-12);
    }
    let h = gx.sum_all();
    let ggx = grad(&h, &[&x])[0].value();
    for (i, &v) in x0.iter().enumerate() {
        assert!((ggx[[i]] - 6.0 * v).abs() < 1e-12);
    }
}

#[test]
fn second_order_gradient_penalty_through_conv() {
    // D(x) = sum(conv(x, w)); n(w) = || d D / d x ||^2 is a function of w
    // alone. Check d n / d w against central differences: the exact pattern a
    // WGAN gradient penalty exercises.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0 = rand_array(&mut rng, &[1, 1, 6]);
    let w0 = rand_array(&mut rng, &[2, 1, 3]);

    let eval = |w0: &ArrayD<f64>, want_grad: bool| -> (f64, Option<ArrayD<f64>>) {
        let g = Graph::new();
        let x = g.leaf(x0.clone().into_shared());
        let w = g.leaf(w0.clone().into_shared());
        let d = x.conv(&w, 2).sum_all();
        let gx = grad(&d, &[&x])[0].clone();
        let n = gx.square().sum_all();
        if want_grad {
            let dw = grad(&n, &[&w])[0].value().to_owned();
            (n.scalar(), Some(dw))
        } else {
            (n.scalar(), None)
        }
    };

    let (_, dw) = eval(&w0, true);
    let dw = dw.unwrap();
    let h = 1e-6;
    let mut worst = 0.0_f64;
    for (idx, _) in w0.indexed_iter() {
        let mut wp = w0.clone();
        wp[&idx] += h;
        let mut wm = w0.clone();
        wm[&idx] -= h;
        let num = (eval(&wp, false).0 - eval(&wm, false).0) / (2.0 * h);
        let ana = dw[&idx];
        let denom = ana.abs().max(num.abs()).max(1e-6);
        worst = worst.max((ana - num).abs() / denom);
    }
    assert!(worst < 1e-6, "second-order mismatch: rel err {worst:.3e}");
}

#[test]
fn grad_of_unrelated_var_is_zero() {
    let g = Graph::new();
    let x = g.leaf(array![1.0, 2.0].into_dyn().into_shared());
    let z = g.leaf(array![3.0].into_dyn().into_shared());
    let y = x.square().sum_all();
    let gz = grad(&y, &[&z])[0].value();
    assert_eq!(gz.shape(), &[1]);
    assert_eq!(gz[[0]], 0.0);
}
