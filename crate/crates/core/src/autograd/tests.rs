use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::concat;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Direct nested-loop convolution.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + y as usize) * wd + xx as usize]
                                    * w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Checks the analytic gradient of `build(inputs)` against central differences
/// for every input.
fn check_grad(inputs: &[Tensor], build: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>, tol: f64) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone()).unwrap()).collect();
    let out = build(&vars).unwrap();
    let grads = backward(out, &vars, GradMode::First).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let f = |probe: &Tensor| {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tape.constant(if j == k { probe.clone() } else { t.clone() }).unwrap())
                .collect();
            build(&vars)?.item()
        };
        let fd = finite_diff_gradient(f, input, 1e-5).unwrap();
        let an = grads.grads[k].value();
        let err = max_rel_err(&an, &fd);
        assert!(err < tol, "input {k}: rel err {err}");
    }
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element gets a distinct upstream weight.
fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, &y.shape());
    y.mul(y.tape().constant(r)?)?.sum()
}

#[test]
fn identity_kernel_conv_returns_input() {
    let tape = Tape::new();
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let y = tape.constant(x.clone()).unwrap().conv2d(tape.constant(k).unwrap(), 1, 0).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let tape = Tape::new();
        let y = tape.constant(x.clone()).unwrap().conv2d(tape.constant(w.clone()).unwrap(), stride, pad).unwrap();
        let expected = conv_oracle(&x, &w, stride, pad);
        assert_eq!(y.shape(), expected.shape());
        assert!(y.value().max_abs_diff(&expected) < 1e-12);
    }
    let tape = Tape::new();
    let y = tape.constant(x).unwrap().conv2d(tape.constant(w).unwrap(), 1, 1).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 8, 8]);
}

#[test]
fn cosine_self_distance_is_zero() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(vec![0.3, -2.0, 5.0])).unwrap();
    assert!(v.cosine_distance(v).unwrap().item().unwrap().abs() < 1e-15);
}

#[test]
fn square_derivative() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0)).unwrap();
    let y = x.mul(x).unwrap();
    let g = backward(y, &[x], GradMode::First).unwrap();
    assert_eq!(g.grads[0].item().unwrap(), 6.0);
}

#[test]
fn cube_second_derivative() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0)).unwrap();
    let y = x.mul(x).unwrap().mul(x).unwrap();
    let g = backward(y, &[x], GradMode::Higher).unwrap().grads[0];
    assert_eq!(g.item().unwrap(), 12.0);
    assert!(g.requires_grad());
    let gg = backward(g, &[x], GradMode::First).unwrap().grads[0];
    assert_eq!(gg.item().unwrap(), 12.0);
}

#[test]
fn first_mode_gradients_are_constants() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0)).unwrap();
    let y = x.mul(x).unwrap();
    let g = backward(y, &[x], GradMode::First).unwrap().grads[0];
    assert!(!g.requires_grad());
}

#[test]
fn duplicated_variable_accumulates() {
    // f(a, b) = a·b with a = b = x; oracle: d/dx x² = 2x, i.e. the sum of both paths.
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.5, -2.0])).unwrap();
    let y = x.dot(x).unwrap();
    let g = backward(y, &[x], GradMode::First).unwrap().grads[0].value();
    assert_eq!(g.data(), &[3.0, -4.0]);
    let tape = Tape::new();
    let a = tape.var(Tensor::from_vec(vec![1.5, -2.0])).unwrap();
    let b = tape.var(Tensor::from_vec(vec![1.5, -2.0])).unwrap();
    let y = a.dot(b).unwrap();
    let gs = backward(y, &[a, b], GradMode::First).unwrap();
    let summed: Vec<f64> =
        gs.grads[0].value().data().iter().zip(gs.grads[1].value().data()).map(|(p, q)| p + q).collect();
    assert_eq!(g.data(), summed.as_slice());
}

#[test]
fn unreachable_variable_is_flagged() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(1.0)).unwrap();
    let z = tape.var(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let y = x.mul(x).unwrap();
    let g = backward(y, &[x, z], GradMode::First).unwrap();
    assert_eq!(g.unreachable, vec![false, true]);
    assert_eq!(g.grads[1].value().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_constants() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let y = x.mul(c).unwrap();
    assert!(backward(y, &[x], GradMode::First).is_err());
    let s = y.sum().unwrap();
    assert!(backward(s, &[c], GradMode::First).is_err());
}

#[test]
fn non_finite_is_an_error() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(-1.0)).unwrap();
    assert!(matches!(x.ln(), Err(Error::NonFinite { .. })));
    assert!(matches!(x.sqrt(), Err(Error::NonFinite { .. })));
    assert!(tape.var(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let tape = Tape::new();
    let a = tape.var(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.var(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(a.add(b), Err(Error::Shape { .. })));
    assert!(a.matmul(a).is_err());
    assert!(b.matmul(a).is_ok());
}

#[test]
fn fd_of_sum_of_squares() {
    let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &Tensor::from_vec(vec![1.0, 2.0]), 1e-4)
        .unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
}

#[test]
fn elementwise_primitives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]).map(|v| v.abs() + 0.5);
    check_grad(&[a.clone(), b.clone()], |v| weighted_sum(v[0].add(v[1])?, 2), 1e-4);
    check_grad(&[a.clone(), b.clone()], |v| weighted_sum(v[0].sub(v[1])?, 3), 1e-4);
    check_grad(&[a.clone(), b.clone()], |v| weighted_sum(v[0].mul(v[1])?, 4), 1e-4);
    check_grad(&[a.clone(), b.clone()], |v| weighted_sum(v[0].div(v[1])?, 5), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].scale(-2.5)?.add_const(1.0)?, 6), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].exp()?, 7), 1e-4);
    check_grad(&[b.clone()], |v| weighted_sum(v[0].ln()?, 8), 1e-4);
    check_grad(&[b.clone()], |v| weighted_sum(v[0].sqrt()?, 9), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].relu()?, 10), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].abs()?, 11), 1e-4);
    check_grad(&[a.clone(), b.clone()], |v| v[0].dot(v[1]), 1e-4);
    check_grad(&[a.clone()], |v| v[0].l2_norm(), 1e-4);
    check_grad(&[a.clone(), b.clone()], |v| v[0].cosine_distance(v[1]), 1e-4);
    check_grad(&[a.clone(), Tensor::scalar(0.7)], |v| weighted_sum(v[0].mul_scalar(v[1])?, 12), 1e-4);
}

#[test]
fn structural_primitives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let bias = rand_tensor(&mut rng, &[4]);
    check_grad(&[a.clone(), b.clone()], |v| weighted_sum(v[0].matmul(v[1])?, 1), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].t()?, 2), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].reshape(&[2, 6])?, 3), 1e-4);
    check_grad(&[a.clone(), bias.clone()], |v| weighted_sum(v[0].add_bias(v[1])?, 4), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].sum_keep_axis(0)?, 5), 1e-4);
    check_grad(&[a.clone()], |v| weighted_sum(v[0].slice(2, 5)?, 6), 1e-4);
    check_grad(&[a.clone(), bias.clone()], |v| weighted_sum(concat(&[v[0], v[1]])?, 7), 1e-4);
    let idx: Arc<[usize]> = vec![0, 3, 3, 11].into();
    check_grad(&[a.clone()], move |v| weighted_sum(v[0].gather(Arc::clone(&idx))?, 8), 1e-4);
    let sets = Arc::new(IndexSets::new(vec![vec![0, 1, 5], vec![7], vec![2, 3, 4, 8, 9]], 12).unwrap());
    check_grad(&[a.clone()], move |v| weighted_sum(v[0].mean_over_index_set(Arc::clone(&sets))?, 9), 1e-4);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let wb = rand_tensor(&mut rng, &[5]);
    let x = rand_tensor(&mut rng, &[2, 3]);
    check_grad(&[x, w, wb], |v| weighted_sum(v[0].dense(v[1], v[2])?, 10), 1e-4);
}

#[test]
fn image_primitives_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    check_grad(&[x.clone(), w.clone()], |v| weighted_sum(v[0].conv2d(v[1], 1, 1)?, 1), 1e-4);
    check_grad(&[x.clone(), w.clone()], |v| weighted_sum(v[0].conv2d(v[1], 2, 1)?, 2), 1e-4);
    check_grad(&[x.clone()], |v| weighted_sum(v[0].avg_pool2d(2, 2)?, 3), 1e-4);
    check_grad(&[x.clone()], |v| weighted_sum(v[0].avg_pool2d(4, 4)?, 4), 1e-4);
    check_grad(&[x.clone()], |v| weighted_sum(v[0].max_pool2d(2)?, 5), 1e-4);
    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    let rm = rand_tensor(&mut rng, &[2]);
    let rv = rand_tensor(&mut rng, &[2]).map(|v| v.abs() + 0.5);
    check_grad(
        &[x.clone(), gamma.clone(), beta.clone()],
        |v| weighted_sum(v[0].batchnorm2d_eval(v[1], v[2], &rm, &rv, 1e-5)?, 6),
        1e-4,
    );
    check_grad(
        &[x.clone(), gamma, beta],
        |v| weighted_sum(v[0].batchnorm2d_train(v[1], v[2], 1e-5)?.0, 7),
        1e-4,
    );
    let logits = rand_tensor(&mut rng, &[3, 5]);
    check_grad(&[logits], |v| v[0].softmax_cross_entropy(&[0, 4, 2]), 1e-4);
}

#[test]
fn two_layer_net_matches_fd_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let w1 = rand_tensor(&mut rng, &[6, 5]);
    let b1 = rand_tensor(&mut rng, &[6]);
    let w2 = rand_tensor(&mut rng, &[3, 6]);
    let b2 = rand_tensor(&mut rng, &[3]);
    check_grad(
        &[w1, b1, w2, b2],
        |v| {
            let tape = v[0].tape();
            let x = tape.constant(x.clone())?;
            x.dense(v[0], v[1])?.relu()?.dense(v[2], v[3])?.softmax_cross_entropy(&[0, 1, 2, 1])
        },
        1e-6,
    );
}

/// Builds `loss(w)` for a conv → relu → pool → dense net and returns (tape vars).
fn small_conv_loss<'t>(tape: &'t Tape, x: Var<'t>, w: Var<'t>, d: &Tensor) -> Result<Var<'t>> {
    let h = x.conv2d(w, 1, 1)?.relu()?.avg_pool2d(4, 4)?.reshape(&[2, 3])?;
    let dw = tape.constant(d.clone())?;
    h.matmul(dw.t()?)?.softmax_cross_entropy(&[1, 0])
}

#[test]
fn hessian_vector_product_matches_fd_of_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let d = rand_tensor(&mut rng, &[2, 3]);
    let u = rand_tensor(&mut rng, &[3, 2, 3, 3]);

    // Analytic: ∇_w ⟨∇_w L, u⟩ = H u.
    let tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let wv = tape.var(w.clone()).unwrap();
    let loss = small_conv_loss(&tape, xv, wv, &d).unwrap();
    let g = backward(loss, &[wv], GradMode::Higher).unwrap().grads[0];
    let gu = g.dot(tape.constant(u.clone()).unwrap()).unwrap();
    let hu = backward(gu, &[wv], GradMode::First).unwrap().grads[0].value();

    // Oracle: central differences of the first gradient along u.
    let grad_at = |wt: &Tensor| {
        let tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.var(wt.clone()).unwrap();
        let loss = small_conv_loss(&tape, xv, wv, &d).unwrap();
        (*backward(loss, &[wv], GradMode::First).unwrap().grads[0].value()).clone()
    };
    let h = 1e-5;
    let wp = Tensor::new(w.shape().to_vec(), w.data().iter().zip(u.data()).map(|(a, b)| a + h * b).collect()).unwrap();
    let wm = Tensor::new(w.shape().to_vec(), w.data().iter().zip(u.data()).map(|(a, b)| a - h * b).collect()).unwrap();
    let (gp, gm) = (grad_at(&wp), grad_at(&wm));
    let fd: Vec<f64> = gp.data().iter().zip(gm.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let fd = Tensor::new(w.shape().to_vec(), fd).unwrap();
    let scale = fd.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    assert!(hu.max_abs_diff(&fd) / scale < 1e-4, "{}", hu.max_abs_diff(&fd) / scale);
}

#[test]
fn input_gradient_of_parameter_gradient_matches_fd() {
    // d/dx ⟨∇_w L(x, w), u⟩: the mixed second derivative the input-space saliency needs.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let d = rand_tensor(&mut rng, &[2, 3]);
    let u = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let f = |xt: &Tensor, mode: GradMode| -> (f64, Option<Tensor>) {
        let tape = Tape::new();
        let xv = tape.var(xt.clone()).unwrap();
        let wv = tape.var(w.clone()).unwrap();
        let loss = small_conv_loss(&tape, xv, wv, &d).unwrap();
        let g = backward(loss, &[wv], mode).unwrap().grads[0];
        let gu = g.dot(tape.constant(u.clone()).unwrap()).unwrap();
        let val = gu.item().unwrap();
        let gx = (mode == GradMode::Higher).then(|| (*backward(gu, &[xv], GradMode::First).unwrap().grads[0].value()).clone());
        (val, gx)
    };
    let analytic = f(&x, GradMode::Higher).1.unwrap();
    let fd = finite_diff_gradient(|p| Ok(f(p, GradMode::First).0), &x, 1e-5).unwrap();
    let scale = fd.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    assert!(analytic.max_abs_diff(&fd) / scale < 1e-5);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let wv = tape.var(w).unwrap();
        let y = xv.conv2d(wv, 1, 1).unwrap().relu().unwrap().sum().unwrap();
        let g = backward(y, &[wv], GradMode::First).unwrap().grads[0].value();
        (y.item().unwrap().to_bits(), g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
