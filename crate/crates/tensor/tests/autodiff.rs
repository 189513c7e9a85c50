use gradtape::nn::{instance_norm, Conv2d, Linear, Module};
use gradtape::optim::Adam;
use gradtape::{grad, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64, eps: f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut hi = x.clone();
            hi.data_mut()[i] += eps;
            let mut lo = x.clone();
            lo.data_mut()[i] -= eps;
            (f(&hi) - f(&lo)) / (2.0 * eps)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs()).max(1.0);
        assert!((a - n).abs() <= tol * scale, "coordinate {i}: analytic {a} vs numeric {n}");
    }
}

/// Checks the gradient of a scalar function of one tensor.
fn check(x: Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) {
    let v = Var::param(x.clone());
    let y = f(&v);
    let g = grad(&y, &[&v], false).remove(0);
    let numeric = numeric_grad(&x, &|t| f(&Var::constant(t.clone())).item(), 1e-5);
    assert_close(g.value().data(), &numeric, 1e-6);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 3, 2, 2], &mut rng);
    let other = Var::constant(random(&[2, 3, 2, 2], &mut rng));
    let channel = Var::constant(random(&[1, 3, 1, 1], &mut rng).map(|v| v + 2.0));
    check(x.clone(), |v| v.tanh().sum());
    check(x.clone(), |v| v.sigmoid().mul(&other).sum());
    check(x.clone(), |v| v.leaky_relu(0.2).mul(&other).sum());
    check(x.clone(), |v| v.abs().mean());
    check(x.clone(), |v| v.square().add_scalar(0.5).sqrt().sum());
    check(x.clone(), |v| v.div(&channel).mul(&other).sum());
    check(x.clone(), |v| channel.div(&v.square().add_scalar(1.0)).sum());
    check(x.clone(), |v| v.exp().mul(&other).mean());
    check(x.clone(), |v| v.sub(&other).square().sum_to(&[2, 1, 1, 1]).sqrt().sum());
    check(x.clone(), |v| instance_norm(v, 1e-5).mul(&other).sum());
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let w = Var::constant(random(&[2, 5, 4, 4], &mut rng));
    let y = Var::constant(random(&[2, 3, 4, 4], &mut rng));
    check(x.clone(), |v| Var::concat(&[v.clone(), y.clone(), v.narrow(1, 1, 2)], 1)
        .tanh()
        .mul(&Var::constant(Tensor::ones(&[2, 8, 4, 4])))
        .sum());
    check(x.clone(), |v| v.narrow(1, 0, 2).pad_axis(1, 3, 5).mul(&w).sum());
    check(x.clone(), |v| v.avg_pool2().square().sum());
    check(x.clone(), |v| v.resize_bilinear(7, 5).square().sum());
    check(x.clone(), |v| v.max_pool(2, 2).square().sum());
    check(x.clone(), |v| v.decimate(2).square().sum());
    check(x.clone(), |v| v.reshape(&[6, 16]).broadcast_to(&[6, 16]).square().mean());
}

#[test]
fn conv_and_linear_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 5, 4], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let wv = Var::constant(w.clone());
    check(x.clone(), |v| v.conv2d(&wv, 1).tanh().sum());
    let xv = Var::constant(x.clone());
    check(w.clone(), |v| xv.conv2d(v, 1).tanh().sum());
    let a = random(&[3, 4], &mut rng);
    let b = Var::constant(random(&[5, 4], &mut rng));
    check(a.clone(), |v| v.matmul_t(&b, false, true).tanh().sum());
    check(a.clone(), |v| b.matmul_t(v, false, true).tanh().sum());
    check(a.clone(), |v| v.matmul_t(&b.matmul_t(&b, true, false), false, false).tanh().sum());
}

/// Differentiates the squared input-gradient norm, which exercises every
/// backward rule a second time.
fn check_second_order(x: Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) {
    let penalty = |t: &Tensor<f64>, record: bool| -> (f64, Option<Tensor<f64>>) {
        let v = Var::param(t.clone());
        let y = f(&v);
        let g = grad(&y, &[&v], true).remove(0);
        let p = g.square().sum();
        let pg = record.then(|| grad(&p, &[&v], false).remove(0).value().clone());
        (p.item(), pg)
    };
    let (_, analytic) = penalty(&x, true);
    let numeric = numeric_grad(&x, &|t| penalty(t, false).0, 1e-5);
    assert_close(analytic.unwrap().data(), &numeric, 1e-5);
}

#[test]
fn second_order_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[1, 2, 4, 4], &mut rng);
    let w1 = Var::constant(random(&[3, 2, 3, 3], &mut rng));
    let w2 = Var::constant(random(&[2, 3, 1, 1], &mut rng));
    check_second_order(x.clone(), |v| v.conv2d(&w1, 1).tanh().conv2d(&w2, 0).avg_pool2().sigmoid().sum());
    check_second_order(x.clone(), |v| v.square().add_scalar(1.0).sqrt().resize_bilinear(3, 6).exp().mean());
    let m = Var::constant(random(&[4, 8], &mut rng));
    check_second_order(random(&[2, 4], &mut rng), |v| v.matmul(&m).tanh().square().sum());
}

#[test]
fn second_order_through_conv_weights() {
    // d/dw of ||d/dx f(x; w)||^2, the gradient-penalty pattern.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Var::param(random(&[2, 2, 4, 4], &mut rng));
    let w0 = random(&[3, 2, 3, 3], &mut rng);
    let head = Var::constant(random(&[1, 3, 4, 4], &mut rng));
    let penalty = |w: &Var<f64>| -> Var<f64> {
        let y = x.conv2d(w, 1).tanh().mul(&head).sum();
        let g = grad(&y, &[&x], true).remove(0);
        g.square().sum()
    };
    let wv = Var::param(w0.clone());
    let analytic = grad(&penalty(&wv), &[&wv], false).remove(0);
    let numeric = numeric_grad(&w0, &|t| penalty(&Var::constant(t.clone())).item(), 1e-5);
    assert_close(analytic.value().data(), &numeric, 1e-5);
}

#[test]
fn unrelated_inputs_get_zero_gradient_and_constants_stay_out_of_graph() {
    let a: Var<f64> = Var::param(Tensor::from_f64(&[2], &[1.0, 2.0]));
    let b = Var::param(Tensor::from_f64(&[2], &[3.0, 4.0]));
    let y = a.square().sum();
    let g = grad(&y, &[&a, &b], false);
    assert_eq!(g[0].value().data(), &[2.0, 4.0]);
    assert_eq!(g[1].value().data(), &[0.0, 0.0]);
    let c = gradtape::no_grad(|| a.square());
    assert!(!c.requires_grad());
}

#[test]
fn adam_moves_parameters_downhill() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut lin: Linear<f64> = Linear::new(4, 1, 1.0, &mut rng);
    let x = Var::constant(random(&[8, 4], &mut rng));
    let target = Var::constant(random(&[8, 1], &mut rng));
    let loss = |l: &Linear<f64>| l.forward(&x).sub(&target).square().mean();
    let mut opt = Adam::new(&lin, 0.0, 0.99, 1e-8);
    let start = loss(&lin).item();
    for _ in 0..200 {
        let params = lin.parameters();
        let refs: Vec<&Var<f64>> = params.iter().collect();
        let g = grad(&loss(&lin), &refs, false);
        opt.step(&mut lin, &g, 1e-2);
    }
    assert!(loss(&lin).item() < 0.5 * start);
}

#[test]
fn conv_layer_counts_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let conv: Conv2d<f32> = Conv2d::new(3, 8, 3, true, &mut rng);
    assert_eq!(conv.parameter_count(), 8 * 3 * 9 + 8);
    let names: Vec<String> = conv.named_parameters().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["weight", "bias"]);
}
