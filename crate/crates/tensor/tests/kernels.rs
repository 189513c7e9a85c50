use gradtape::kernels::{conv2d, matmul};
use gradtape::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;

/// Direct seven-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let mut out = vec![0.0; n * o * h * wd];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for di in 0..k {
                            for dj in 0..k {
                                let (y, xx) = (i as isize + di as isize - pad as isize, j as isize + dj as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + y as usize) * wd + xx as usize];
                                s += xv * w.data()[((oc * c + ic) * k + di) * k + dj];
                            }
                        }
                    }
                    out[((b * o + oc) * h + i) * wd + j] = s;
                }
            }
        }
    }
    out
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6, 1usize..4, prop_oneof![Just(1usize), Just(3)])
}

proptest! {
    #[test]
    fn conv_matches_direct_loops(
        (n, c, h, w, o, k) in dims(),
        seed in vec(-1.0..1.0f64, 400),
    ) {
        let xs = n * c * h * w;
        let ws = o * c * k * k;
        let x = Tensor::from_vec(&[n, c, h, w], seed[..xs].to_vec());
        let wt = Tensor::from_vec(&[o, c, k, k], seed[xs..xs + ws].to_vec());
        let got = conv2d(&x, &wt, k / 2);
        for (a, b) in got.data().iter().zip(naive_conv(&x, &wt, k / 2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_matmul_flags_agree(
        (r, m, q) in (1usize..6, 1usize..6, 1usize..6),
        seed in vec(-1.0..1.0f64, 72),
    ) {
        let a = Tensor::from_vec(&[r, m], seed[..r * m].to_vec());
        let b = Tensor::from_vec(&[m, q], seed[36..36 + m * q].to_vec());
        let transpose = |t: &Tensor<f64>| {
            let (p, s) = (t.shape()[0], t.shape()[1]);
            Tensor::from_vec(&[s, p], (0..p * s).map(|i| t.data()[(i % p) * s + i / p]).collect())
        };
        let plain = matmul(&a, &b, false, false);
        let flagged = matmul(&transpose(&a), &transpose(&b), true, true);
        for (x, y) in plain.data().iter().zip(flagged.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for i in 0..r {
            for j in 0..q {
                let want: f64 = (0..m).map(|l| a.data()[i * m + l] * b.data()[l * q + j]).sum();
                prop_assert!((plain.data()[i * q + j] - want).abs() < 1e-12);
            }
        }
    }
}
