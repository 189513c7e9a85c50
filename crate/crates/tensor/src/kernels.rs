//! Forward kernels on raw tensors. No autodiff here; `ops` wraps these.

use crate::{Scalar, Tensor};

/// Row-major `C = op(A) op(B)` for 2-D tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    assert_eq!(a.rank(), 2, "matmul lhs must be 2-D");
    assert_eq!(b.rank(), 2, "matmul rhs must be 2-D");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Unfolds one `[C, H, W]` plane stack into `[C*k*k, H*W]` columns for a
/// stride-1 convolution with zero padding `pad`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i as isize + u as isize - pad as isize;
                    let drow = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[si as usize * w..(si as usize + 1) * w];
                    let shift = v as isize - pad as isize;
                    for (j, d) in drow.iter_mut().enumerate() {
                        let sj = j as isize + shift;
                        *d = if sj < 0 || sj >= w as isize {
                            T::zero()
                        } else {
                            srow[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into planes.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let src = &cols[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = i as isize + u as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let srow = &src[i * w..(i + 1) * w];
                    let drow = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let shift = v as isize - pad as isize;
                    let j0 = (-shift).max(0) as usize;
                    let j1 = ((w as isize) - shift).min(w as isize).max(0) as usize;
                    for j in j0..j1 {
                        drow[(j as isize + shift) as usize] += srow[j];
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> (usize, usize, usize, usize, usize, usize) {
    assert_eq!(x.rank(), 4, "conv input must be NCHW");
    assert_eq!(w.rank(), 4, "conv weight must be OCkk");
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, wc, "conv channel mismatch: input {c}, weight {wc}");
    assert_eq!(k, k2, "square kernels only");
    (n, c, h, wd, o, k)
}

/// Stride-1 cross-correlation, `[N,C,H,W] * [O,C,k,k] -> [N,O,H,W]` with
/// zero padding `pad` on each side (`pad = k / 2` keeps the size).
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (n, c, h, wd, o, k) = conv_dims(x, w);
    assert_eq!(2 * pad + 1, k, "only size-preserving padding is supported");
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); n * o * hw];
    let mut cols = vec![T::zero(); if k == 1 { 0 } else { ckk * hw }];
    for b in 0..n {
        let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
        let src: &[T] = if k == 1 {
            xb
        } else {
            im2col(xb, c, h, wd, k, pad, &mut cols);
            &cols
        };
        unsafe {
            T::gemm(
                o,
                ckk,
                hw,
                T::one(),
                w.data().as_ptr(),
                ckk as isize,
                1,
                src.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                out[b * o * hw..].as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[n, o, h, wd], out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (n, o, h, wd) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (wo, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(o, wo, "conv grad channel mismatch");
    let hw = h * wd;
    let ckk = c * k * k;
    let mut dx = vec![T::zero(); n * c * hw];
    let mut cols = vec![T::zero(); ckk * hw];
    for b in 0..n {
        let gb = &gy.data()[b * o * hw..(b + 1) * o * hw];
        let target: *mut T = if k == 1 {
            dx[b * c * hw..].as_mut_ptr()
        } else {
            cols.as_mut_ptr()
        };
        unsafe {
            T::gemm(
                ckk,
                o,
                hw,
                T::one(),
                w.data().as_ptr(),
                1,
                ckk as isize,
                gb.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                target,
                hw as isize,
                1,
            );
        }
        if k != 1 {
            col2im(&cols, c, h, wd, k, pad, &mut dx[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::from_vec(&[n, c, h, wd], dx)
}

/// Gradient of [`conv2d`] with respect to its weight, summed over the batch.
pub fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, k: usize, pad: usize) -> Tensor<T> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = gy.shape()[1];
    assert_eq!(gy.shape(), &[n, o, h, wd], "conv weight grad shape mismatch");
    let hw = h * wd;
    let ckk = c * k * k;
    let mut dw = vec![T::zero(); o * ckk];
    let mut cols = vec![T::zero(); if k == 1 { 0 } else { ckk * hw }];
    for b in 0..n {
        let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
        let src: &[T] = if k == 1 {
            xb
        } else {
            im2col(xb, c, h, wd, k, pad, &mut cols);
            &cols
        };
        let gb = &gy.data()[b * o * hw..(b + 1) * o * hw];
        unsafe {
            T::gemm(
                o,
                hw,
                ckk,
                T::one(),
                gb.as_ptr(),
                hw as isize,
                1,
                src.as_ptr(),
                1,
                hw as isize,
                T::one(),
                dw.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[o, c, k, k], dw)
}

/// Applies `out = Ry · X · Rxᵀ` to every `[H, W]` plane of an NCHW tensor.
///
/// `ry` is `[H', H]` and `rx` is `[W', W]`. Bilinear resizing, average
/// pooling and their adjoints are all instances of this map.
pub fn resample<T: Scalar>(x: &Tensor<T>, ry: &Tensor<T>, rx: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.rank(), 4, "resample expects NCHW");
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, hi) = (ry.shape()[0], ry.shape()[1]);
    let (wo, wi) = (rx.shape()[0], rx.shape()[1]);
    assert_eq!((hi, wi), (h, w), "resample matrices do not match input planes");
    let planes = n * c;
    let mut tmp = vec![T::zero(); ho * w];
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        unsafe {
            T::gemm(
                ho,
                h,
                w,
                T::one(),
                ry.data().as_ptr(),
                h as isize,
                1,
                src.as_ptr(),
                w as isize,
                1,
                T::zero(),
                tmp.as_mut_ptr(),
                w as isize,
                1,
            );
            T::gemm(
                ho,
                w,
                wo,
                T::one(),
                tmp.as_ptr(),
                w as isize,
                1,
                rx.data().as_ptr(),
                1,
                w as isize,
                T::zero(),
                out[p * ho * wo..].as_mut_ptr(),
                wo as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

pub fn transpose2d<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

/// Interpolation matrix `[out, in]` for 1-D bilinear resizing with
/// half-pixel centers, clamped at the borders.
pub fn bilinear_matrix<T: Scalar>(input: usize, output: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += T::lit(1.0 - frac);
        m[i * input + i1] += T::lit(frac);
    }
    Tensor::from_vec(&[output, input], m)
}

/// `[n/2, n]` matrix averaging adjacent pairs.
pub fn avg_pool_matrix<T: Scalar>(input: usize) -> Tensor<T> {
    assert!(input % 2 == 0, "average pooling needs an even size, got {input}");
    let out = input / 2;
    let mut m = vec![T::zero(); out * input];
    for i in 0..out {
        m[i * input + 2 * i] = T::lit(0.5);
        m[i * input + 2 * i + 1] = T::lit(0.5);
    }
    Tensor::from_vec(&[out, input], m)
}

/// `[ceil(n/s), n]` selection matrix picking every `stride`-th sample.
pub fn decimation_matrix<T: Scalar>(input: usize, stride: usize) -> Tensor<T> {
    let out = input.div_ceil(stride);
    let mut m = vec![T::zero(); out * input];
    for i in 0..out {
        m[i * input + i * stride] = T::one();
    }
    Tensor::from_vec(&[out, input], m)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Numpy-style broadcast shape of two equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// Element strides of `shape` seen through `out` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visits every output index in row-major order with the matching flat
/// offsets into each broadcast operand.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    loop {
        for j in 0..inner {
            f(flat + j, oa + j * ia, ob + j * ib);
        }
        flat += inner;
        if flat >= total {
            break;
        }
        let mut ax = rank - 1;
        loop {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    if b.numel() == 1 && (b.rank() == 0 || b.rank() == a.rank()) {
        let s = b.data()[0];
        return a.map(|x| f(x, s));
    }
    if a.numel() == 1 && (a.rank() == 0 || a.rank() == b.rank()) {
        let s = a.data()[0];
        return b.map(|y| f(s, y));
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::from_vec(&out, data)
}

pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    if x.numel() == 1 {
        return Tensor::full(shape, x.data()[0]);
    }
    let sx = broadcast_strides(x.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut data = vec![T::zero(); shape.iter().product()];
    let xd = x.data();
    for_each_broadcast(shape, &sx, &zero, |o, i, _| data[o] = xd[i]);
    Tensor::from_vec(shape, data)
}

/// Sums `x` down to `shape` (the adjoint of [`broadcast_to`]).
pub fn sum_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    if shape.iter().product::<usize>() == 1 {
        return Tensor::from_vec(shape, vec![x.sum()]);
    }
    assert_eq!(x.rank(), shape.len(), "sum_to rank mismatch");
    let st = broadcast_strides(shape, x.shape());
    let zero = vec![0; shape.len()];
    let mut data = vec![T::zero(); shape.iter().product()];
    let xd = x.data();
    for_each_broadcast(x.shape(), &st, &zero, |o, i, _| data[i] += xd[o]);
    Tensor::from_vec(shape, data)
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    for p in parts {
        for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
            assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
        }
    }
    let (outer, total, inner) = axis_split(&shape, axis);
    let mut data = vec![T::zero(); outer * total * inner];
    let mut offset = 0;
    for p in parts {
        let len = p.shape()[axis];
        for o in 0..outer {
            let src = &p.data()[o * len * inner..(o + 1) * len * inner];
            let dst = (o * total + offset) * inner;
            data[dst..dst + len * inner].copy_from_slice(src);
        }
        offset += len;
    }
    Tensor::from_vec(&shape, data)
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, total, inner) = axis_split(x.shape(), axis);
    assert!(start + len <= total, "narrow out of range");
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = (o * total + start) * inner;
        data.extend_from_slice(&x.data()[src..src + len * inner]);
    }
    Tensor::from_vec(&shape, data)
}

/// Embeds `x` into zeros of length `total` along `axis` at `start`.
pub fn pad_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, total: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = total;
    let mut data = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        data[dst..dst + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let mut out = vec![0.0; n * o * h * wd];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for u in 0..k {
                                for v in 0..k {
                                    let si = i as isize + u as isize - pad as isize;
                                    let sj = j as isize + v as isize - pad as isize;
                                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                                        acc += w.data()[((oc * c + ic) * k + u) * k + v]
                                            * x.data()[((b * c + ic) * h + si as usize) * wd + sj as usize];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, o, h, wd], out)
    }

    fn ramp(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + seed) * 0.7311).sin()).collect())
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = ramp(&[2, 3, 5, 4], 0.3);
        for k in [1, 3] {
            let w = ramp(&[4, 3, k, k], 1.7);
            let fast = conv2d(&x, &w, k / 2);
            let slow = naive_conv(&x, &w, k / 2);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_grads_are_adjoint() {
        // <gy, conv(x, w)> == <conv_input_grad(gy, w), x> == <conv_weight_grad(x, gy), w>
        let x = ramp(&[2, 3, 6, 5], 0.1);
        let w = ramp(&[4, 3, 3, 3], 2.2);
        let gy = ramp(&[2, 4, 6, 5], 4.9);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 { a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum() };
        let lhs = dot(&gy, &conv2d(&x, &w, 1));
        let via_x = dot(&conv2d_input_grad(&gy, &w, 1), &x);
        let via_w = dot(&conv2d_weight_grad(&x, &gy, 3, 1), &w);
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let small = ramp(&[2, 1, 3, 1], 0.5);
        let big = ramp(&[2, 4, 3, 5], 1.5);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 { a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum() };
        let lhs = dot(&broadcast_to(&small, big.shape()), &big);
        let rhs = dot(&small, &sum_to(&big, small.shape()));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        let m: Tensor<f64> = bilinear_matrix(7, 16);
        for row in m.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let same: Tensor<f64> = bilinear_matrix(5, 5);
        for i in 0..5 {
            assert_eq!(same.data()[i * 5 + i], 1.0);
        }
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = ramp(&[2, 3, 2, 2], 0.0);
        let b = ramp(&[2, 5, 2, 2], 9.0);
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 8, 2, 2]);
        assert_eq!(narrow(&c, 1, 0, 3), a);
        assert_eq!(narrow(&c, 1, 3, 5), b);
        assert_eq!(narrow(&pad_axis(&b, 1, 3, 8), 1, 3, 5), b);
    }
}
