//! Differentiable operations on [`Var`].
//!
//! Every backward rule is expressed with other `Var` operations, so the
//! graph supports gradients of gradients (needed by the gradient penalty).

use std::rc::Rc;

use crate::kernels;
use crate::var::Backward;
use crate::{Scalar, Tensor, Var};

fn sum_to_shape<T: Scalar>(g: Var<T>, shape: &[usize]) -> Var<T> {
    if g.shape() == shape {
        g
    } else {
        g.sum_to(shape)
    }
}

struct AddRule;
impl<T: Scalar> Backward<T> for AddRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            needs[0].then(|| sum_to_shape(g.clone(), x[0].shape())),
            needs[1].then(|| sum_to_shape(g.clone(), x[1].shape())),
        ]
    }
}

struct SubRule;
impl<T: Scalar> Backward<T> for SubRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            needs[0].then(|| sum_to_shape(g.clone(), x[0].shape())),
            needs[1].then(|| sum_to_shape(g.neg(), x[1].shape())),
        ]
    }
}

struct MulRule;
impl<T: Scalar> Backward<T> for MulRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            needs[0].then(|| sum_to_shape(g.mul(&x[1]), x[0].shape())),
            needs[1].then(|| sum_to_shape(g.mul(&x[0]), x[1].shape())),
        ]
    }
}

struct DivRule;
impl<T: Scalar> Backward<T> for DivRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], out: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            needs[0].then(|| sum_to_shape(g.div(&x[1]), x[0].shape())),
            needs[1].then(|| sum_to_shape(g.mul(out).div(&x[1]).neg(), x[1].shape())),
        ]
    }
}

struct ScaleRule<T>(T);
impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.scale(self.0))]
    }
}

struct PassRule;
impl<T: Scalar> Backward<T> for PassRule {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.clone())]
    }
}

/// Gradient is the upstream gradient times a fixed elementwise mask.
struct MaskRule<T>(Tensor<T>);
impl<T: Scalar> Backward<T> for MaskRule<T> {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(&Var::constant(self.0.clone())))]
    }
}

struct TanhRule;
impl<T: Scalar> Backward<T> for TanhRule {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], y: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        let slope = y.mul(y).neg().add_scalar(T::one());
        vec![Some(g.mul(&slope))]
    }
}

struct SigmoidRule;
impl<T: Scalar> Backward<T> for SigmoidRule {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], y: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        let slope = y.mul(&y.neg().add_scalar(T::one()));
        vec![Some(g.mul(&slope))]
    }
}

struct SqrtRule;
impl<T: Scalar> Backward<T> for SqrtRule {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], y: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(&y.safe_recip()).scale(T::lit(0.5)))]
    }
}

struct RecipRule;
impl<T: Scalar> Backward<T> for RecipRule {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], y: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(&y.mul(y)).neg())]
    }
}

struct ExpRule;
impl<T: Scalar> Backward<T> for ExpRule {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], y: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.mul(y))]
    }
}

struct SumToRule;
impl<T: Scalar> Backward<T> for SumToRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.broadcast_to(x[0].shape()))]
    }
}

struct BroadcastRule;
impl<T: Scalar> Backward<T> for BroadcastRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.sum_to(x[0].shape()))]
    }
}

struct ReshapeRule;
impl<T: Scalar> Backward<T> for ReshapeRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.reshape(x[0].shape()))]
    }
}

struct ConcatRule {
    axis: usize,
}
impl<T: Scalar> Backward<T> for ConcatRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let mut start = 0;
        x.iter()
            .zip(needs)
            .map(|(xi, &need)| {
                let len = xi.shape()[self.axis];
                let part = need.then(|| g.narrow(self.axis, start, len));
                start += len;
                part
            })
            .collect()
    }
}

struct NarrowRule {
    axis: usize,
    start: usize,
}
impl<T: Scalar> Backward<T> for NarrowRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.pad_axis(self.axis, self.start, x[0].shape()[self.axis]))]
    }
}

struct PadRule {
    axis: usize,
    start: usize,
}
impl<T: Scalar> Backward<T> for PadRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.narrow(self.axis, self.start, x[0].shape()[self.axis]))]
    }
}

struct MatMulRule {
    ta: bool,
    tb: bool,
}
impl<T: Scalar> Backward<T> for MatMulRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let (a, b) = (&x[0], &x[1]);
        let (ta, tb) = (self.ta, self.tb);
        let da = needs[0].then(|| if ta { b.matmul_t(g, tb, true) } else { g.matmul_t(b, false, !tb) });
        let db = needs[1].then(|| if tb { g.matmul_t(a, true, ta) } else { a.matmul_t(g, !ta, false) });
        vec![da, db]
    }
}

struct ConvRule {
    pad: usize,
}
impl<T: Scalar> Backward<T> for ConvRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let k = x[1].shape()[2];
        vec![
            needs[0].then(|| conv_input_grad(g, &x[1], self.pad)),
            needs[1].then(|| conv_weight_grad(&x[0], g, k, self.pad)),
        ]
    }
}

/// Inputs `[gy, w]`, output shaped like the convolution input.
struct ConvInputGradRule {
    pad: usize,
}
impl<T: Scalar> Backward<T> for ConvInputGradRule {
    fn backward(&self, gz: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let (gy, w) = (&x[0], &x[1]);
        let k = w.shape()[2];
        vec![
            needs[0].then(|| gz.conv2d(w, self.pad)),
            needs[1].then(|| conv_weight_grad(gz, gy, k, self.pad)),
        ]
    }
}

/// Inputs `[x, gy]`, output shaped like the convolution weight.
struct ConvWeightGradRule {
    pad: usize,
}
impl<T: Scalar> Backward<T> for ConvWeightGradRule {
    fn backward(&self, gz: &Var<T>, x: &[Var<T>], _: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>> {
        let (xin, gy) = (&x[0], &x[1]);
        vec![
            needs[0].then(|| conv_input_grad(gy, gz, self.pad)),
            needs[1].then(|| xin.conv2d(gz, self.pad)),
        ]
    }
}

fn conv_input_grad<T: Scalar>(gy: &Var<T>, w: &Var<T>, pad: usize) -> Var<T> {
    let value = kernels::conv2d_input_grad(gy.value(), w.value(), pad);
    Var::from_op(value, vec![gy.clone(), w.clone()], ConvInputGradRule { pad })
}

fn conv_weight_grad<T: Scalar>(x: &Var<T>, gy: &Var<T>, k: usize, pad: usize) -> Var<T> {
    let value = kernels::conv2d_weight_grad(x.value(), gy.value(), k, pad);
    Var::from_op(value, vec![x.clone(), gy.clone()], ConvWeightGradRule { pad })
}

/// Separable plane map `Ry X Rxᵀ`; its adjoint swaps in the transposes.
#[derive(Clone)]
pub struct PlaneMap<T> {
    ry: Tensor<T>,
    rx: Tensor<T>,
    ry_t: Tensor<T>,
    rx_t: Tensor<T>,
}

impl<T: Scalar> PlaneMap<T> {
    pub fn new(ry: Tensor<T>, rx: Tensor<T>) -> Self {
        let ry_t = kernels::transpose2d(&ry);
        let rx_t = kernels::transpose2d(&rx);
        Self { ry, rx, ry_t, rx_t }
    }

    pub fn adjoint(&self) -> Self {
        Self {
            ry: self.ry_t.clone(),
            rx: self.rx_t.clone(),
            ry_t: self.ry.clone(),
            rx_t: self.rx.clone(),
        }
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.ry.shape()[0], self.rx.shape()[0])
    }
}

struct ResampleRule<T>(Rc<PlaneMap<T>>);
impl<T: Scalar> Backward<T> for ResampleRule<T> {
    fn backward(&self, g: &Var<T>, _: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.resample(&self.0.adjoint()))]
    }
}

struct GatherRule {
    index: Rc<Vec<usize>>,
}
impl<T: Scalar> Backward<T> for GatherRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.scatter_add(&self.index, x[0].shape()))]
    }
}

struct ScatterRule {
    index: Rc<Vec<usize>>,
}
impl<T: Scalar> Backward<T> for ScatterRule {
    fn backward(&self, g: &Var<T>, x: &[Var<T>], _: &Var<T>, _: &[bool]) -> Vec<Option<Var<T>>> {
        vec![Some(g.gather(&self.index, x[0].shape()))]
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let v = kernels::broadcast_binary(self.value(), other.value(), |a, b| a + b);
        Var::from_op(v, vec![self.clone(), other.clone()], AddRule)
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let v = kernels::broadcast_binary(self.value(), other.value(), |a, b| a - b);
        Var::from_op(v, vec![self.clone(), other.clone()], SubRule)
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let v = kernels::broadcast_binary(self.value(), other.value(), |a, b| a * b);
        Var::from_op(v, vec![self.clone(), other.clone()], MulRule)
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let v = kernels::broadcast_binary(self.value(), other.value(), |a, b| a / b);
        Var::from_op(v, vec![self.clone(), other.clone()], DivRule)
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|x| x * c), vec![self.clone()], ScaleRule(c))
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|x| x + c), vec![self.clone()], PassRule)
    }

    pub fn square(&self) -> Var<T> {
        self.mul(self)
    }

    pub fn tanh(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.tanh()), vec![self.clone()], TanhRule)
    }

    pub fn sigmoid(&self) -> Var<T> {
        let v = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        Var::from_op(v, vec![self.clone()], SigmoidRule)
    }

    pub fn exp(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.exp()), vec![self.clone()], ExpRule)
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let x = self.value();
        let v = x.map(|a| if a > T::zero() { a } else { a * slope });
        let mask = x.map(|a| if a > T::zero() { T::one() } else { slope });
        Var::from_op(v, vec![self.clone()], MaskRule(mask))
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn abs(&self) -> Var<T> {
        let x = self.value();
        let mask = x.map(|a| {
            if a > T::zero() {
                T::one()
            } else if a < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        Var::from_op(x.map(|a| a.abs()), vec![self.clone()], MaskRule(mask))
    }

    /// Square root; the derivative is taken as 0 where the value is 0.
    pub fn sqrt(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.sqrt()), vec![self.clone()], SqrtRule)
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn safe_recip(&self) -> Var<T> {
        let v = self
            .value()
            .map(|x| if x == T::zero() { T::zero() } else { T::one() / x });
        Var::from_op(v, vec![self.clone()], RecipRule)
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum(&self) -> Var<T> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sums down to `shape`; the inverse of broadcasting.
    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        let v = kernels::sum_to(self.value(), shape);
        Var::from_op(v, vec![self.clone()], SumToRule)
    }

    /// Mean over the axes collapsed when reducing to `shape`.
    pub fn mean_to(&self, shape: &[usize]) -> Var<T> {
        let ratio = self.value().numel() as f64 / shape.iter().product::<usize>() as f64;
        self.sum_to(shape).scale(T::lit(1.0 / ratio))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        let v = kernels::broadcast_to(self.value(), shape);
        Var::from_op(v, vec![self.clone()], BroadcastRule)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        Var::from_op(self.value().reshape(shape), vec![self.clone()], ReshapeRule)
    }

    /// Reshapes `[N, ...]` to `[N, rest]`.
    pub fn flatten(&self) -> Var<T> {
        let n = self.shape()[0];
        let rest = self.value().numel() / n.max(1);
        self.reshape(&[n, rest])
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = kernels::concat(&values, axis);
        Var::from_op(v, parts.to_vec(), ConcatRule { axis })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let v = kernels::narrow(self.value(), axis, start, len);
        Var::from_op(v, vec![self.clone()], NarrowRule { axis, start })
    }

    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var<T> {
        let v = kernels::pad_axis(self.value(), axis, start, total);
        Var::from_op(v, vec![self.clone()], PadRule { axis, start })
    }

    /// `op(self) @ op(other)` for 2-D values, `op` transposing when flagged.
    pub fn matmul_t(&self, other: &Var<T>, ta: bool, tb: bool) -> Var<T> {
        let v = kernels::matmul(self.value(), other.value(), ta, tb);
        Var::from_op(v, vec![self.clone(), other.clone()], MatMulRule { ta, tb })
    }

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        self.matmul_t(other, false, false)
    }

    /// Stride-1 convolution with size-preserving zero padding.
    pub fn conv2d(&self, weight: &Var<T>, pad: usize) -> Var<T> {
        let v = kernels::conv2d(self.value(), weight.value(), pad);
        Var::from_op(v, vec![self.clone(), weight.clone()], ConvRule { pad })
    }

    pub fn resample(&self, map: &PlaneMap<T>) -> Var<T> {
        let v = kernels::resample(self.value(), &map.ry, &map.rx);
        Var::from_op(v, vec![self.clone()], ResampleRule(Rc::new(map.clone())))
    }

    /// Bilinear resize of the two trailing axes (half-pixel centers).
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Var<T> {
        let (hi, wi) = (self.shape()[2], self.shape()[3]);
        if (hi, wi) == (h, w) {
            return self.clone();
        }
        self.resample(&PlaneMap::new(kernels::bilinear_matrix(hi, h), kernels::bilinear_matrix(wi, w)))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&self) -> Var<T> {
        let (h, w) = (self.shape()[2], self.shape()[3]);
        self.resample(&PlaneMap::new(kernels::avg_pool_matrix(h), kernels::avg_pool_matrix(w)))
    }

    /// Keeps every `stride`-th row and column.
    pub fn decimate(&self, stride: usize) -> Var<T> {
        if stride == 1 {
            return self.clone();
        }
        let (h, w) = (self.shape()[2], self.shape()[3]);
        self.resample(&PlaneMap::new(
            kernels::decimation_matrix(h, stride),
            kernels::decimation_matrix(w, stride),
        ))
    }

    /// `out[j] = self[index[j]]`, reshaped to `shape`.
    pub fn gather(&self, index: &Rc<Vec<usize>>, shape: &[usize]) -> Var<T> {
        let x = self.value().data();
        let v = Tensor::from_vec(shape, index.iter().map(|&i| x[i]).collect());
        Var::from_op(v, vec![self.clone()], GatherRule { index: Rc::clone(index) })
    }

    /// Adjoint of [`Var::gather`]: adds `self[j]` into `out[index[j]]`.
    pub fn scatter_add(&self, index: &Rc<Vec<usize>>, shape: &[usize]) -> Var<T> {
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&i, &g) in index.iter().zip(self.value().data()) {
            out[i] += g;
        }
        let v = Tensor::from_vec(shape, out);
        Var::from_op(v, vec![self.clone()], ScatterRule { index: Rc::clone(index) })
    }

    /// Max pooling with a square window and stride, no padding.
    pub fn max_pool(&self, window: usize, stride: usize) -> Var<T> {
        let s = self.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = self.value().data();
        let mut index = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + i * stride * w + j * stride;
                    for u in 0..window {
                        for v in 0..window {
                            let at = base + (i * stride + u) * w + j * stride + v;
                            if x[at] > x[best] {
                                best = at;
                            }
                        }
                    }
                    index.push(best);
                }
            }
        }
        self.gather(&Rc::new(index), &[n, c, ho, wo])
    }
}
