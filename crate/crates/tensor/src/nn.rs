//! Parameterized layers and the parameter-visiting protocol.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Scalar, Tensor, Var};

/// Anything that owns named parameters.
///
/// Visitation order is fixed by the implementation and is what optimizers
/// and checkpoints rely on.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>));

    fn parameters(&self) -> Vec<Var<T>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, v| out.push(v.clone()));
        out
    }

    fn named_parameters(&self) -> Vec<(String, Var<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, v| out.push((n.to_string(), v.clone())));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.value().numel());
        n
    }

    /// Marks every parameter trainable or frozen, keeping values.
    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut("", &mut |_, v| {
            *v = if trainable {
                Var::param(v.value().clone())
            } else {
                Var::constant(v.value().clone())
            }
        });
    }
}

/// Joins a visitor prefix and a child name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal samples scaled by `gain / sqrt(fan_in)`.
pub fn fan_in_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = gain / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Square-kernel convolution with optional bias.
pub struct Conv2d<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, bias: bool, rng: &mut R) -> Self {
        let weight = Var::param(fan_in_normal(&[cout, cin, k, k], cin * k * k, 2f64.sqrt(), rng));
        let bias = bias.then(|| Var::param(Tensor::zeros(&[cout])));
        Self { weight, bias }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let y = x.conv2d(&self.weight, self.kernel() / 2);
        match &self.bias {
            Some(b) => y.add(&b.reshape(&[1, self.out_channels(), 1, 1])),
            None => y,
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// `y = x Wᵀ + b` on `[N, in]` inputs; the weight is stored `[out, in]`.
pub struct Linear<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fin: usize, fout: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Var::param(fan_in_normal(&[fout, fin], fin, gain, rng)),
            bias: Var::param(Tensor::zeros(&[fout])),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.matmul_t(&self.weight, false, true)
            .add(&self.bias.reshape(&[1, self.out_features()]))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel instance normalization over the spatial axes of NCHW.
pub fn instance_norm<T: Scalar>(x: &Var<T>, eps: T) -> Var<T> {
    let s = x.shape();
    let stats = [s[0], s[1], 1, 1];
    let centered = x.sub(&x.mean_to(&stats));
    let var = centered.square().mean_to(&stats);
    centered.div(&var.add_scalar(eps).sqrt())
}
