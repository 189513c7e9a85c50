//! Building blocks shared by the generator and the critic.

use gradtape::nn::{fan_in_normal, instance_norm, join, Conv2d, Linear, Module};
use gradtape::{Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

pub(crate) const IN_EPS: f64 = 1e-5;
pub(crate) const SLOPE: f64 = 0.2;

pub(crate) fn lrelu<T: Scalar>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(T::lit(SLOPE))
}

fn per_channel<T: Scalar>(v: &Var<T>, n: usize) -> Var<T> {
    let c = v.value().numel() / n;
    v.reshape(&[n, c, 1, 1])
}

/// Instance-normalizes `h` and applies per-sample, per-channel `gamma`
/// and `beta` (each `[N, C]`).
pub fn adain<T: Scalar>(h: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
    let n = h.shape()[0];
    instance_norm(h, T::lit(IN_EPS))
        .mul(&per_channel(gamma, n))
        .add(&per_channel(beta, n))
}

/// `h·m + (1 − m)·z`, elementwise.
pub fn affa_blend<T: Scalar>(h: &Var<T>, z: &Var<T>, m: &Var<T>) -> Var<T> {
    h.mul(m).add(&m.neg().add_scalar(T::one()).mul(z))
}

/// Instance norm with a learned per-channel affine.
pub struct AffineNorm<T: Scalar> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
}

impl<T: Scalar> AffineNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Var::param(Tensor::ones(&[c])),
            beta: Var::param(Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let c = self.gamma.shape()[0];
        instance_norm(x, T::lit(IN_EPS))
            .mul(&self.gamma.reshape(&[1, c, 1, 1]))
            .add(&self.beta.reshape(&[1, c, 1, 1]))
    }
}

impl<T: Scalar> Module<T> for AffineNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Identity-conditioned instance norm. The scale map's bias starts at one.
pub struct AdaIn<T: Scalar> {
    pub gamma: Linear<T>,
    pub beta: Linear<T>,
}

impl<T: Scalar> AdaIn<T> {
    pub fn new<R: Rng + ?Sized>(style_dim: usize, c: usize, rng: &mut R) -> Self {
        let gamma = Linear {
            weight: Var::param(fan_in_normal(&[c, style_dim], style_dim, 1.0, rng)),
            bias: Var::param(Tensor::ones(&[c])),
        };
        Self {
            gamma,
            beta: Linear::new(style_dim, c, 1.0, rng),
        }
    }

    pub fn forward(&self, h: &Var<T>, w: &Var<T>) -> Var<T> {
        adain(h, &self.gamma.forward(w), &self.beta.forward(w))
    }
}

impl<T: Scalar> Module<T> for AdaIn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.gamma.visit(&join(prefix, "gamma"), f);
        self.beta.visit(&join(prefix, "beta"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.gamma.visit_mut(&join(prefix, "gamma"), f);
        self.beta.visit_mut(&join(prefix, "beta"), f);
    }
}

/// Pre-activation residual block that halves resolution:
/// `[norm →] lrelu → conv → pool → [norm →] lrelu → conv`, plus a pooled
/// (and, when widths differ, 1×1-projected) shortcut, scaled by `1/√2`.
pub struct ResBlkDown<T: Scalar> {
    pub norm: Option<(AffineNorm<T>, AffineNorm<T>)>,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
}

impl<T: Scalar> ResBlkDown<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, normalize: bool, rng: &mut R) -> Self {
        Self {
            norm: normalize.then(|| (AffineNorm::new(cin), AffineNorm::new(cin))),
            conv1: Conv2d::new(cin, cin, 3, true, rng),
            conv2: Conv2d::new(cin, cout, 3, true, rng),
            shortcut: (cin != cout).then(|| Conv2d::new(cin, cout, 1, false, rng)),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let mut h = x.clone();
        if let Some((n1, _)) = &self.norm {
            h = n1.forward(&h);
        }
        h = self.conv1.forward(&lrelu(&h)).avg_pool2();
        if let Some((_, n2)) = &self.norm {
            h = n2.forward(&h);
        }
        h = self.conv2.forward(&lrelu(&h));
        // Pooling commutes with the bias-free 1x1 shortcut; pool first.
        let mut s = x.avg_pool2();
        if let Some(sc) = &self.shortcut {
            s = sc.forward(&s);
        }
        h.add(&s).scale(T::lit(std::f64::consts::FRAC_1_SQRT_2))
    }
}

impl<T: Scalar> Module<T> for ResBlkDown<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        if let Some((n1, n2)) = &self.norm {
            n1.visit(&join(prefix, "norm1"), f);
            n2.visit(&join(prefix, "norm2"), f);
        }
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        if let Some((n1, n2)) = &mut self.norm {
            n1.visit_mut(&join(prefix, "norm1"), f);
            n2.visit_mut(&join(prefix, "norm2"), f);
        }
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// Decoder residual block: `AdaIN → lrelu → [upsample →] conv → AdaIN →
/// lrelu → conv`, shortcut upsampled and projected as needed, scaled by `1/√2`.
pub struct AdainResBlk<T: Scalar> {
    pub norm1: AdaIn<T>,
    pub conv1: Conv2d<T>,
    pub norm2: AdaIn<T>,
    pub conv2: Conv2d<T>,
    pub shortcut: Option<Conv2d<T>>,
    pub upsample: bool,
}

impl<T: Scalar> AdainResBlk<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, style_dim: usize, upsample: bool, rng: &mut R) -> Self {
        Self {
            norm1: AdaIn::new(style_dim, cin, rng),
            conv1: Conv2d::new(cin, cout, 3, true, rng),
            norm2: AdaIn::new(style_dim, cout, rng),
            conv2: Conv2d::new(cout, cout, 3, true, rng),
            shortcut: (cin != cout).then(|| Conv2d::new(cin, cout, 1, false, rng)),
            upsample,
        }
    }

    fn up(&self, x: &Var<T>) -> Var<T> {
        if self.upsample {
            let s = x.shape();
            x.resize_bilinear(2 * s[2], 2 * s[3])
        } else {
            x.clone()
        }
    }

    pub fn forward(&self, x: &Var<T>, w: &Var<T>) -> Var<T> {
        let h = self.up(&lrelu(&self.norm1.forward(x, w)));
        let h = self.conv1.forward(&h);
        let h = self.conv2.forward(&lrelu(&self.norm2.forward(&h, w)));
        let mut s = x.clone();
        if let Some(sc) = &self.shortcut {
            s = sc.forward(&s);
        }
        h.add(&self.up(&s)).scale(T::lit(std::f64::consts::FRAC_1_SQRT_2))
    }
}

impl<T: Scalar> Module<T> for AdainResBlk<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// Attention gate: `m = σ(conv(lrelu(conv([h, z]))))`, then `h·m + (1 − m)·z`.
/// The last convolution starts small so masks begin near 0.5.
pub struct Affa<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

impl<T: Scalar> Affa<T> {
    pub fn new<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let conv2 = Conv2d {
            weight: Var::param(fan_in_normal(&[c, c, 3, 3], c * 9, 0.1, rng)),
            bias: Some(Var::param(Tensor::zeros(&[c]))),
        };
        Self {
            conv1: Conv2d::new(2 * c, c, 3, true, rng),
            conv2,
        }
    }

    pub fn mask(&self, h: &Var<T>, z: &Var<T>) -> Var<T> {
        let cat = Var::concat(&[h.clone(), z.clone()], 1);
        self.conv2.forward(&lrelu(&self.conv1.forward(&cat))).sigmoid()
    }
}

impl<T: Scalar> Module<T> for Affa<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// How a decoder feature map absorbs its encoder skip.
pub enum Fusion<T: Scalar> {
    Affa(Affa<T>),
    /// Channel concatenation followed by a 3×3 convolution back to `C`.
    Concat(Conv2d<T>),
    Add,
    None,
}

impl<T: Scalar> Fusion<T> {
    /// Returns the fused map and, for AFFA, the attention mask.
    pub fn forward(&self, h: &Var<T>, z: &Var<T>) -> Result<(Var<T>, Option<Var<T>>)> {
        if h.shape() != z.shape() && !matches!(self, Fusion::None) {
            return Err(Error::ShapeMismatch(format!(
                "decoder map {:?} and skip {:?}",
                h.shape(),
                z.shape()
            )));
        }
        Ok(match self {
            Fusion::Affa(a) => {
                let m = a.mask(h, z);
                (affa_blend(h, z, &m), Some(m))
            }
            Fusion::Concat(conv) => (conv.forward(&Var::concat(&[h.clone(), z.clone()], 1)), None),
            Fusion::Add => (h.add(z), None),
            Fusion::None => (h.clone(), None),
        })
    }
}

impl<T: Scalar> Module<T> for Fusion<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        match self {
            Fusion::Affa(a) => a.visit(&join(prefix, "affa"), f),
            Fusion::Concat(c) => c.visit(&join(prefix, "concat"), f),
            _ => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        match self {
            Fusion::Affa(a) => a.visit_mut(&join(prefix, "affa"), f),
            Fusion::Concat(c) => c.visit_mut(&join(prefix, "concat"), f),
            _ => {}
        }
    }
}

/// Four 512→512 fully connected layers, leaky ReLU after the first three.
pub struct Mapping<T: Scalar> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mapping<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            layers: (0..4).map(|_| Linear::new(dim, dim, 2f64.sqrt(), rng)).collect(),
        }
    }

    pub fn forward(&self, z: &Var<T>) -> Var<T> {
        let mut h = z.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h);
            if i < self.layers.len() - 1 {
                h = lrelu(&h);
            }
        }
        h
    }
}

impl<T: Scalar> Module<T> for Mapping<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{i}")), f);
        }
    }
}
