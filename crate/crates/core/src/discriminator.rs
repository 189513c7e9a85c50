//! Single-head residual critic.

use gradtape::nn::{join, Conv2d, Linear, Module};
use gradtape::{Scalar, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::generator::layers::{lrelu, ResBlkDown};
use crate::generator::ModelConfig;

/// Side length of the last feature map before the score head.
pub const FINAL_SIZE: usize = 4;

pub struct Discriminator<T: Scalar> {
    resolution: usize,
    pub from_rgb: Conv2d<T>,
    pub blocks: Vec<ResBlkDown<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> Discriminator<T> {
    /// Widths mirror the generator encoder of `config`.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let r = config.resolution;
        if r < FINAL_SIZE || r % FINAL_SIZE != 0 || !(r / FINAL_SIZE).is_power_of_two() {
            return Err(Error::ConfigMismatch(format!(
                "critic needs a resolution of {FINAL_SIZE}·2^k, got {r}"
            )));
        }
        let n = (r / FINAL_SIZE).trailing_zeros() as usize;
        let ch = |k| config.channels(k);
        Ok(Self {
            resolution: r,
            from_rgb: Conv2d::new(3, ch(0), 3, true, rng),
            blocks: (0..n).map(|k| ResBlkDown::new(ch(k), ch(k + 1), false, rng)).collect(),
            head: Linear::new(ch(n), 1, 1.0, rng),
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Number of halvings between the input and the score head.
    pub fn downsample_count(&self) -> usize {
        self.blocks.len()
    }

    /// One unbounded score per image, shape `[N]`.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!("expected [N, 3, H, W], got {s:?}")));
        }
        if s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::ResolutionMismatch {
                expected: self.resolution,
                got: s[2],
            });
        }
        let mut h = self.from_rgb.forward(x);
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let c = h.shape()[1];
        let pooled = lrelu(&h).sum_to(&[s[0], c, 1, 1]).reshape(&[s[0], c]);
        Ok(self.head.forward(&pooled).reshape(&[s[0]]))
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.from_rgb.visit_mut(&join(prefix, "from_rgb"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradtape::{grad, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn critic() -> Discriminator<f64> {
        let cfg = ModelConfig::preset_at("configB", 16, 4, 8).unwrap();
        Discriminator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn one_score_per_image_and_duplicates_agree() {
        let d = critic();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one: Vec<f64> = (0..3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut data = one.clone();
        data.extend(&one);
        let x = Var::constant(Tensor::from_vec(&[2, 3, 16, 16], data));
        let s = d.forward(&x).unwrap();
        assert_eq!(s.shape(), [2]);
        let v = s.value().data();
        assert_eq!(v[0], v[1]);
        assert!(v[0].is_finite());
    }

    #[test]
    fn receptive_field_reaches_four_by_four() {
        let d = critic();
        assert_eq!(16 >> d.downsample_count(), FINAL_SIZE);
    }

    #[test]
    fn input_gradient_is_finite() {
        let d = critic();
        let x = Var::param(Tensor::full(&[2, 3, 16, 16], 0.3));
        let g = grad(&d.forward(&x).unwrap().mean(), &[&x], false);
        assert!(g[0].value().all_finite());
        assert!(g[0].value().max_abs() > 0.0);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let d = critic();
        let x = Var::constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(matches!(d.forward(&x), Err(Error::ResolutionMismatch { .. })));
    }
}
