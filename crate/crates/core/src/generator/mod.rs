//! Identity-conditioned U-Net and its configuration presets.

mod config;
pub mod layers;

use std::collections::BTreeMap;

use gradtape::nn::{join, Conv2d, Module};
use gradtape::{no_grad, Scalar, Var};
use rand::Rng;

pub use config::{FusionKind, ModelConfig, PRESETS};
pub use layers::{adain, affa_blend, AdaIn, AdainResBlk, Affa, AffineNorm, Fusion, Mapping, ResBlkDown};

use crate::backbone::{IdentityEmbedding, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::face::AlignedFace;
use layers::lrelu;

/// Generated batch plus the AFFA masks, keyed by resolution.
pub struct GeneratorOutput<T: Scalar> {
    pub image: Var<T>,
    pub masks: BTreeMap<usize, Var<T>>,
}

pub struct Generator<T: Scalar> {
    config: ModelConfig,
    pub mapping: Option<Mapping<T>>,
    pub stem: Conv2d<T>,
    pub encoder: Vec<ResBlkDown<T>>,
    pub bottleneck: Vec<AdainResBlk<T>>,
    /// Upsampling blocks, deepest first.
    pub decoder: Vec<AdainResBlk<T>>,
    /// Fusion per level, index 0 at the working resolution.
    pub fusion: Vec<Fusion<T>>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.depth();
        let ch = |k| config.channels(k);
        let mapping = config.use_mapping.then(|| Mapping::new(EMBEDDING_DIM, rng));
        let stem = Conv2d::new(3, ch(0), 3, true, rng);
        let encoder = (0..d).map(|k| ResBlkDown::new(ch(k), ch(k + 1), true, rng)).collect();
        let bottleneck = (0..2)
            .map(|_| AdainResBlk::new(ch(d), ch(d), EMBEDDING_DIM, false, rng))
            .collect();
        let decoder = (0..d)
            .rev()
            .map(|k| AdainResBlk::new(ch(k + 1), ch(k), EMBEDDING_DIM, true, rng))
            .collect();
        let fusion = (0..=d)
            .map(|k| match config.fusion_at(config.resolution >> k) {
                FusionKind::Affa => Fusion::Affa(Affa::new(ch(k), rng)),
                FusionKind::Concat => Fusion::Concat(Conv2d::new(2 * ch(k), ch(k), 3, true, rng)),
                FusionKind::Add => Fusion::Add,
                FusionKind::None => Fusion::None,
            })
            .collect();
        let head = Conv2d::new(ch(0), 3, 3, true, rng);
        Ok(Self {
            config: config.clone(),
            mapping,
            stem,
            encoder,
            bottleneck,
            decoder,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `w = M(z)`, or `z` itself when the variant has no mapping network.
    pub fn map_identity(&self, z: &Var<T>) -> Var<T> {
        match &self.mapping {
            Some(m) => m.forward(z),
            None => z.clone(),
        }
    }

    /// `x` is `[N, 3, R, R]` in `[-1, 1]`, `z_id` is `[N, 512]`. Embeddings
    /// are L2-normalized before mapping.
    pub fn forward(&self, x: &Var<T>, z_id: &Var<T>) -> Result<GeneratorOutput<T>> {
        let r = self.config.resolution;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!("expected [N, 3, {r}, {r}], got {s:?}")));
        }
        if s[2] != r || s[3] != r {
            return Err(Error::ResolutionMismatch { expected: r, got: s[2] });
        }
        let zs = z_id.shape();
        if zs != [s[0], EMBEDDING_DIM] {
            return Err(Error::ShapeMismatch(format!("identity batch {zs:?} for {} images", s[0])));
        }
        let norm = z_id
            .square()
            .sum_to(&[s[0], 1])
            .add_scalar(T::lit(1e-12))
            .sqrt()
            .broadcast_to(&[s[0], EMBEDDING_DIM]);
        let w = self.map_identity(&z_id.div(&norm));

        let mut skips = Vec::with_capacity(self.encoder.len() + 1);
        let mut h = self.stem.forward(x);
        skips.push(h.clone());
        for blk in &self.encoder {
            h = blk.forward(&h);
            skips.push(h.clone());
        }
        for blk in &self.bottleneck {
            h = blk.forward(&h, &w);
        }
        let mut masks = BTreeMap::new();
        let d = self.encoder.len();
        let (fused, m) = self.fusion[d].forward(&h, &skips[d])?;
        h = fused;
        if let Some(m) = m {
            masks.insert(r >> d, m);
        }
        for (i, blk) in self.decoder.iter().enumerate() {
            let k = d - 1 - i;
            h = blk.forward(&h, &w);
            let (fused, m) = self.fusion[k].forward(&h, &skips[k])?;
            h = fused;
            if let Some(m) = m {
                masks.insert(r >> k, m);
            }
        }
        let image = self.head.forward(&lrelu(&h)).tanh();
        Ok(GeneratorOutput { image, masks })
    }

    /// Swaps a single face without recording gradients.
    pub fn generate(&self, target: &AlignedFace<T>, z_id: &IdentityEmbedding<T>) -> Result<AlignedFace<T>> {
        let x = Var::constant(AlignedFace::batch(&[target])?);
        let z = Var::constant(z_id.to_tensor());
        let out = no_grad(|| self.forward(&x, &z))?;
        let r = target.resolution();
        AlignedFace::new(out.image.value().reshape(&[3, r, r]), target.source_id())
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        if let Some(m) = &self.mapping {
            m.visit(&join(prefix, "mapping"), f);
        }
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            b.visit(&join(prefix, &format!("bottleneck{i}")), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("dec{i}")), f);
        }
        for (k, fu) in self.fusion.iter().enumerate() {
            fu.visit(&join(prefix, &format!("fuse{}", self.config.resolution >> k)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        let r = self.config.resolution;
        if let Some(m) = &mut self.mapping {
            m.visit_mut(&join(prefix, "mapping"), f);
        }
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("bottleneck{i}")), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("dec{i}")), f);
        }
        for (k, fu) in self.fusion.iter_mut().enumerate() {
            fu.visit_mut(&join(prefix, &format!("fuse{}", r >> k)), f);
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

    fn tiny(name: &str) -> ModelConfig {
        ModelConfig::preset_at(name, 16, 4, 8).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_matches_input_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in PRESETS {
            let g = Generator::<f64>::new(&tiny(name), &mut rng).unwrap();
            let x = Var::constant(random(&[2, 3, 16, 16], &mut rng));
            let z = Var::constant(random(&[2, 512], &mut rng));
            let out = g.forward(&x, &z).unwrap();
            assert_eq!(out.image.shape(), [2, 3, 16, 16]);
            assert!(out.image.value().data().iter().all(|v| v.abs() <= 1.0));
            let want: Vec<usize> = g.config().fusion_plan.iter().filter(|(_, k)| **k == FusionKind::Affa).map(|(r, _)| *r).collect();
            assert_eq!(out.masks.keys().copied().collect::<Vec<_>>(), want);
            for m in out.masks.values() {
                assert!(m.value().data().iter().all(|v| *v > 0.0 && *v < 1.0));
            }
        }
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::<f32>::new(&tiny("configB"), &mut rng).unwrap();
        let x = Var::constant(Tensor::zeros(&[1, 3, 32, 32]));
        let z = Var::constant(Tensor::ones(&[1, 512]));
        assert!(matches!(g.forward(&x, &z), Err(Error::ResolutionMismatch { .. })));
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Generator::<f64>::new(&tiny("configD"), &mut rng).unwrap();
        let x = Var::constant(random(&[2, 3, 16, 16], &mut rng));
        let z = Var::constant(random(&[2, 512], &mut rng));
        let loss = g.forward(&x, &z).unwrap().image.square().mean();
        let params = g.parameters();
        let refs: Vec<&Var<f64>> = params.iter().collect();
        let grads = grad(&loss, &refs, false);
        assert_eq!(grads.len(), params.len());
        assert!(grads.iter().all(|g| g.value().all_finite()));
    }

    #[test]
    fn parameter_counts_follow_the_variants() {
        let count = |name| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            Generator::<f32>::new(&ModelConfig::desk(name).unwrap(), &mut rng).unwrap().parameter_count()
        };
        let (c, d, e) = (count("configC"), count("configD"), count("configE"));
        assert!(d > c);
        assert!(e < d);
        assert_eq!(count("configA"), count("configB"));
    }

    #[test]
    fn mapping_is_skipped_without_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Generator::<f64>::new(&tiny("configE"), &mut rng).unwrap();
        let z = Var::constant(random(&[1, 512], &mut rng));
        assert_eq!(g.map_identity(&z).value(), z.value());
    }

    #[test]
    fn inference_is_deterministic() {
        let mk = || Generator::<f32>::new(&tiny("configC"), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let face = AlignedFace::new(Tensor::full(&[3, 16, 16], 0.25), "a").unwrap();
        let z = IdentityEmbedding::new((0..512).map(|i| (i as f32).sin()).collect()).unwrap();
        let a = mk().generate(&face, &z).unwrap();
        let b = mk().generate(&face, &z).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }
}
