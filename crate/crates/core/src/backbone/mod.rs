//! Frozen identity encoders and perceptual feature extractors.

mod iresnet;
mod perceptual;
mod stub;

use std::path::Path;

use gradtape::{no_grad, Scalar, Tensor, Var};

pub use iresnet::{random_archive as random_iresnet_archive, IResNet};
pub use perceptual::{perceptual_from_spec, IdentityTaps, PerceptualNet, StubPerceptual, Vgg16};
pub use stub::StubBackbone;

use crate::error::{Error, Result};
use crate::face::AlignedFace;
use crate::pipeline::Template;

pub const EMBEDDING_DIM: usize = 512;

/// Embedding plus every residual-block output, in block order.
pub struct BackboneOutput<T: Scalar> {
    pub embedding: Var<T>,
    pub blocks: Vec<Var<T>>,
}

/// A face recognizer seen as a fixed function. Parameters are never trainable.
pub trait IdentityBackbone<T: Scalar> {
    fn id(&self) -> String;
    fn input_resolution(&self) -> usize;
    fn block_count(&self) -> usize;
    /// Expects `[N, 3, r, r]` in `[-1, 1]` at the input resolution.
    fn forward(&self, x: &Var<T>) -> BackboneOutput<T>;
    fn checksum(&self) -> String;
    fn template(&self) -> Template {
        Template::arcface()
    }
}

/// A 512-d identity vector.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding<T: Scalar> {
    vector: Vec<T>,
}

impl<T: Scalar> IdentityEmbedding<T> {
    pub fn new(vector: Vec<T>) -> Result<Self> {
        if vector.len() != EMBEDDING_DIM {
            return Err(Error::ShapeMismatch(format!(
                "embedding has {} values, expected {EMBEDDING_DIM}",
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFace("embedding is not finite".into()));
        }
        Ok(Self { vector })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.vector
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, EMBEDDING_DIM], self.vector.clone())
    }
}

/// Block outputs `first..=last` of one image, 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar> {
    pub first: usize,
    pub blocks: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Block by its 1-based backbone index.
    pub fn block(&self, index: usize) -> Option<&Tensor<T>> {
        index.checked_sub(self.first).and_then(|i| self.blocks.get(i))
    }
}

/// `1 − cos(a, b)` over flattened values, computed in f64 and clamped to `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((1.0 - ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 2.0))
}

/// A backbone plus the policy for off-size inputs.
pub struct BackboneAdapter<T: Scalar> {
    inner: Box<dyn IdentityBackbone<T>>,
    pub allow_resample: bool,
}

impl<T: Scalar> BackboneAdapter<T> {
    pub fn new(inner: Box<dyn IdentityBackbone<T>>) -> Self {
        Self {
            inner,
            allow_resample: true,
        }
    }

    /// `"stub"`, `"stub:SEED"`, or a path to an IResNet archive.
    pub fn from_spec(spec: &str) -> Result<Self> {
        if spec == "stub" {
            return Ok(Self::new(Box::new(StubBackbone::new(StubBackbone::<T>::DEFAULT_SEED))));
        }
        if let Some(seed) = spec.strip_prefix("stub:") {
            let seed = seed
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad stub seed in `{spec}`")))?;
            return Ok(Self::new(Box::new(StubBackbone::new(seed))));
        }
        Ok(Self::new(Box::new(IResNet::load(Path::new(spec))?)))
    }

    pub fn id(&self) -> String {
        self.inner.id()
    }

    pub fn input_resolution(&self) -> usize {
        self.inner.input_resolution()
    }

    pub fn block_count(&self) -> usize {
        self.inner.block_count()
    }

    pub fn checksum(&self) -> String {
        self.inner.checksum()
    }

    pub fn template(&self) -> Template {
        self.inner.template()
    }

    /// Always true: adapters hold their weights as constants.
    pub fn frozen(&self) -> bool {
        true
    }

    fn prepare(&self, x: &Var<T>) -> Result<Var<T>> {
        let r = self.input_resolution();
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!("expected [N, 3, H, W], got {s:?}")));
        }
        if s[2] == r && s[3] == r {
            return Ok(x.clone());
        }
        if !self.allow_resample {
            return Err(Error::ResolutionMismatch {
                expected: r,
                got: s[2],
            });
        }
        Ok(x.resize_bilinear(r, r))
    }

    /// Differentiable with respect to `x`; the weights stay fixed.
    pub fn forward(&self, x: &Var<T>) -> Result<BackboneOutput<T>> {
        Ok(self.inner.forward(&self.prepare(x)?))
    }

    pub fn embed_batch(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward(x)?.embedding)
    }

    pub fn embed(&self, face: &AlignedFace<T>) -> Result<IdentityEmbedding<T>> {
        let r = face.resolution();
        let x = Var::constant(face.pixels().reshape(&[1, 3, r, r]));
        let e = no_grad(|| self.embed_batch(&x))?;
        IdentityEmbedding::new(e.value().data().to_vec())
    }

    pub fn check_range(&self, first: usize, last: usize) -> Result<()> {
        if first < 1 || first > last || last > self.block_count() {
            return Err(Error::IndexOutOfRange {
                first,
                last,
                count: self.block_count(),
            });
        }
        Ok(())
    }

    pub fn intermediate_features(&self, face: &AlignedFace<T>, first: usize, last: usize) -> Result<FeaturePyramid<T>> {
        self.check_range(first, last)?;
        let r = face.resolution();
        let x = Var::constant(face.pixels().reshape(&[1, 3, r, r]));
        let out = no_grad(|| self.forward(&x))?;
        Ok(FeaturePyramid {
            first,
            blocks: out.blocks[first - 1..last]
                .iter()
                .map(|b| {
                    let s = b.shape();
                    b.value().reshape(&s[1..])
                })
                .collect(),
        })
    }
}
