use std::path::Path;

use gradtape::nn::{fan_in_normal, join, Module};
use gradtape::{Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{module_checksum, Archive};
use crate::error::{Error, Result};

/// Fixed feature extractor with at least five ordered taps.
pub trait PerceptualNet<T: Scalar> {
    fn id(&self) -> String;
    /// `x` is `[N, 3, H, W]` in `[-1, 1]`.
    fn taps(&self, x: &Var<T>) -> Vec<Var<T>>;
    fn checksum(&self) -> String;
}

/// `"stub"`, `"stub:SEED"`, `"identity"`, or a path to VGG16 weights.
pub fn perceptual_from_spec<T: Scalar>(spec: &str) -> Result<Box<dyn PerceptualNet<T>>> {
    Ok(match spec {
        "stub" => Box::new(StubPerceptual::new(StubPerceptual::<T>::DEFAULT_SEED)),
        "identity" => Box::new(IdentityTaps),
        s if s.starts_with("stub:") => {
            let seed = s[5..]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad stub seed in `{s}`")))?;
            Box::new(StubPerceptual::new(seed))
        }
        path => Box::new(Vgg16::load(Path::new(path))?),
    })
}

/// Five copies of the input. With it the perceptual loss reduces to five
/// times the pixel L1.
pub struct IdentityTaps;

impl<T: Scalar> PerceptualNet<T> for IdentityTaps {
    fn id(&self) -> String {
        "identity-taps".into()
    }

    fn taps(&self, x: &Var<T>) -> Vec<Var<T>> {
        vec![x.clone(); 5]
    }

    fn checksum(&self) -> String {
        String::new()
    }
}

/// Seeded five-stage convolutional extractor: conv3x3 → leaky ReLU, with a
/// 2×2 average pool before stages 2 through 5.
pub struct StubPerceptual<T: Scalar> {
    seed: u64,
    convs: Vec<(Var<T>, Var<T>)>,
}

impl<T: Scalar> StubPerceptual<T> {
    pub const DEFAULT_SEED: u64 = 4321;
    const WIDTHS: [usize; 5] = [8, 16, 16, 32, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let convs = Self::WIDTHS
            .iter()
            .map(|&c| {
                let w = Var::constant(fan_in_normal(&[c, cin, 3, 3], cin * 9, 2f64.sqrt(), &mut rng));
                let b = Var::constant(fan_in_normal(&[c], 1, 0.1, &mut rng));
                cin = c;
                (w, b)
            })
            .collect();
        Self { seed, convs }
    }
}

impl<T: Scalar> Module<T> for StubPerceptual<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (i, (w, b)) in self.convs.iter().enumerate() {
            f(&join(prefix, &format!("stage{i}.weight")), w);
            f(&join(prefix, &format!("stage{i}.bias")), b);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Var<T>)) {}
}

impl<T: Scalar> PerceptualNet<T> for StubPerceptual<T> {
    fn id(&self) -> String {
        format!("stub-perceptual:{}", self.seed)
    }

    fn taps(&self, x: &Var<T>) -> Vec<Var<T>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(5);
        for (i, (w, b)) in self.convs.iter().enumerate() {
            if i > 0 && h.shape()[2] >= 2 && h.shape()[3] >= 2 {
                h = h.avg_pool2();
            }
            let c = w.shape()[0];
            h = h.conv2d(w, 1).add(&b.reshape(&[1, c, 1, 1])).leaky_relu(T::lit(0.2));
            out.push(h.clone());
        }
        out
    }

    fn checksum(&self) -> String {
        module_checksum(self)
    }
}

/// Indices into torchvision's `vgg16().features` for the 13 convolutions.
const VGG_CONVS: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];
/// Number of convolutions per stage; a 2×2 max pool follows every stage but the last.
const VGG_STAGES: [usize; 5] = [2, 2, 3, 3, 3];

/// VGG16 feature stack read from an archive with torchvision names
/// (`features.{i}.weight` / `.bias`). Taps are relu1_2, relu2_2, relu3_3,
/// relu4_3 and relu5_3. Inputs are mapped to `[0, 1]` and normalized with
/// the ImageNet mean and deviation.
pub struct Vgg16<T: Scalar> {
    convs: Vec<(Var<T>, Var<T>)>,
}

impl<T: Scalar> Vgg16<T> {
    pub fn from_archive(a: &Archive<T>) -> Result<Self> {
        let convs = VGG_CONVS
            .iter()
            .map(|i| {
                Ok((
                    Var::constant(a.tensor(&format!("features.{i}.weight"))?.clone()),
                    Var::constant(a.tensor(&format!("features.{i}.bias"))?.clone()),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

impl<T: Scalar> Module<T> for Vgg16<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for ((w, b), i) in self.convs.iter().zip(VGG_CONVS) {
            f(&join(prefix, &format!("features.{i}.weight")), w);
            f(&join(prefix, &format!("features.{i}.bias")), b);
        }
    }

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Var<T>)) {}
}

impl<T: Scalar> PerceptualNet<T> for Vgg16<T> {
    fn id(&self) -> String {
        "vgg16".into()
    }

    fn taps(&self, x: &Var<T>) -> Vec<Var<T>> {
        let mean = Tensor::from_f64(&[1, 3, 1, 1], &[0.485, 0.456, 0.406]);
        let std = Tensor::from_f64(&[1, 3, 1, 1], &[0.229, 0.224, 0.225]);
        let mut h = x
            .add_scalar(T::one())
            .scale(T::lit(0.5))
            .sub(&Var::constant(mean))
            .div(&Var::constant(std));
        let mut out = Vec::with_capacity(5);
        let mut convs = self.convs.iter();
        for (s, &n) in VGG_STAGES.iter().enumerate() {
            if s > 0 {
                h = h.max_pool(2, 2);
            }
            for (w, b) in convs.by_ref().take(n) {
                let c = w.shape()[0];
                h = h.conv2d(w, 1).add(&b.reshape(&[1, c, 1, 1])).relu();
            }
            out.push(h.clone());
        }
        out
    }

    fn checksum(&self) -> String {
        module_checksum(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_has_five_taps_of_shrinking_size() {
        let p = StubPerceptual::<f32>::new(1);
        let taps = p.taps(&Var::constant(Tensor::zeros(&[2, 3, 16, 16])));
        let sides: Vec<usize> = taps.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sides, [16, 8, 4, 2, 1]);
    }

    #[test]
    fn vgg_layout_loads_from_archive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let widths = [4, 4, 6, 6, 8, 8, 8, 8, 8, 8, 8, 8, 8];
        let mut a = Archive::<f32>::new();
        let mut cin = 3;
        for (i, &c) in VGG_CONVS.iter().zip(&widths) {
            a.insert(format!("features.{i}.weight"), fan_in_normal(&[c, cin, 3, 3], cin * 9, 1.4, &mut rng));
            a.insert(format!("features.{i}.bias"), Tensor::zeros(&[c]));
            cin = c;
        }
        let vgg = Vgg16::from_archive(&a).unwrap();
        let taps = vgg.taps(&Var::constant(Tensor::full(&[1, 3, 32, 32], 0.3)));
        let shapes: Vec<Vec<usize>> = taps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes[0], [1, 4, 32, 32]);
        assert_eq!(shapes[4], [1, 8, 2, 2]);
    }
}
