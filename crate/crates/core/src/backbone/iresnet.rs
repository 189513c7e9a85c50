use std::path::Path;

use gradtape::nn::Module;
use gradtape::{Scalar, Tensor, Var};

use super::{BackboneOutput, IdentityBackbone, EMBEDDING_DIM};
use crate::archive::{module_checksum, Archive};
use crate::error::{Error, Result};

/// Inference batch norm folded to `x · scale + shift`, per channel.
struct Affine<T: Scalar> {
    scale: Var<T>,
    shift: Var<T>,
}

impl<T: Scalar> Affine<T> {
    fn load(a: &Archive<T>, prefix: &str, eps: f64) -> Result<Self> {
        let w = a.tensor(&format!("{prefix}.weight"))?;
        let b = a.tensor(&format!("{prefix}.bias"))?;
        let mean = a.tensor(&format!("{prefix}.running_mean"))?;
        let var = a.tensor(&format!("{prefix}.running_var"))?;
        let scale = w.zip_map(var, |w, v| w / (v + T::lit(eps)).sqrt());
        let shift = b.zip_map(&mean.zip_map(&scale, |m, s| m * s), |b, ms| b - ms);
        Ok(Self {
            scale: Var::constant(scale),
            shift: Var::constant(shift),
        })
    }

    fn apply(&self, x: &Var<T>) -> Var<T> {
        let c = self.scale.shape()[0];
        let shape: Vec<usize> = if x.shape().len() == 4 { vec![1, c, 1, 1] } else { vec![1, c] };
        x.mul(&self.scale.reshape(&shape)).add(&self.shift.reshape(&shape))
    }
}

fn prelu<T: Scalar>(x: &Var<T>, slope: &Var<T>) -> Var<T> {
    let c = slope.shape()[0];
    x.relu().sub(&x.neg().relu().mul(&slope.reshape(&[1, c, 1, 1])))
}

struct Block<T: Scalar> {
    bn1: Affine<T>,
    conv1: Var<T>,
    bn2: Affine<T>,
    prelu: Var<T>,
    conv2: Var<T>,
    bn3: Affine<T>,
    stride: usize,
    downsample: Option<(Var<T>, Affine<T>)>,
}

impl<T: Scalar> Block<T> {
    fn forward(&self, x: &Var<T>) -> Var<T> {
        let mut h = self.bn1.apply(x).conv2d(&self.conv1, 1);
        h = prelu(&self.bn2.apply(&h), &self.prelu).conv2d(&self.conv2, 1);
        if self.stride > 1 {
            h = h.decimate(self.stride);
        }
        h = self.bn3.apply(&h);
        let skip = match &self.downsample {
            Some((w, bn)) => {
                let mut s = x.conv2d(w, 0);
                if self.stride > 1 {
                    s = s.decimate(self.stride);
                }
                bn.apply(&s)
            }
            None => x.clone(),
        };
        h.add(&skip)
    }
}

/// Improved-ResNet face recognizer read from an archive using the
/// insightface parameter names (`conv1`, `bn1`, `prelu`,
/// `layerL.J.{bn1,conv1,bn2,prelu,conv2,bn3,downsample.0,downsample.1}`,
/// `bn2`, `fc`, `features`).
///
/// Optional metadata: `layers` (default `3,4,6,3`, giving 16 blocks),
/// `input_resolution` (default 112), `bn_eps` (default 1e-5), `id`.
/// Blocks are tapped after the residual addition.
pub struct IResNet<T: Scalar> {
    id: String,
    input: usize,
    conv1: Var<T>,
    bn1: Affine<T>,
    prelu: Var<T>,
    blocks: Vec<Block<T>>,
    bn2: Affine<T>,
    fc_weight: Var<T>,
    fc_bias: Var<T>,
    features: Affine<T>,
}

impl<T: Scalar> IResNet<T> {
    pub fn from_archive(a: &Archive<T>) -> Result<Self> {
        let parse = |key: &str, default: &str| a.metadata.get(key).map(String::as_str).unwrap_or(default).to_string();
        let layers: Vec<usize> = parse("layers", "3,4,6,3")
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::CheckpointCorrupt(format!("bad layers metadata `{s}`"))))
            .collect::<Result<_>>()?;
        let input: usize = parse("input_resolution", "112")
            .parse()
            .map_err(|_| Error::CheckpointCorrupt("bad input_resolution".into()))?;
        let eps: f64 = parse("bn_eps", "1e-5")
            .parse()
            .map_err(|_| Error::CheckpointCorrupt("bad bn_eps".into()))?;
        let c = |name: &str| a.tensor(name).map(|t| Var::constant(t.clone()));
        let mut blocks = Vec::new();
        for (li, &count) in layers.iter().enumerate() {
            for j in 0..count {
                let p = format!("layer{}.{j}", li + 1);
                let ds = format!("{p}.downsample.0.weight");
                let downsample = if a.tensors.contains_key(&ds) {
                    Some((c(&ds)?, Affine::load(a, &format!("{p}.downsample.1"), eps)?))
                } else {
                    None
                };
                blocks.push(Block {
                    bn1: Affine::load(a, &format!("{p}.bn1"), eps)?,
                    conv1: c(&format!("{p}.conv1.weight"))?,
                    bn2: Affine::load(a, &format!("{p}.bn2"), eps)?,
                    prelu: c(&format!("{p}.prelu.weight"))?,
                    conv2: c(&format!("{p}.conv2.weight"))?,
                    bn3: Affine::load(a, &format!("{p}.bn3"), eps)?,
                    stride: if j == 0 { 2 } else { 1 },
                    downsample,
                });
            }
        }
        let net = Self {
            id: a.metadata.get("id").cloned().unwrap_or_else(|| format!("iresnet-{}", parse("layers", "3,4,6,3"))),
            input,
            conv1: c("conv1.weight")?,
            bn1: Affine::load(a, "bn1", eps)?,
            prelu: c("prelu.weight")?,
            blocks,
            bn2: Affine::load(a, "bn2", eps)?,
            fc_weight: c("fc.weight")?,
            fc_bias: c("fc.bias")?,
            features: Affine::load(a, "features", eps)?,
        };
        if net.fc_weight.shape()[0] != EMBEDDING_DIM {
            return Err(Error::CheckpointCorrupt(format!(
                "fc produces {} values, expected {EMBEDDING_DIM}",
                net.fc_weight.shape()[0]
            )));
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

impl<T: Scalar> Module<T> for IResNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        let p = |n: &str| gradtape::nn::join(prefix, n);
        f(&p("conv1"), &self.conv1);
        f(&p("prelu"), &self.prelu);
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, v) in [("conv1", &b.conv1), ("conv2", &b.conv2), ("prelu", &b.prelu)] {
                f(&p(&format!("block{i}.{n}")), v);
            }
            for (n, bn) in [("bn1", &b.bn1), ("bn2", &b.bn2), ("bn3", &b.bn3)] {
                f(&p(&format!("block{i}.{n}.scale")), &bn.scale);
                f(&p(&format!("block{i}.{n}.shift")), &bn.shift);
            }
            if let Some((w, bn)) = &b.downsample {
                f(&p(&format!("block{i}.down")), w);
                f(&p(&format!("block{i}.down.scale")), &bn.scale);
                f(&p(&format!("block{i}.down.shift")), &bn.shift);
            }
        }
        for (n, bn) in [("bn1", &self.bn1), ("bn2", &self.bn2), ("features", &self.features)] {
            f(&p(&format!("{n}.scale")), &bn.scale);
            f(&p(&format!("{n}.shift")), &bn.shift);
        }
        f(&p("fc.weight"), &self.fc_weight);
        f(&p("fc.bias"), &self.fc_bias);
    }

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Var<T>)) {
        // Loaded weights are immutable.
    }
}

impl<T: Scalar> IdentityBackbone<T> for IResNet<T> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn input_resolution(&self) -> usize {
        self.input
    }

    fn block_count(&self) -> usize {
        self.blocks.len()
    }

    fn forward(&self, x: &Var<T>) -> BackboneOutput<T> {
        let mut h = prelu(&self.bn1.apply(&x.conv2d(&self.conv1, 1)), &self.prelu);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(&h);
            blocks.push(h.clone());
        }
        let n = x.shape()[0];
        let flat = self.bn2.apply(&h);
        let flat = flat.reshape(&[n, flat.value().numel() / n]);
        let fc = flat
            .matmul_t(&self.fc_weight, false, true)
            .add(&self.fc_bias.reshape(&[1, EMBEDDING_DIM]));
        BackboneOutput {
            embedding: self.features.apply(&fc),
            blocks,
        }
    }

    fn checksum(&self) -> String {
        module_checksum(self)
    }
}

/// Random weights in the expected layout, for tests and smoke runs.
pub fn random_archive<T: Scalar>(layers: &[usize], widths: &[usize], input: usize, seed: u64) -> Archive<T> {
    use gradtape::nn::fan_in_normal;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut a = Archive::new();
    let bn = |a: &mut Archive<T>, p: &str, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let r = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
            Tensor::from_vec(&[c], (0..c).map(|_| T::lit(rng.random_range(lo..hi))).collect())
        };
        a.insert(format!("{p}.weight"), r(rng, 0.8, 1.2));
        a.insert(format!("{p}.bias"), r(rng, -0.1, 0.1));
        a.insert(format!("{p}.running_mean"), r(rng, -0.1, 0.1));
        a.insert(format!("{p}.running_var"), r(rng, 0.8, 1.2));
    };
    let stem = widths[0];
    a.insert("conv1.weight", fan_in_normal(&[stem, 3, 3, 3], 27, 1.0, &mut rng));
    bn(&mut a, "bn1", stem, &mut rng);
    a.insert("prelu.weight", Tensor::full(&[stem], T::lit(0.25)));
    let mut cin = stem;
    for (li, (&count, &w)) in layers.iter().zip(widths).enumerate() {
        for j in 0..count {
            let p = format!("layer{}.{j}", li + 1);
            let inp = if j == 0 { cin } else { w };
            bn(&mut a, &format!("{p}.bn1"), inp, &mut rng);
            a.insert(format!("{p}.conv1.weight"), fan_in_normal(&[w, inp, 3, 3], inp * 9, 1.0, &mut rng));
            bn(&mut a, &format!("{p}.bn2"), w, &mut rng);
            a.insert(format!("{p}.prelu.weight"), Tensor::full(&[w], T::lit(0.25)));
            a.insert(format!("{p}.conv2.weight"), fan_in_normal(&[w, w, 3, 3], w * 9, 1.0, &mut rng));
            bn(&mut a, &format!("{p}.bn3"), w, &mut rng);
            if j == 0 {
                a.insert(format!("{p}.downsample.0.weight"), fan_in_normal(&[w, inp, 1, 1], inp, 1.0, &mut rng));
                bn(&mut a, &format!("{p}.downsample.1"), w, &mut rng);
            }
        }
        cin = w;
    }
    let side = input >> layers.len();
    bn(&mut a, "bn2", cin, &mut rng);
    let flat = cin * side * side;
    a.insert("fc.weight", fan_in_normal(&[EMBEDDING_DIM, flat], flat, 1.0, &mut rng));
    a.insert("fc.bias", Tensor::zeros(&[EMBEDDING_DIM]));
    bn(&mut a, "features", EMBEDDING_DIM, &mut rng);
    a.set_meta(
        "layers",
        layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
    );
    a.set_meta("input_resolution", input.to_string());
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_sixteen_blocks_with_shrinking_maps() {
        let a = random_archive::<f32>(&[3, 4, 6, 3], &[4, 4, 8, 8], 32, 1);
        let net = IResNet::from_archive(&a).unwrap();
        assert_eq!(net.block_count(), 16);
        let x = Var::constant(Tensor::from_vec(&[1, 3, 32, 32], (0..3072).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect()));
        let out = net.forward(&x);
        assert_eq!(out.embedding.shape(), &[1, 512]);
        assert!(out.embedding.value().all_finite());
        let sides: Vec<usize> = out.blocks.iter().map(|b| b.shape()[2]).collect();
        assert!(sides.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(sides[0], 16);
        assert_eq!(*sides.last().unwrap(), 2);
    }

    #[test]
    fn missing_tensor_is_corrupt() {
        let mut a = random_archive::<f32>(&[1, 1], &[4, 4], 16, 2);
        a.tensors.remove("fc.bias");
        assert!(matches!(IResNet::from_archive(&a), Err(Error::CheckpointCorrupt(_))));
    }
}
