use gradtape::nn::{fan_in_normal, join, Module};
use gradtape::{Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackboneOutput, IdentityBackbone, EMBEDDING_DIM};
use crate::archive::module_checksum;

/// Seeded random encoder for offline runs.
///
/// Eight `conv3x3 → tanh` blocks at 32×32 input, halving resolution before
/// blocks 3, 5 and 7, then a linear projection of the flattened 32×4×4 map.
/// Convolutions have no bias and the projection bias is the constant
/// [`StubBackbone::BIAS`], so an all-zero image embeds to that constant vector.
pub struct StubBackbone<T: Scalar> {
    seed: u64,
    convs: Vec<Var<T>>,
    proj_weight: Var<T>,
    proj_bias: Var<T>,
}

const WIDTHS: [usize; 8] = [8, 8, 16, 16, 32, 32, 32, 32];
const POOL_BEFORE: [bool; 8] = [false, false, true, false, true, false, true, false];

impl<T: Scalar> StubBackbone<T> {
    pub const DEFAULT_SEED: u64 = 1234;
    pub const INPUT: usize = 32;
    pub const BIAS: f64 = 1e-3;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let convs = WIDTHS
            .iter()
            .map(|&c| {
                let w = fan_in_normal(&[c, cin, 3, 3], cin * 9, 1.5, &mut rng);
                cin = c;
                Var::constant(w)
            })
            .collect();
        let flat = cin * 4 * 4;
        Self {
            seed,
            convs,
            proj_weight: Var::constant(fan_in_normal(&[EMBEDDING_DIM, flat], flat, 1.0, &mut rng)),
            proj_bias: Var::constant(Tensor::full(&[EMBEDDING_DIM], T::lit(Self::BIAS))),
        }
    }
}

impl<T: Scalar> Module<T> for StubBackbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&join(prefix, &format!("block{}.weight", i + 1)), c);
        }
        f(&join(prefix, "proj.weight"), &self.proj_weight);
        f(&join(prefix, "proj.bias"), &self.proj_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&join(prefix, &format!("block{}.weight", i + 1)), c);
        }
        f(&join(prefix, "proj.weight"), &mut self.proj_weight);
        f(&join(prefix, "proj.bias"), &mut self.proj_bias);
    }
}

impl<T: Scalar> IdentityBackbone<T> for StubBackbone<T> {
    fn id(&self) -> String {
        format!("stub-encoder:{}", self.seed)
    }

    fn input_resolution(&self) -> usize {
        Self::INPUT
    }

    fn block_count(&self) -> usize {
        WIDTHS.len()
    }

    fn forward(&self, x: &Var<T>) -> BackboneOutput<T> {
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(WIDTHS.len());
        for (w, &pool) in self.convs.iter().zip(&POOL_BEFORE) {
            if pool {
                h = h.avg_pool2();
            }
            h = h.conv2d(w, 1).tanh();
            blocks.push(h.clone());
        }
        let n = x.shape()[0];
        let embedding = h
            .reshape(&[n, h.value().numel() / n])
            .matmul_t(&self.proj_weight, false, true)
            .add(&self.proj_bias.reshape(&[1, EMBEDDING_DIM]));
        BackboneOutput { embedding, blocks }
    }

    fn checksum(&self) -> String {
        module_checksum(self)
    }
}
