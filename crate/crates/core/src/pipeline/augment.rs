use gradtape::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::face::AlignedFace;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Ranges for photometric jitter. Brightness is an additive shift in the
/// `[-1, 1]` pixel scale; contrast and saturation are multiplicative and
/// drawn log-uniformly so `[0.8, 1.25]` is symmetric about 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: (0.8, 1.25),
            saturation: (0.8, 1.25),
        }
    }
}

impl AugmentConfig {
    pub const NEUTRAL: Self = Self {
        brightness: 0.0,
        contrast: (1.0, 1.0),
        saturation: (1.0, 1.0),
    };

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Augmentation {
        let factor = |(lo, hi): (f64, f64), rng: &mut R| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo.ln()..=hi.ln()).exp()
            }
        };
        let brightness = if self.brightness == 0.0 {
            0.0
        } else {
            rng.random_range(-self.brightness..=self.brightness)
        };
        let contrast = factor(self.contrast, rng);
        let saturation = factor(self.saturation, rng);
        Augmentation {
            brightness,
            contrast,
            saturation,
        }
    }
}

/// One concrete draw of jitter magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Augmentation {
    /// Brightness, then contrast about the mean gray level, then saturation
    /// about per-pixel luma; clipped to `[-1, 1]`. Neutral steps are skipped
    /// so a neutral draw returns the input bit for bit.
    pub fn apply<T: Scalar>(&self, face: &AlignedFace<T>) -> AlignedFace<T> {
        if self.brightness == 0.0 && self.contrast == 1.0 && self.saturation == 1.0 {
            return face.clone();
        }
        let r = face.resolution();
        let plane = r * r;
        let mut px: Vec<f64> = face.pixels().to_f64_vec();
        if self.brightness != 0.0 {
            px.iter_mut().for_each(|v| *v += self.brightness);
        }
        if self.contrast != 1.0 {
            let gray: f64 = (0..plane)
                .map(|i| (0..3).map(|c| LUMA[c] * px[c * plane + i]).sum::<f64>())
                .sum::<f64>()
                / plane as f64;
            px.iter_mut().for_each(|v| *v = gray + self.contrast * (*v - gray));
        }
        if self.saturation != 1.0 {
            for i in 0..plane {
                let l: f64 = (0..3).map(|c| LUMA[c] * px[c * plane + i]).sum();
                for c in 0..3 {
                    let v = &mut px[c * plane + i];
                    *v = l + self.saturation * (*v - l);
                }
            }
        }
        let data = px.into_iter().map(|v| T::lit(v.clamp(-1.0, 1.0))).collect();
        AlignedFace::new(Tensor::from_vec(&[3, r, r], data), face.source_id())
            .expect("clipped pixels are in range")
    }
}

/// Draws magnitudes from `config` and applies them.
pub fn augment<T: Scalar, R: Rng + ?Sized>(face: &AlignedFace<T>, config: &AugmentConfig, rng: &mut R) -> AlignedFace<T> {
    config.sample(rng).apply(face)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_face(seed: u64) -> AlignedFace<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..3 * 8 * 8).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        AlignedFace::new(Tensor::from_vec(&[3, 8, 8], d), "id").unwrap()
    }

    #[test]
    fn neutral_is_identity() {
        let f = random_face(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&f, &AugmentConfig::NEUTRAL, &mut rng), f);
    }

    #[test]
    fn brightness_shift_on_mid_gray() {
        let f = AlignedFace::new(Tensor::<f64>::zeros(&[3, 4, 4]), "g").unwrap();
        let a = Augmentation {
            brightness: 0.1,
            contrast: 1.0,
            saturation: 1.0,
        };
        assert!(a.apply(&f).pixels().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn seeded_draws_repeat() {
        let f = random_face(2);
        let cfg = AugmentConfig::default();
        let a = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn draws_stay_within_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = cfg.sample(&mut rng);
            assert!(a.brightness.abs() <= 0.2);
            assert!((0.8 - 1e-12..=1.25 + 1e-12).contains(&a.contrast));
            assert!((0.8 - 1e-12..=1.25 + 1e-12).contains(&a.saturation));
        }
    }
}
