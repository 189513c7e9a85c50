use gradtape::{Scalar, Tensor};

use super::landmarks::{estimate_similarity_transform, LandmarkSet, Similarity, Template};
use crate::error::{Error, Result};
use crate::face::{AlignedFace, RawImage};

/// Mirror index about the edge pixels without repeating them (`-1 → 1`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Bilinear sample of one `[H, W]` plane at index-space `(x, y)`.
fn sample<T: Scalar>(plane: &[T], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |yy: isize, xx: isize| plane[reflect(yy, h) * w + reflect(xx, w)].as_f64();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples `image` so that `to_output` maps its coordinates onto the output grid.
pub fn warp<T: Scalar>(image: &RawImage<T>, to_output: &Similarity, out: usize) -> Tensor<T> {
    let inv = to_output.inverse();
    let (h, w) = (image.height(), image.width());
    let src = image.pixels().data();
    let mut data = vec![T::zero(); 3 * out * out];
    for v in 0..out {
        for u in 0..out {
            let [x, y] = inv.apply([u as f64, v as f64]);
            for c in 0..3 {
                data[(c * out + v) * out + u] = T::lit(sample(&src[c * h * w..(c + 1) * h * w], h, w, x, y));
            }
        }
    }
    Tensor::from_vec(&[3, out, out], data)
}

/// Warps `image` onto `template` (scaled to `out_resolution`) and rescales to `[-1, 1]`.
pub fn align_face<T: Scalar>(
    image: &RawImage<T>,
    landmarks: &LandmarkSet,
    template: &Template,
    out_resolution: usize,
    source_id: &str,
) -> Result<AlignedFace<T>> {
    if out_resolution == 0 {
        return Err(Error::InvalidConfig("output resolution must be positive".into()));
    }
    let t = estimate_similarity_transform(landmarks, &template.at_resolution(out_resolution))?;
    let scale = T::lit(1.0 / 127.5);
    let warped = warp(image, &t, out_resolution).map(|v| v * scale - T::one());
    AlignedFace::from_clamped(warped, source_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> RawImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..3 * h * w).map(|_| rng.random_range(0.0..255.0)).collect();
        RawImage::new(Tensor::from_vec(&[3, h, w], d)).unwrap()
    }

    #[test]
    fn reflect_matches_numpy_convention() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RawImage::new(Tensor::full(&[3, 40, 50], 100.0)).unwrap();
        let lm = Template::arcface().at_resolution(40).map(|p| [p[0] * 0.9 + 7.0, p[1] * 1.1 - 3.0]);
        let face = align_face(&img, &lm.unwrap(), &Template::arcface(), 24, "x").unwrap();
        let want: f64 = 100.0 / 127.5 - 1.0;
        assert!(face.pixels().data().iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn template_geometry_at_double_size_is_a_two_by_two_average() {
        // Pixel-edge scaling by two samples exactly between source pixels.
        let img = noise(32, 32, 1);
        let lm = Template::arcface().at_resolution(32);
        let face = align_face(&img, &lm, &Template::arcface(), 16, "x").unwrap();
        let src = img.pixels().data();
        for c in 0..3 {
            for v in 0..16 {
                for u in 0..16 {
                    let at = |y: usize, x: usize| src[(c * 32 + y) * 32 + x];
                    let avg = (at(2 * v, 2 * u) + at(2 * v, 2 * u + 1) + at(2 * v + 1, 2 * u) + at(2 * v + 1, 2 * u + 1)) / 4.0;
                    let got = (face.pixels().data()[(c * 16 + v) * 16 + u] + 1.0) * 127.5;
                    assert!((got - avg).abs() < 1e-9 * 255.0);
                }
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let img = noise(48, 48, 2);
        let shifted = {
            let mut d = vec![0.0; 3 * 48 * 58];
            for c in 0..3 {
                for y in 0..48 {
                    for x in 0..58usize {
                        let sx = x.saturating_sub(10).min(47);
                        d[(c * 48 + y) * 58 + x] = img.pixels().data()[(c * 48 + y) * 48 + sx];
                    }
                }
            }
            RawImage::new(Tensor::from_vec(&[3, 48, 58], d)).unwrap()
        };
        let lm = Template::arcface().at_resolution(48).map(|p| [p[0] * 0.8 + 4.0, p[1] * 0.8 + 6.0]).unwrap();
        let moved = lm.map(|p| [p[0] + 10.0, p[1]]).unwrap();
        let a = align_face(&img, &lm, &Template::arcface(), 20, "a").unwrap();
        let b = align_face(&shifted, &moved, &Template::arcface(), 20, "b").unwrap();
        for (x, y) in a.pixels().data().iter().zip(b.pixels().data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
