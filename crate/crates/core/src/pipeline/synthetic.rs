//! Procedurally drawn cartoon faces with known identities and landmarks.
//!
//! Used for offline tests and desk-scale runs. An identity fixes colours and
//! facial proportions; each image varies lighting, background, small head
//! shifts and mouth opening.

use std::path::Path;

use gradtape::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::landmarks::{LandmarkSet, Similarity, Template, ARCFACE_112};
use super::store::{sidecar_path, FaceStore};
use crate::error::{Error, Result};
use crate::face::{AlignedFace, RawImage};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    face_radii: (f64, f64),
    hairline: f64,
    eye_radius: f64,
    /// Offsets of the five feature points from the template, in unit coordinates.
    jitter: [[f64; 2]; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variation {
    background: [f64; 3],
    light: f64,
    shift: [f64; 2],
    mouth_open: f64,
}

fn color<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

fn smoothstep(edge: f64, width: f64, d: f64) -> f64 {
    // 1 inside (d < edge), 0 outside, linear ramp of `width`.
    ((edge - d) / width + 0.5).clamp(0.0, 1.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
}

impl SyntheticIdentity {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let j = 0.04;
        Self {
            skin: color(rng, 90.0, 240.0),
            hair: color(rng, 10.0, 200.0),
            iris: color(rng, 20.0, 160.0),
            lips: color(rng, 80.0, 220.0),
            face_radii: (rng.random_range(0.30..0.40), rng.random_range(0.38..0.48)),
            hairline: rng.random_range(0.18..0.34),
            eye_radius: rng.random_range(0.035..0.065),
            jitter: [[0.0; 2]; 5].map(|_| [rng.random_range(-j..j), rng.random_range(-j..j)]),
        }
    }

    /// Feature points in unit template coordinates.
    fn points(&self, var: &Variation) -> [[f64; 2]; 5] {
        let mut p = ARCFACE_112.map(|q| [(q[0] + 0.5) / 112.0, (q[1] + 0.5) / 112.0]);
        for (i, q) in p.iter_mut().enumerate() {
            q[0] += self.jitter[i][0] + var.shift[0];
            q[1] += self.jitter[i][1] + var.shift[1];
        }
        p
    }

    /// RGB in `[0, 255]` at unit coordinates `(x, y)`.
    fn shade(&self, var: &Variation, x: f64, y: f64) -> [f64; 3] {
        let pts = self.points(var);
        let centre = [0.5 + var.shift[0], 0.55 + var.shift[1]];
        let (rx, ry) = self.face_radii;
        let r = (((x - centre[0]) / rx).powi(2) + ((y - centre[1]) / ry).powi(2)).sqrt();
        let mut c = var.background;
        c = mix(c, self.skin, smoothstep(1.0, 0.05, r));
        let hair_r = (((x - centre[0]) / (rx * 1.12)).powi(2) + ((y - centre[1] + 0.03) / (ry * 1.1)).powi(2)).sqrt();
        let above = smoothstep(self.hairline + var.shift[1], 0.03, y);
        c = mix(c, self.hair, smoothstep(1.0, 0.05, hair_r) * above);
        for eye in &pts[..2] {
            let d = ((x - eye[0]).powi(2) + (y - eye[1]).powi(2)).sqrt();
            c = mix(c, [245.0, 245.0, 240.0], smoothstep(self.eye_radius, 0.01, d));
            c = mix(c, self.iris, smoothstep(self.eye_radius * 0.55, 0.01, d));
        }
        let nose = pts[2];
        let dn = (((x - nose[0]) / 0.03).powi(2) + ((y - nose[1]) / 0.05).powi(2)).sqrt();
        c = mix(c, [0, 1, 2].map(|i| self.skin[i] * 0.7), smoothstep(1.0, 0.3, dn));
        let (ml, mr) = (pts[3], pts[4]);
        let mc = [(ml[0] + mr[0]) / 2.0, (ml[1] + mr[1]) / 2.0];
        let half_w = ((mr[0] - ml[0]) / 2.0).abs().max(0.02);
        let half_h = 0.012 + 0.03 * var.mouth_open;
        let dm = (((x - mc[0]) / half_w).powi(2) + ((y - mc[1]) / half_h).powi(2)).sqrt();
        c = mix(c, self.lips, smoothstep(1.0, 0.25, dm));
        let shade = 1.0 + var.light * (x - 0.5);
        c.map(|v| (v * shade).clamp(0.0, 255.0))
    }
}

impl Variation {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            background: color(rng, 0.0, 255.0),
            light: rng.random_range(-0.4..0.4),
            shift: [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)],
            mouth_open: rng.random_range(0.0..1.0),
        }
    }
}

fn render<T: Scalar>(id: &SyntheticIdentity, var: &Variation, h: usize, w: usize, to_unit: impl Fn(f64, f64) -> [f64; 2]) -> Tensor<T> {
    let mut data = vec![T::zero(); 3 * h * w];
    for row in 0..h {
        for col in 0..w {
            let [x, y] = to_unit(col as f64, row as f64);
            let rgb = id.shade(var, x, y);
            for c in 0..3 {
                data[(c * h + row) * w + col] = T::lit(rgb[c]);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// An already-aligned crop.
pub fn render_aligned<T: Scalar>(id: &SyntheticIdentity, var: &Variation, resolution: usize, label: &str) -> AlignedFace<T> {
    let k = 1.0 / resolution as f64;
    let px = render::<T>(id, var, resolution, resolution, |x, y| [(x + 0.5) * k, (y + 0.5) * k]);
    RawImage::new(px)
        .and_then(|r| r.into_aligned(label))
        .expect("rendered image is valid")
}

/// A `size × size` uncropped image where `placement` maps unit template
/// coordinates to pixel-index coordinates, with the matching landmarks.
pub fn render_raw<T: Scalar>(id: &SyntheticIdentity, var: &Variation, size: usize, placement: &Similarity) -> (RawImage<T>, LandmarkSet) {
    let inv = placement.inverse();
    let px = render::<T>(id, var, size, size, |x, y| inv.apply([x, y]));
    let lm = id.points(var).map(|p| placement.apply(p));
    (
        RawImage::new(px).expect("rendered image is valid"),
        LandmarkSet::new(lm).expect("finite landmarks"),
    )
}

/// Layout of a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl SynthConfig {
    fn draw(&self) -> Vec<(SyntheticIdentity, Vec<Variation>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.identities)
            .map(|_| {
                let id = SyntheticIdentity::random(&mut rng);
                let vars = (0..self.per_identity).map(|_| Variation::random(&mut rng)).collect();
                (id, vars)
            })
            .collect()
    }

    pub fn label(i: usize) -> String {
        format!("id{i:03}")
    }

    pub fn store<T: Scalar>(&self) -> FaceStore<T> {
        let mut store = FaceStore::new();
        for (i, (id, vars)) in self.draw().iter().enumerate() {
            for v in vars {
                store.push(render_aligned(id, v, self.resolution, &Self::label(i)));
            }
        }
        store
    }

    /// Writes `root/<label>/NNN.png`. With `raw`, images are uncropped
    /// `2 × resolution` canvases carrying `.landmarks` sidecars.
    pub fn write(&self, root: &Path, raw: bool) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        for (i, (id, vars)) in self.draw().iter().enumerate() {
            let dir = root.join(Self::label(i));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (j, v) in vars.iter().enumerate() {
                let path = dir.join(format!("{j:03}.png"));
                if raw {
                    let size = 2 * self.resolution;
                    let s = size as f64;
                    let placement = Similarity::from_parts(
                        s * rng.random_range(0.45..0.6),
                        rng.random_range(-0.3..0.3),
                        s * rng.random_range(0.15..0.3),
                        s * rng.random_range(0.15..0.3),
                    );
                    let (img, lm) = render_raw::<f64>(id, v, size, &placement);
                    save_raw(&img, &path)?;
                    let side = sidecar_path(&path);
                    std::fs::write(&side, lm.to_text()).map_err(|e| Error::io(&side, e))?;
                } else {
                    render_aligned::<f64>(id, v, self.resolution, "").save(&path)?;
                }
            }
        }
        Ok(())
    }
}

fn save_raw(img: &RawImage<f64>, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let d = img.pixels().data();
    let out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| d[(c * h + y as usize) * w + x as usize].round().clamp(0.0, 255.0) as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// The template the synthetic renderer is drawn against.
pub fn synthetic_template() -> Template {
    Template::arcface()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::align_face;

    #[test]
    fn store_has_requested_layout() {
        let cfg = SynthConfig {
            identities: 3,
            per_identity: 4,
            resolution: 16,
            seed: 1,
        };
        let s: FaceStore<f32> = cfg.store();
        assert_eq!(s.identity_count(), 3);
        assert_eq!(s.len(), 12);
        assert!(s.faces().all(|f| f.resolution() == 16));
        let again: FaceStore<f32> = cfg.store();
        assert!(s.faces().zip(again.faces()).all(|(a, b)| a == b));
    }

    #[test]
    fn raw_render_aligns_back_to_the_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = SyntheticIdentity::random(&mut rng);
        let mut var = Variation::random(&mut rng);
        var.shift = [0.0; 2];
        // Aligning to the identity's own points recovers the unit placement.
        let r = 32;
        let placement = Similarity::from_parts(70.0, 0.4, 20.0, 15.0);
        let (img, lm) = render_raw::<f64>(&id, &var, 100, &placement);
        let own = Template {
            points: LandmarkSet::new(id.points(&var).map(|p| [p[0] * r as f64 - 0.5, p[1] * r as f64 - 0.5])).unwrap(),
            size: r as f64,
        };
        let aligned = align_face(&img, &lm, &own, r, "x").unwrap();
        let direct: AlignedFace<f64> = render_aligned(&id, &var, r, "x");
        let err = aligned
            .pixels()
            .data()
            .iter()
            .zip(direct.pixels().data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (3 * r * r) as f64;
        assert!(err < 0.05, "mean abs error {err}");
    }
}
