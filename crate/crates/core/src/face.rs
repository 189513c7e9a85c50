//! Face images and conversion to and from 8-bit files.

use std::path::Path;

use gradtape::{Scalar, Tensor};

use crate::error::{Error, Result};

/// A face warped to the identity-encoder template.
///
/// Pixels are stored channel-first `[3, R, R]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFace<T: Scalar> {
    pixels: Tensor<T>,
    source_id: String,
}

impl<T: Scalar> AlignedFace<T> {
    pub fn new(pixels: Tensor<T>, source_id: impl Into<String>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidFace(format!("expected [3, R, R] pixels, got {s:?}")));
        }
        if s[1] != s[2] || s[1] == 0 {
            return Err(Error::InvalidFace(format!("face must be square and non-empty, got {s:?}")));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(v.abs() <= T::one())) {
            return Err(Error::InvalidFace(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    /// Clamps into `[-1, 1]` (NaN becomes 0) before validating shape.
    pub fn from_clamped(pixels: Tensor<T>, source_id: impl Into<String>) -> Result<Self> {
        let clamped = pixels.map(|v| if v.is_nan() { T::zero() } else { v.max(-T::one()).min(T::one()) });
        Self::new(clamped, source_id)
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn resolution(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    /// Stacks faces of equal resolution into an `[N, 3, R, R]` batch.
    pub fn batch(faces: &[&AlignedFace<T>]) -> Result<Tensor<T>> {
        let first = faces.first().ok_or(Error::EmptyDataset)?.resolution();
        if let Some(f) = faces.iter().find(|f| f.resolution() != first) {
            return Err(Error::ResolutionMismatch {
                expected: first,
                got: f.resolution(),
            });
        }
        let parts: Vec<Tensor<T>> = faces
            .iter()
            .map(|f| f.pixels.reshape(&[1, 3, first, first]))
            .collect();
        Ok(Tensor::stack0(&parts))
    }

    /// Splits an `[N, 3, R, R]` batch into faces, clamping into range.
    pub fn unbatch(batch: &Tensor<T>, ids: &[&str]) -> Result<Vec<AlignedFace<T>>> {
        let n = batch.shape()[0];
        let r = batch.shape()[2];
        (0..n)
            .map(|i| {
                let one = batch.narrow0(i, 1).reshape(&[3, r, r]);
                AlignedFace::from_clamped(one, ids.get(i).copied().unwrap_or(""))
            })
            .collect()
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let r = self.resolution();
        let d = self.pixels.data();
        image::RgbImage::from_fn(r as u32, r as u32, |x, y| {
            let at = |c: usize| {
                let v = d[(c * r + y as usize) * r + x as usize].as_f64();
                ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    /// Writes an 8-bit PNG or JPEG, creating parent directories.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// An unaligned RGB image, channel-first `[3, H, W]`, intensities in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage<T: Scalar> {
    pixels: Tensor<T>,
}

impl<T: Scalar> RawImage<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::InvalidFace(format!("expected non-empty [3, H, W] image, got {s:?}")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![T::zero(); 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = T::lit(p[c] as f64);
            }
        }
        Self {
            pixels: Tensor::from_vec(&[3, h, w], data),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Interprets an already-aligned square image as a face.
    pub fn into_aligned(self, source_id: impl Into<String>) -> Result<AlignedFace<T>> {
        let scale = T::lit(1.0 / 127.5);
        AlignedFace::from_clamped(self.pixels.map(|v| v * scale - T::one()), source_id)
    }
}
