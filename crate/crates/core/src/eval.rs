//! Swap quality metrics: identity retrieval, pose and expression error,
//! and Fréchet distance between feature distributions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gradtape::{no_grad, Scalar, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::backbone::{perceptual_from_spec, PerceptualNet};
use crate::backbone::BackboneAdapter;
use crate::error::{Error, Result};
use crate::face::AlignedFace;
use crate::pipeline::{image_files, load_face, Template};

pub const REPORT_VERSION: u32 = 1;
/// Covariances may have eigenvalues down to `-PSD_TOLERANCE` (scaled by
/// the largest diagonal entry when it exceeds one).
pub const PSD_TOLERANCE: f64 = 1e-6;
const SYMMETRY_TOLERANCE: f64 = 1e-8;
const SQRT_RESIDUAL: f64 = 1e-10;
const NEWTON_SCHULZ_STEPS: usize = 60;
const FEATURE_BATCH: usize = 16;

/// Pose or expression regressor. Outputs are opaque fixed-length vectors.
pub trait AttributeEstimator<T: Scalar> {
    fn id(&self) -> String;
    fn estimate(&self, face: &AlignedFace<T>) -> Result<Vec<f64>>;
}

/// Deterministic pseudo-estimates: a seeded random projection of the pixels.
/// Equal images give equal estimates, so a set compared with itself scores 0.
#[derive(Clone, Debug)]
pub struct StubEstimator {
    pub name: String,
    pub seed: u64,
    pub dim: usize,
}

impl StubEstimator {
    pub fn pose() -> Self {
        Self { name: "pose".into(), seed: 11, dim: 3 }
    }

    pub fn expression() -> Self {
        Self { name: "expression".into(), seed: 12, dim: 10 }
    }
}

impl<T: Scalar> AttributeEstimator<T> for StubEstimator {
    fn id(&self) -> String {
        format!("stub-{}:{}", self.name, self.seed)
    }

    fn estimate(&self, face: &AlignedFace<T>) -> Result<Vec<f64>> {
        let px = face.pixels().data();
        let scale = (3.0 / px.len() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.dim)
            .map(|_| px.iter().map(|&v| v.as_f64() * rng.random_range(-1.0..1.0)).sum::<f64>() * scale)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and covariance (normalized by `N - 1`) of the rows.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: n });
    }
    let d = features[0].len();
    if let Some(r) = features.iter().find(|r| r.len() != d) {
        return Err(Error::ShapeMismatch(format!("feature rows of length {d} and {}", r.len())));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let covariance = centered.transpose() * &centered / (n - 1) as f64;
    Ok(GaussianStats { mean, covariance })
}

fn check_covariance(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!("covariance is {}x{}", a.nrows(), a.ncols())));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > SYMMETRY_TOLERANCE * scale {
        return Err(Error::ShapeMismatch("covariance is not symmetric".into()));
    }
    let tol = PSD_TOLERANCE * a.diagonal().max().max(1.0);
    let shifted = a + DMatrix::identity(a.nrows(), a.nrows()) * tol;
    if shifted.cholesky().is_none() {
        let min = a.clone().symmetric_eigenvalues().min();
        if min < -tol {
            return Err(Error::NonPsdCovariance(min));
        }
    }
    Ok(())
}

fn residual(s: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    (s * s - a).norm() / a.norm()
}

/// Coupled Newton–Schulz iteration on `a / ‖a‖`.
fn newton_schulz(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let c = a.norm();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut y = a / c;
    let mut z = eye.clone();
    for _ in 0..NEWTON_SCHULZ_STEPS {
        let t = (&eye * 3.0 - &z * &y) * 0.5;
        let next = &y * &t;
        z = &t * &z;
        let delta = (&next - &y).norm();
        y = next;
        if !delta.is_finite() {
            return None;
        }
        if delta < 1e-15 {
            break;
        }
    }
    let s = y * c.sqrt();
    (residual(&s, a) < SQRT_RESIDUAL).then_some(s)
}

fn eigen_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = a.clone().symmetric_eigen();
    let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_covariance(a)?;
    if a.norm() == 0.0 {
        return Ok(a.clone());
    }
    let sym = (a + a.transpose()) * 0.5;
    let s = newton_schulz(&sym).unwrap_or_else(|| eigen_sqrt(&sym));
    Ok((&s + s.transpose()) * 0.5)
}

/// `‖μp − μq‖² + tr(Σp + Σq − 2 (Σp Σq)^½)`, never negative.
pub fn frechet_distance(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() || p.covariance.nrows() != p.dim() || q.covariance.nrows() != q.dim() {
        return Err(Error::ShapeMismatch(format!("statistics of dimension {} and {}", p.dim(), q.dim())));
    }
    check_covariance(&q.covariance)?;
    let sp = sqrtm_psd(&p.covariance)?;
    // tr (Σp Σq)^½ = tr (Σp^½ Σq Σp^½)^½, and the inner product is symmetric.
    let m = &sp * &q.covariance * &sp;
    let m = (&m + m.transpose()) * 0.5;
    let cross = if m.norm() == 0.0 {
        0.0
    } else {
        m.symmetric_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum()
    };
    let d = (&p.mean - &q.mean).norm_squared() + p.covariance.trace() + q.covariance.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Mean Euclidean distance between paired vectors.
pub fn pairwise_l2(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} estimates against {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::ShapeMismatch(format!("vectors of length {} and {}", x.len(), y.len())));
        }
        total += x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    }
    Ok(total / a.len() as f64)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Fraction of queries whose most cosine-similar gallery entry carries the
/// query's label. Ties go to the earlier gallery entry.
pub fn retrieval_accuracy(queries: &[(String, Vec<f64>)], gallery: &[(String, Vec<f64>)]) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if queries.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    let gallery = gallery
        .iter()
        .map(|(id, e)| Ok((id.as_str(), unit(e)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    for (label, q) in queries {
        if !gallery.iter().any(|(id, _)| id == label) {
            return Err(Error::InvalidFace(format!("identity `{label}` is not in the gallery")));
        }
        let q = unit(q)?;
        let mut best = (f64::NEG_INFINITY, "");
        for (id, g) in &gallery {
            if g.len() != q.len() {
                return Err(Error::ShapeMismatch(format!("embeddings of length {} and {}", g.len(), q.len())));
            }
            let s: f64 = g.iter().zip(&q).map(|(a, b)| a * b).sum();
            if s > best.0 {
                best = (s, id);
            }
        }
        hits += usize::from(best.1 == label);
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// One embedding per gallery identity: the normalized mean of its faces'
/// unit embeddings.
pub fn gallery_embeddings<T: Scalar>(
    gallery: &[(String, AlignedFace<T>)],
    encoder: &BackboneAdapter<T>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (id, face) in gallery {
        let e = unit(&to_f64(encoder.embed(face)?.as_slice()))?;
        match out.iter_mut().find(|(k, _)| k == id) {
            Some((_, acc)) => acc.iter_mut().zip(&e).for_each(|(a, b)| *a += b),
            None => out.push((id.clone(), e)),
        }
    }
    Ok(out)
}

/// Retrieval accuracy of swapped faces, each labelled with its true source
/// identity, against the gallery under `encoder`.
pub fn identity_retrieval<T: Scalar>(
    swapped: &[AlignedFace<T>],
    gallery: &[(String, AlignedFace<T>)],
    encoder: &BackboneAdapter<T>,
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let g = gallery_embeddings(gallery, encoder)?;
    let q = swapped
        .iter()
        .map(|f| Ok((f.source_id().to_string(), to_f64(encoder.embed(f)?.as_slice()))))
        .collect::<Result<Vec<_>>>()?;
    retrieval_accuracy(&q, &g)
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Spatially averaged deepest tap of `net`, one row per face.
pub fn deep_features<T: Scalar>(faces: &[AlignedFace<T>], net: &dyn PerceptualNet<T>) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(faces.len());
    for chunk in faces.chunks(FEATURE_BATCH) {
        let refs: Vec<&AlignedFace<T>> = chunk.iter().collect();
        let x = Var::constant(AlignedFace::batch(&refs)?);
        let tap = no_grad(|| net.taps(&x).pop())
            .ok_or_else(|| Error::InvalidConfig(format!("feature extractor `{}` has no taps", net.id())))?;
        let tap = tap.value();
        let s = tap.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2..].iter().product::<usize>());
        let d = tap.data();
        for i in 0..n {
            rows.push(
                (0..c)
                    .map(|k| d[(i * c + k) * hw..(i * c + k + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64)
                    .collect(),
            );
        }
    }
    Ok(rows)
}

/// Optional estimators. A metric whose adapter is absent is reported as
/// `null`.
#[derive(Default)]
pub struct Adapters<T: Scalar> {
    pub identity: Option<BackboneAdapter<T>>,
    pub pose: Option<Box<dyn AttributeEstimator<T>>>,
    pub expression: Option<Box<dyn AttributeEstimator<T>>>,
    pub features: Option<Box<dyn PerceptualNet<T>>>,
}

impl<T: Scalar> Adapters<T> {
    /// Stub pose and expression estimators, the stub perceptual net for
    /// features and the stub recognizer.
    pub fn stubs() -> Result<Self> {
        Ok(Self {
            identity: Some(BackboneAdapter::from_spec("stub")?),
            pose: Some(Box::new(StubEstimator::pose())),
            expression: Some(Box::new(StubEstimator::expression())),
            features: Some(perceptual_from_spec("stub")?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub version: u32,
    pub n_images: usize,
    pub id_retrieval: Option<f64>,
    pub pose_l2: Option<f64>,
    pub expression_l2: Option<f64>,
    pub fid: Option<f64>,
    /// Adapter ids keyed by metric; values are only comparable under equal ids.
    pub extractors: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("metric report: {e}")))?;
        if r.version != REPORT_VERSION {
            return Err(Error::Parse(format!("metric report version {} is not {REPORT_VERSION}", r.version)));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// A face with its path relative to the directory it was loaded from.
pub type LabelledFace<T> = (PathBuf, AlignedFace<T>);

/// Swapped faces are paired with the reference face at the same relative
/// path; the reference holds the target whose pose and expression the swap
/// should keep. Swapped labels are the true source identities.
pub fn evaluate<T: Scalar>(
    swapped: &[LabelledFace<T>],
    reference: &[LabelledFace<T>],
    gallery: &[(String, AlignedFace<T>)],
    adapters: &Adapters<T>,
) -> Result<MetricReport> {
    if swapped.is_empty() || reference.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = MetricReport {
        version: REPORT_VERSION,
        n_images: swapped.len(),
        id_retrieval: None,
        pose_l2: None,
        expression_l2: None,
        fid: None,
        extractors: BTreeMap::new(),
    };
    let swapped_faces: Vec<AlignedFace<T>> = swapped.iter().map(|(_, f)| f.clone()).collect();
    if let Some(enc) = &adapters.identity {
        report.id_retrieval = Some(identity_retrieval(&swapped_faces, gallery, enc)?);
        report.extractors.insert("id_retrieval".into(), enc.id());
    }
    let estimators = [("pose_l2", &adapters.pose), ("expression_l2", &adapters.expression)];
    if estimators.iter().any(|(_, e)| e.is_some()) {
        let pairs = swapped
            .iter()
            .map(|(p, f)| {
                reference
                    .iter()
                    .find(|(q, _)| q == p)
                    .map(|(_, r)| (f, r))
                    .ok_or_else(|| Error::Unpaired(p.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        for (key, est) in estimators {
            let Some(est) = est else { continue };
            let a = pairs.iter().map(|(s, _)| est.estimate(s)).collect::<Result<Vec<_>>>()?;
            let b = pairs.iter().map(|(_, r)| est.estimate(r)).collect::<Result<Vec<_>>>()?;
            let v = pairwise_l2(&a, &b)?;
            match key {
                "pose_l2" => report.pose_l2 = Some(v),
                _ => report.expression_l2 = Some(v),
            }
            report.extractors.insert(key.into(), est.id());
        }
    }
    if let Some(net) = &adapters.features {
        let reference_faces: Vec<AlignedFace<T>> = reference.iter().map(|(_, f)| f.clone()).collect();
        let p = gaussian_stats(&deep_features(&swapped_faces, net.as_ref())?)?;
        let q = gaussian_stats(&deep_features(&reference_faces, net.as_ref())?)?;
        report.fid = Some(frechet_distance(&p, &q)?);
        report.extractors.insert("fid".into(), net.id());
    }
    Ok(report)
}

/// Loads images under `root`: files directly inside get the label `""`, files
/// in a subdirectory are labelled with its name. Square crops are rescaled
/// to `resolution`; images with landmark sidecars are aligned.
pub fn load_labelled<T: Scalar>(root: &Path, template: &Template, resolution: usize) -> Result<Vec<LabelledFace<T>>> {
    let mut out = Vec::new();
    for f in image_files(root)? {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
        out.push((rel, load_face(&f, template, resolution, "")?));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let label = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for f in image_files(&dir)? {
            let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
            out.push((rel, load_face(&f, template, resolution, &label)?));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// [`evaluate`] over directories laid out as in [`load_labelled`].
pub fn evaluate_dirs<T: Scalar>(
    swapped: &Path,
    reference: &Path,
    gallery: Option<&Path>,
    adapters: &Adapters<T>,
    resolution: usize,
) -> Result<MetricReport> {
    let t = Template::arcface();
    let s = load_labelled(swapped, &t, resolution)?;
    let r = load_labelled(reference, &t, resolution)?;
    let g = match gallery {
        Some(dir) => load_labelled(dir, &t, resolution)?
            .into_iter()
            .map(|(_, f)| (f.source_id().to_string(), f))
            .collect(),
        None => Vec::new(),
    };
    evaluate(&s, &r, &g, adapters)
}
