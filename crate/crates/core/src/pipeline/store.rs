use std::path::{Path, PathBuf};

use gradtape::{Scalar, Tensor};
use rand::Rng;

use super::align::{align_face, warp};
use super::augment::AugmentConfig;
use super::landmarks::{LandmarkSet, Similarity, Template};
use crate::error::{Error, Result};
use crate::face::{AlignedFace, RawImage};

/// Target and source for one swap. `is_same` means the two are pixel-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair<T: Scalar> {
    pub target: AlignedFace<T>,
    pub source: AlignedFace<T>,
    pub is_same: bool,
}

/// Faces grouped by identity label, in a stable order.
#[derive(Clone, Debug, Default)]
pub struct FaceStore<T: Scalar> {
    identities: Vec<(String, Vec<AlignedFace<T>>)>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub(crate) fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Sidecar path `<image>.landmarks`, e.g. `a.png.landmarks`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".landmarks");
    PathBuf::from(s)
}

/// Aligns with the sidecar landmarks if present; otherwise treats the image
/// as a pre-aligned square crop and rescales it.
pub fn load_face<T: Scalar>(path: &Path, template: &Template, resolution: usize, source_id: &str) -> Result<AlignedFace<T>> {
    let raw = RawImage::<T>::load(path)?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let lm = LandmarkSet::load(&sidecar)?;
        return align_face(&raw, &lm, template, resolution, source_id);
    }
    if raw.height() != raw.width() {
        return Err(Error::InvalidFace(format!(
            "{} is not square and has no landmarks sidecar",
            path.display()
        )));
    }
    if raw.height() == resolution {
        return raw.into_aligned(source_id);
    }
    let k = resolution as f64 / raw.height() as f64;
    let scale = Similarity {
        a: k,
        b: 0.0,
        tx: 0.5 * k - 0.5,
        ty: 0.5 * k - 0.5,
    };
    let inv = T::lit(1.0 / 127.5);
    AlignedFace::from_clamped(warp(&raw, &scale, resolution).map(|v| v * inv - T::one()), source_id)
}

impl<T: Scalar> FaceStore<T> {
    pub fn new() -> Self {
        Self { identities: Vec::new() }
    }

    pub fn push(&mut self, face: AlignedFace<T>) {
        match self.identities.iter_mut().find(|(l, _)| l == face.source_id()) {
            Some((_, v)) => v.push(face),
            None => self.identities.push((face.source_id().to_string(), vec![face])),
        }
    }

    pub fn from_faces(faces: impl IntoIterator<Item = AlignedFace<T>>) -> Self {
        let mut s = Self::new();
        faces.into_iter().for_each(|f| s.push(f));
        s
    }

    /// One subdirectory per identity; identities and files in sorted order.
    pub fn load_dir(root: &Path, template: &Template, resolution: usize) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut store = Self::new();
        for dir in dirs {
            let label = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for file in image_files(&dir)? {
                store.push(load_face(&file, template, resolution, &label)?);
            }
        }
        if store.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(store)
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn len(&self) -> usize {
        self.identities.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn identities(&self) -> impl Iterator<Item = (&str, &[AlignedFace<T>])> {
        self.identities.iter().map(|(l, v)| (l.as_str(), v.as_slice()))
    }

    pub fn faces(&self) -> impl Iterator<Item = &AlignedFace<T>> {
        self.identities.iter().flat_map(|(_, v)| v.iter())
    }

    /// Face by flat index over all identities.
    pub fn get(&self, mut index: usize) -> Option<&AlignedFace<T>> {
        for (_, v) in &self.identities {
            if index < v.len() {
                return v.get(index);
            }
            index -= v.len();
        }
        None
    }

    pub fn resolution(&self) -> Option<usize> {
        self.faces().next().map(|f| f.resolution())
    }
}

/// Draws a batch of pairs. Each pair is independently "same" with
/// probability `same_prob`; if none came up, one uniformly chosen pair is
/// forced same. Faces are drawn uniformly over the whole store and
/// augmented before pairing, so same pairs stay pixel-identical.
pub fn sample_batch<T: Scalar, R: Rng + ?Sized>(
    store: &FaceStore<T>,
    batch_size: usize,
    same_prob: f64,
    augmentation: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<TrainingPair<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&same_prob) {
        return Err(Error::InvalidConfig(format!("same-pair probability {same_prob} outside [0, 1]")));
    }
    let n = store.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if store.identity_count() < 2 {
        return Err(Error::InsufficientIdentities {
            needed: 2,
            found: store.identity_count(),
        });
    }
    let mut same: Vec<bool> = (0..batch_size).map(|_| rng.random_bool(same_prob)).collect();
    if !same.contains(&true) {
        same[rng.random_range(0..batch_size)] = true;
    }
    let mut pairs = Vec::with_capacity(batch_size);
    for is_same in same {
        let ti = rng.random_range(0..n);
        let target = super::augment(store.get(ti).expect("index in range"), augmentation, rng);
        let source = if is_same {
            target.clone()
        } else {
            // Redraw until a different image comes up; n ≥ 2 is guaranteed above.
            let si = loop {
                let si = rng.random_range(0..n);
                if si != ti {
                    break si;
                }
            };
            super::augment(store.get(si).expect("index in range"), augmentation, rng)
        };
        pairs.push(TrainingPair { target, source, is_same });
    }
    Ok(pairs)
}

/// A batch laid out as tensors: `[N, 3, R, R]` targets and sources and an
/// `[N]` 0/1 same mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T: Scalar> {
    pub target: Tensor<T>,
    pub source: Tensor<T>,
    pub same: Tensor<T>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn from_pairs(pairs: &[TrainingPair<T>]) -> Result<Self> {
        let targets: Vec<&AlignedFace<T>> = pairs.iter().map(|p| &p.target).collect();
        let sources: Vec<&AlignedFace<T>> = pairs.iter().map(|p| &p.source).collect();
        let same = pairs.iter().map(|p| if p.is_same { T::one() } else { T::zero() }).collect();
        Ok(Self {
            target: AlignedFace::batch(&targets)?,
            source: AlignedFace::batch(&sources)?,
            same: Tensor::from_vec(&[pairs.len()], same),
        })
    }

    pub fn len(&self) -> usize {
        self.same.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> FaceStore<f32> {
        FaceStore::from_faces((0..6).map(|i| {
            let v = i as f32 / 10.0;
            AlignedFace::new(Tensor::full(&[3, 4, 4], v), format!("id{}", i % 3)).unwrap()
        }))
    }

    #[test]
    fn single_pair_batch_is_always_same() {
        let s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b = sample_batch(&s, 1, 0.0, &AugmentConfig::NEUTRAL, &mut rng).unwrap();
            assert!(b[0].is_same && b[0].target == b[0].source);
        }
    }

    #[test]
    fn probability_one_makes_every_pair_same() {
        let s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&s, 8, 1.0, &AugmentConfig::default(), &mut rng).unwrap();
        assert!(b.iter().all(|p| p.is_same && p.target == p.source));
    }

    #[test]
    fn non_same_pairs_use_distinct_images() {
        let s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            for p in sample_batch(&s, 6, 0.2, &AugmentConfig::NEUTRAL, &mut rng).unwrap() {
                assert_eq!(p.is_same, p.target == p.source);
            }
        }
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let empty = FaceStore::<f32>::new();
        assert!(matches!(sample_batch(&empty, 2, 0.2, &AugmentConfig::NEUTRAL, &mut rng), Err(Error::EmptyDataset)));
        let one = FaceStore::from_faces([AlignedFace::new(Tensor::<f32>::zeros(&[3, 2, 2]), "a").unwrap()]);
        assert!(matches!(
            sample_batch(&one, 2, 0.2, &AugmentConfig::NEUTRAL, &mut rng),
            Err(Error::InsufficientIdentities { .. })
        ));
        assert!(sample_batch(&store(), 0, 0.2, &AugmentConfig::NEUTRAL, &mut rng).is_err());
    }

    #[test]
    fn flat_indexing_walks_identities_in_order() {
        let s = store();
        assert_eq!(s.identity_count(), 3);
        assert_eq!(s.len(), 6);
        let ids: Vec<&str> = (0..6).map(|i| s.get(i).unwrap().source_id()).collect();
        assert_eq!(ids, ["id0", "id0", "id1", "id1", "id2", "id2"]);
        assert!(s.get(6).is_none());
    }
}
