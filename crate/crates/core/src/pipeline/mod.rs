//! Alignment, photometric augmentation and training-pair sampling.

mod align;
mod augment;
mod landmarks;
mod store;
pub mod synthetic;

pub use align::{align_face, warp};
pub use augment::{augment, AugmentConfig, Augmentation};
pub use landmarks::{estimate_similarity_transform, LandmarkSet, Similarity, Template, ARCFACE_112};
pub use store::{load_face, sample_batch, sidecar_path, FaceStore, PairBatch, TrainingPair};
pub(crate) use store::image_files;
