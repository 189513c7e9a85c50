//! Named-tensor archives in the safetensors layout, with a content digest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use gradtape::nn::Module;
use gradtape::{Scalar, Tensor, Var};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_KEY: &str = "content_sha256";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive<T: Scalar> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub metadata: BTreeMap<String, String>,
}

fn digest<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(T::DTYPE.as_bytes());
        h.update((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        buf.clear();
        t.data().iter().for_each(|&v| v.write_le(&mut buf));
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

fn decode<T: Scalar>(dtype: Dtype, bytes: &[u8]) -> Result<Vec<T>> {
    Ok(match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        other => return Err(Error::CheckpointCorrupt(format!("unsupported dtype {other:?}"))),
    })
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl safetensors::View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl<T: Scalar> Archive<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("missing metadata `{key}`")))
    }

    /// Stores every parameter of `module` under `prefix`.
    pub fn insert_module<M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit(prefix, &mut |name, v| {
            self.tensors.insert(name.to_string(), v.value().clone());
        });
    }

    /// Overwrites the parameters of `module` from `prefix`, keeping each
    /// parameter's trainable flag. Shapes must match exactly.
    pub fn load_module<M: Module<T> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut err = None;
        module.visit_mut(prefix, &mut |name, v| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(t) if t.shape() == v.shape() => {
                    *v = if v.requires_grad() {
                        Var::param(t.clone())
                    } else {
                        Var::constant(t.clone())
                    };
                }
                Some(t) => {
                    err = Some(Error::CheckpointCorrupt(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        v.shape()
                    )))
                }
                None => err = Some(Error::CheckpointCorrupt(format!("missing tensor `{name}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dtype = if T::BYTES == 4 { Dtype::F32 } else { Dtype::F64 };
        let raws: Vec<(String, Raw)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
                t.data().iter().for_each(|&v| v.write_le(&mut bytes));
                (
                    n.clone(),
                    Raw {
                        dtype,
                        shape: t.shape().to_vec(),
                        bytes,
                    },
                )
            })
            .collect();
        let mut meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        meta.insert(DIGEST_KEY.into(), digest(&self.tensors));
        safetensors::serialize(raws.iter().map(|(n, r)| (n.as_str(), r)), Some(meta))
            .map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Parses an archive. Tensors stored as F32 or F64 are converted to `T`.
    /// When the digest is present it must match the stored values exactly,
    /// which is only checked when the stored dtype equals `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let mut metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let stored = metadata.remove(DIGEST_KEY);
        let mut tensors = BTreeMap::new();
        let mut same_dtype = true;
        for (name, view) in st.tensors() {
            same_dtype &= view.dtype().to_string() == T::DTYPE;
            let data = decode::<T>(view.dtype(), view.data())?;
            tensors.insert(name, Tensor::from_vec(view.shape(), data));
        }
        if let Some(want) = stored {
            if same_dtype && digest(&tensors) != want {
                return Err(Error::CheckpointCorrupt("content digest mismatch".into()));
            }
        }
        Ok(Self { tensors, metadata })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::CheckpointNotFound(path.to_path_buf())),
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::from_bytes(&bytes)
    }
}

/// Hex sha256 over the parameter values of a module, in visit order.
pub fn module_checksum<T: Scalar, M: Module<T> + ?Sized>(module: &M) -> String {
    let mut map = BTreeMap::new();
    let mut i = 0usize;
    module.visit("", &mut |name, v| {
        map.insert(format!("{i:06}{name}"), v.value().clone());
        i += 1;
    });
    digest(&map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive<f64> {
        let mut a = Archive::new();
        a.insert("w", Tensor::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-300]));
        a.insert("b", Tensor::from_f64(&[3], &[0.0, f64::MIN_POSITIVE, 7.0]));
        a.set_meta("step", "12");
        a
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn f64_archive_loads_as_f32() {
        let a = sample();
        let b: Archive<f32> = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(b.tensor("w").unwrap().data(), &[1.0, -2.5, 3.25, 0.0]);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(Archive::<f64>::from_bytes(&bytes), Err(Error::CheckpointCorrupt(_))));
        assert!(matches!(Archive::<f64>::from_bytes(&bytes[..10]), Err(Error::CheckpointCorrupt(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let e = Archive::<f32>::load(Path::new("/nonexistent/x.safetensors")).unwrap_err();
        assert!(matches!(e, Error::CheckpointNotFound(_)));
    }
}
