//! Single-file checkpoint archives.
//!
//! Tensors are stored as little-endian `f32` safetensors entries addressed
//! by stable string keys. Everything else (config records, step counter,
//! seeds) lives in one JSON object under a single metadata key, which keeps
//! the header byte-identical across writes of the same state.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde_json::{Map, Value};

use crate::nn::{Param, Parameters, Scalar};
use crate::{Error, Result};

const META_KEY: &str = "pathryoshka";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta<V: serde::Serialize>(&mut self, key: &str, value: &V) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.tensors.insert(
            key.into(),
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))
    }

    /// Stores every parameter of `module` under `prefix/name`.
    pub fn insert_params<T: Scalar, M: Parameters<T>>(&mut self, prefix: &str, module: &M) {
        module.visit_params("", &mut |name, p| {
            self.insert(key(prefix, &name), &p.shape, p.value.iter().map(|v| v.f64() as f32).collect());
        });
    }

    /// Stores one value vector per parameter, e.g. optimizer moments.
    pub fn insert_param_values<T: Scalar, M: Parameters<T>>(
        &mut self,
        prefix: &str,
        module: &M,
        values: impl Fn(&str, &Param<T>) -> Vec<f32>,
    ) {
        module.visit_params("", &mut |name, p| {
            self.insert(key(prefix, &name), &p.shape, values(&name, p));
        });
    }

    /// Overwrites the parameters of `module` from `prefix/name` entries.
    pub fn load_params<T: Scalar, M: Parameters<T>>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut err = None;
        module.visit_params_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let k = key(prefix, &name);
            match self.tensors.get(&k) {
                Some(t) if t.shape == p.shape => {
                    for (dst, &src) in p.value.iter_mut().zip(&t.data) {
                        *dst = T::lit(src as f64);
                    }
                }
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor `{k}` has shape {:?}, expected {:?}",
                        t.shape, p.shape
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor `{k}`"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Total element count of tensors whose key starts with `prefix/`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(_, t)| t.data.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .zip(self.tensors.values())
            .map(|((k, b), t)| {
                TensorView::new(Dtype::F32, t.shape.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(s) => serde_json::from_str(s)?,
            None => Map::new(),
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                name,
                Tensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { meta, tensors })
    }

    /// Atomic write: the archive is written next to `path` and renamed.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}
