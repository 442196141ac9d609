//! On-disk training state: safetensors archives plus a JSON descriptor.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::optim::Moments;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::ShapeSpec;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "checkpoint.json";

const PARAM_PREFIX: &str = "param/";
const BUFFER_PREFIX: &str = "buffer/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub arch: ModelConfig,
    pub shape: ShapeSpec,
    pub class_names: Vec<String>,
    pub config_hash: String,
    /// Number of completed updates.
    pub step: u64,
    pub seed: u64,
    pub best_miou: Option<f64>,
    pub best_step: Option<u64>,
    pub optimizer_steps: BTreeMap<String, u64>,
}

/// Weights and statistics of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts<T> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub student: ModelParts<T>,
    pub teacher: ModelParts<T>,
    pub heads: ModelParts<T>,
    pub optimizer: BTreeMap<String, Moments<T>>,
}

fn dtype_name(d: safetensors::Dtype) -> String {
    format!("{d:?}")
}

pub fn save_tensors<'a, T: Scalar>(path: &Path, entries: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> Result<()> {
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = entries
        .into_iter()
        .map(|(n, t)| {
            let mut bytes = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
            T::write_le(t.data(), &mut bytes);
            (n, t.shape().to_vec(), bytes)
        })
        .collect();
    let mut views = Vec::with_capacity(owned.len());
    for (n, shape, bytes) in &owned {
        let v = TensorView::new(T::DTYPE, shape.clone(), bytes).map_err(|e| Error::Checkpoint(format!("{n}: {e}")))?;
        views.push((n.as_str(), v));
    }
    let bytes = safetensors::serialize(views, &None::<HashMap<String, String>>)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {name} is {}, expected {}",
                path.display(),
                dtype_name(view.dtype()),
                dtype_name(T::DTYPE)
            )));
        }
        let t = Tensor::from_vec(view.shape(), T::read_le(view.data()))?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_parts<T: Scalar>(path: &Path, parts: &ModelParts<T>) -> Result<()> {
    let entries = parts
        .params
        .iter()
        .map(|(n, t)| (format!("{PARAM_PREFIX}{n}"), t))
        .chain(parts.buffers.iter().map(|(n, t)| (format!("{BUFFER_PREFIX}{n}"), t)));
    save_tensors(path, entries)
}

pub fn load_parts<T: Scalar>(path: &Path) -> Result<ModelParts<T>> {
    let mut parts = ModelParts { params: ParamStore::new(), buffers: ParamStore::new() };
    for (name, t) in load_tensors(path)? {
        if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
            parts.params.insert(n, t);
        } else if let Some(n) = name.strip_prefix(BUFFER_PREFIX) {
            parts.buffers.insert(n, t);
        } else {
            return Err(Error::Checkpoint(format!("{}: unexpected entry {name}", path.display())));
        }
    }
    Ok(parts)
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes into a sibling temporary directory, then swaps it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dir
            .file_name()
            .ok_or_else(|| Error::Checkpoint(format!("invalid checkpoint path {}", dir.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        save_parts(&tmp.join("student.safetensors"), &self.student)?;
        save_parts(&tmp.join("teacher.safetensors"), &self.teacher)?;
        save_parts(&tmp.join("heads.safetensors"), &self.heads)?;
        let opt = self
            .optimizer
            .iter()
            .flat_map(|(n, m)| [(format!("m/{n}"), &m.m), (format!("v/{n}"), &m.v)]);
        save_tensors(&tmp.join("optimizer.safetensors"), opt)?;
        let mut meta = self.meta.clone();
        meta.optimizer_steps = self.optimizer.iter().map(|(n, m)| (n.clone(), m.steps)).collect();
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta_path = tmp.join(META_FILE);
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

        let old: Option<PathBuf> = if dir.exists() {
            let old = parent.join(format!(".{name}.old-{}", std::process::id()));
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
            Some(old)
        } else {
            None
        };
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if let Some(old) = old {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = read_meta(dir)?;
        if meta.dtype != dtype_name(T::DTYPE) {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {}, expected {}",
                meta.dtype,
                dtype_name(T::DTYPE)
            )));
        }
        let student = load_parts(&dir.join("student.safetensors"))?;
        let teacher = load_parts(&dir.join("teacher.safetensors"))?;
        let heads = load_parts(&dir.join("heads.safetensors"))?;
        let mut raw = load_tensors::<T>(&dir.join("optimizer.safetensors"))?;
        let mut optimizer = BTreeMap::new();
        for (name, &steps) in &meta.optimizer_steps {
            let m = raw.remove(&format!("m/{name}"));
            let v = raw.remove(&format!("v/{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    optimizer.insert(name.clone(), Moments { m, v, steps });
                }
                _ => return Err(Error::Checkpoint(format!("missing optimizer moments for {name}"))),
            }
        }
        if let Some(extra) = raw.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected optimizer entry {extra}")));
        }
        Ok(Self { meta, student, teacher, heads, optimizer })
    }
}

pub fn meta_template<T: Scalar>(arch: ModelConfig, shape: ShapeSpec, class_names: Vec<String>) -> CheckpointMeta {
    CheckpointMeta {
        format_version: FORMAT_VERSION,
        dtype: dtype_name(T::DTYPE),
        arch,
        shape,
        class_names,
        config_hash: String::new(),
        step: 0,
        seed: 0,
        best_miou: None,
        best_step: None,
        optimizer_steps: BTreeMap::new(),
    }
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format_version)));
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parts(v: f32) -> ModelParts<f32> {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::from_vec(&[2, 2], vec![v, 1.0 / 3.0, -0.0, f32::MIN_POSITIVE]).unwrap());
        params.insert("b", Tensor::scalar(v * 2.0));
        let mut buffers = ParamStore::new();
        buffers.insert("bn.running_var", Tensor::full(&[3], 0.5));
        ModelParts { params, buffers }
    }

    fn checkpoint() -> Checkpoint<f32> {
        let mut optimizer = BTreeMap::new();
        optimizer.insert(
            "student.b".to_string(),
            Moments { m: Tensor::scalar(0.25), v: Tensor::scalar(1e-7), steps: 3 },
        );
        let mut meta = meta_template::<f32>(ModelConfig::default(), ShapeSpec::new(8, 8, 3, 2).unwrap(), vec!["x".into(), "y".into()]);
        meta.step = 3;
        meta.best_miou = Some(41.5);
        Checkpoint { meta, student: parts(0.1), teacher: parts(0.2), heads: parts(0.3), optimizer }
    }

    #[test]
    fn directory_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latest");
        let c = checkpoint();
        c.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert!(back.student.params.bitwise_eq(&c.student.params));
        assert!(back.teacher.buffers.bitwise_eq(&c.teacher.buffers));
        assert!(back.heads.params.bitwise_eq(&c.heads.params));
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.meta.step, 3);
        assert_eq!(back.meta.optimizer_steps["student.b"], 3);

        let mut c2 = c.clone();
        c2.meta.step = 9;
        c2.save(&path).unwrap();
        assert_eq!(read_meta(&path).unwrap().step, 9);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        checkpoint().save(&path).unwrap();
        assert!(matches!(Checkpoint::<f64>::load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load_parts::<f64>(&path.join("heads.safetensors")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
