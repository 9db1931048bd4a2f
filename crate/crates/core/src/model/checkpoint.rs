//! Self-describing checkpoints: a manifest naming every parameter and its
//! tensor file, plus the full model configuration, so loading needs nothing
//! but the directory.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::kvfile::{self, KvError, KvWriter};
use crate::tensor::io::{read_tensor, write_tensor, TensorFileError};
use crate::tensor::Scalar;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "model.cfg";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Parse {
        file: String,
        #[source]
        source: KvError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint parameter `{name}` has shape {got:?}, model expects {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("checkpoint has unknown parameter `{0}`")]
    UnknownParam(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint<F: Scalar>(dir: &Path, model: &Model<F>) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir.join("params")).map_err(|e| io_err(dir, e))?;
    let mut cfg_w = KvWriter::new();
    model.cfg.write_kv(&mut cfg_w);
    fs::write(dir.join(CONFIG_FILE), cfg_w.finish()).map_err(|e| io_err(dir, e))?;

    let mut manifest = KvWriter::new();
    manifest.put("format", 1u32);
    for (idx, (_, entry)) in model.params.entries().enumerate() {
        let rel = format!("params/p{idx:04}.olmt");
        write_tensor(&dir.join(&rel), &entry.value)?;
        manifest.put("param", format!("{} {}", entry.name, rel));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.finish()).map_err(|e| io_err(dir, e))
}

/// Rebuild the model from its stored configuration and load every tensor.
/// Validates that the parameter sets match exactly, shape for shape.
pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<Model<F>, CheckpointError> {
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| io_err(&cfg_path, e))?;
    let mut cfg = ModelConfig::default();
    for entry in kvfile::parse(&cfg_text).map_err(|e| parse_err(&cfg_path, e))? {
        let handled = cfg
            .apply_entry(&entry)
            .map_err(|e| parse_err(&cfg_path, e))?;
        if !handled {
            return Err(parse_err(
                &cfg_path,
                KvError::UnknownKey {
                    key: entry.key,
                    line: entry.line,
                },
            ));
        }
    }
    // the seed only matters when training from scratch; every tensor is
    // overwritten below
    let mut model = Model::<F>::new(cfg, 0)?;

    let man_path = dir.join(MANIFEST_FILE);
    let man_text = fs::read_to_string(&man_path).map_err(|e| io_err(&man_path, e))?;
    let mut files: HashMap<String, String> = HashMap::new();
    for entry in kvfile::parse(&man_text).map_err(|e| parse_err(&man_path, e))? {
        if entry.key == "param" {
            if let Some((name, rel)) = entry.value.split_once(' ') {
                files.insert(name.to_string(), rel.trim().to_string());
            }
        }
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let rel = files
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        let tensor = read_tensor::<F>(&dir.join(&rel))?;
        let want = model.params.value(id).shape().to_vec();
        if tensor.shape() != want.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                got: tensor.shape().to_vec(),
                want,
            });
        }
        *model.params.value_mut(id) = tensor;
    }
    if let Some(name) = files.into_keys().next() {
        return Err(CheckpointError::UnknownParam(name));
    }
    Ok(model)
}

fn parse_err(path: &Path, source: KvError) -> CheckpointError {
    CheckpointError::Parse {
        file: path.display().to_string(),
        source,
    }
}
