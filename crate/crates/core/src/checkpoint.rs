//! Parameter checkpoints: one tensor dump per parameter plus a JSON
//! manifest (`manifest.json`) listing names, shapes, the SHA-256 checksum
//! and free-form metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    pub checksum: String,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub fn save<P: ParamSet>(dir: impl AsRef<Path>, params: &P, meta: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let file = format!("{name}.f64");
        t.dump(dir.join(&file))?;
        tensors.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        tensors,
        checksum: params.checksum(),
        meta,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Overwrites `params` (which fixes the expected layout) from `dir`.
pub fn load_into<P: ParamSet>(dir: impl AsRef<Path>, params: &mut P) -> Result<Manifest> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let names: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if names.len() != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    let mut loaded = Vec::with_capacity(names.len());
    for ((name, shape), entry) in names.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Format(format!(
                "checkpoint entry {} {:?} does not match model tensor {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let t = Tensor::load(dir.join(&entry.file))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "{} on disk has shape {:?}",
                entry.file,
                t.shape()
            )));
        }
        loaded.push(t);
    }
    for (dst, src) in params.tensors_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    if params.checksum() != manifest.checksum {
        return Err(Error::Format(format!(
            "checksum mismatch for checkpoint in {}",
            dir.display()
        )));
    }
    Ok(manifest)
}
