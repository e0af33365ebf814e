//! Named-tensor checkpoint archive.
//!
//! A checkpoint directory holds `manifest.json` (schema version, dtype, and
//! one entry per tensor: name, shape, trainable flag, byte offset and length)
//! plus `tensors.bin` with the raw little-endian payload. Round-trips are
//! bitwise. Encoder checkpoints additionally carry `encoder.json` with the
//! configuration needed to rebuild the module before loading tensors.

use crate::cffn::{Cffn, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::params::ParamModule;
use crate::real::Real;
use crate::topology::JointTopology;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Write all tensors of a module, in visitation order.
pub fn save_module<R: Real>(dir: &Path, module: &dyn ParamModule<R>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    module.visit("", &mut |name, view, trainable| {
        let offset = payload.len();
        for &v in view.iter() {
            v.write_le(&mut payload);
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: view.shape().to_vec(),
            trainable,
            offset,
            byte_len: payload.len() - offset,
        });
    });
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA,
        dtype: R::DTYPE.to_string(),
        tensors: entries,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    write(dir.join("manifest.json"), manifest_json.as_bytes())?;
    write(dir.join("tensors.bin"), &payload)?;
    Ok(())
}

fn write(path: std::path::PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {}",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Dtype tag of a stored checkpoint, used to pick the load precision.
pub fn checkpoint_dtype(dir: &Path) -> Result<String> {
    Ok(read_manifest(dir)?.dtype)
}

/// Fill a module's tensors from a checkpoint; names, shapes and dtype must
/// match the module exactly.
pub fn load_module<R: Real>(dir: &Path, module: &mut dyn ParamModule<R>) -> Result<()> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != R::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: checkpoint is {}, module expects {}",
            manifest.dtype,
            R::DTYPE
        )));
    }
    let bin_path = dir.join("tensors.bin");
    if !bin_path.exists() {
        return Err(Error::MissingFile(bin_path));
    }
    let payload = fs::read(&bin_path).map_err(|e| Error::Io {
        path: bin_path.clone(),
        source: e,
    })?;

    let mut by_name: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();

    let mut failure: Option<Error> = None;
    module.visit_mut("", &mut |name, mut view, _| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.remove(name) else {
            failure = Some(Error::Checkpoint(format!("tensor {name} missing from checkpoint")));
            return;
        };
        if entry.shape != view.shape() {
            failure = Some(Error::ShapeMismatch {
                context: format!("checkpoint tensor {name}"),
                expected: format!("{:?}", view.shape()),
                found: format!("{:?}", entry.shape),
            });
            return;
        }
        let expected_bytes = view.len() * R::BYTES;
        if entry.byte_len != expected_bytes
            || entry.offset + entry.byte_len > payload.len()
        {
            failure = Some(Error::Checkpoint(format!(
                "tensor {name} has inconsistent byte range"
            )));
            return;
        }
        let stride = R::BYTES;
        let base = entry.offset;
        // Visitation order is row-major over the logical shape.
        let flat: ArrayD<R> = ArrayD::from_shape_vec(
            view.shape().to_vec(),
            (0..view.len())
                .map(|i| R::read_le(&payload[base + i * stride..base + (i + 1) * stride]))
                .collect(),
        )
        .expect("shape checked above");
        view.assign(&flat);
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::UnknownTensor(name.to_string()));
    }
    Ok(())
}

/// Save an encoder checkpoint: tensors plus the rebuild configuration.
pub fn save_encoder<R: Real>(dir: &Path, encoder: &Cffn<R>) -> Result<()> {
    save_module(dir, encoder)?;
    let cfg_json = serde_json::to_string_pretty(&encoder.cfg).expect("config serializes");
    write(dir.join("encoder.json"), cfg_json.as_bytes())
}

/// Rebuild an encoder from a checkpoint directory.
pub fn load_encoder<R: Real>(dir: &Path) -> Result<Cffn<R>> {
    let cfg_path = dir.join("encoder.json");
    if !cfg_path.exists() {
        return Err(Error::MissingFile(cfg_path));
    }
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::Io {
        path: cfg_path.clone(),
        source: e,
    })?;
    let cfg: EncoderConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: cfg_path.clone(),
        source: e,
    })?;
    let mut encoder = Cffn::<R>::new(cfg, &JointTopology::canonical16(), 0)?;
    load_module(dir, &mut encoder)?;
    Ok(encoder)
}
