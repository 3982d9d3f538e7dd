//! Model persistence: a tar archive holding `manifest.json`,
//! `preprocess.json` and one little-endian `f64` blob per parameter under
//! `params/<name>.bin`. Entries carry fixed metadata, so equal models give
//! byte-identical archives.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::FittedPreprocess;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::survival::{InputDims, ModelConfig, SurvivalModel, TimeGrid};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub dims: InputDims,
    pub model: ModelConfig,
    pub grid: TimeGrid,
    pub seed: u64,
    pub config_hash: String,
    pub parameters: Vec<ParamEntry>,
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn append<W: Write>(builder: &mut tar::Builder<W>, path: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    header.set_cksum();
    builder.append_data(&mut header, path, data)?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &SurvivalModel<T>,
    preprocess: &FittedPreprocess,
    config_hash: &str,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let store = &model.store;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        dims: model.dims.clone(),
        model: model.config.clone(),
        grid: model.head.grid.clone(),
        seed: model.seed,
        config_hash: config_hash.to_string(),
        parameters: store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
            })
            .collect(),
    };
    let file = BufWriter::new(File::create(path)?);
    let mut builder = tar::Builder::new(file);
    builder.mode(tar::HeaderMode::Deterministic);
    append(&mut builder, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    append(&mut builder, "preprocess.json", &serde_json::to_vec_pretty(preprocess)?)?;
    for id in store.ids() {
        let blob: Vec<u8> = store
            .get(id)
            .data()
            .iter()
            .flat_map(|v| v.as_f64().to_le_bytes())
            .collect();
        append(&mut builder, &format!("params/{}.bin", store.name(id)), &blob)?;
    }
    builder.into_inner()?.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint<T> {
    pub manifest: Manifest,
    pub model: SurvivalModel<T>,
    pub preprocess: FittedPreprocess,
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let file = File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut archive = tar::Archive::new(file);
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf)?;
        files.insert(name, buf);
    }
    let manifest: Manifest = serde_json::from_slice(
        files
            .get("manifest.json")
            .ok_or_else(|| bad("missing manifest.json".into()))?,
    )?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let preprocess: FittedPreprocess = serde_json::from_slice(
        files
            .get("preprocess.json")
            .ok_or_else(|| bad("missing preprocess.json".into()))?,
    )?;

    let mut model = SurvivalModel::<T>::new(
        manifest.dims.clone(),
        manifest.model.clone(),
        manifest.grid.clone(),
        1.0,
        manifest.seed,
    )?;
    if model.store.len() != manifest.parameters.len() {
        return Err(bad(format!(
            "archive lists {} parameters, model has {}",
            manifest.parameters.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.parameters {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| bad(format!("unknown parameter {}", entry.name)))?;
        let blob = files
            .get(&format!("params/{}.bin", entry.name))
            .ok_or_else(|| bad(format!("missing blob for {}", entry.name)))?;
        let count: usize = entry.shape.iter().product();
        if blob.len() != count * 8 {
            return Err(bad(format!(
                "blob for {} has {} bytes, expected {}",
                entry.name,
                blob.len(),
                count * 8
            )));
        }
        let data = blob
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        model.store.set(id, Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(LoadedCheckpoint {
        manifest,
        model,
        preprocess,
    })
}
