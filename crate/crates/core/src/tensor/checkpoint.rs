//! Parameter checkpoints: a flat little-endian float64 stream plus a JSON
//! shape manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

fn ck_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

/// Write named parameters as `<stem>.bin` + `<stem>.json` next to each other.
pub fn save_checkpoint(stem: &Path, params: &[(String, Tensor)]) -> Result<(), TensorError> {
    let mut manifest = Manifest { tensors: Vec::new() };
    let mut offset = 0usize;
    let bin_path = stem.with_extension("bin");
    let json_path = stem.with_extension("json");
    let mut w = BufWriter::new(File::create(&bin_path).map_err(ck_err)?);
    for (name, t) in params {
        manifest.tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape(),
            offset,
        });
        t.with_data(|d| -> Result<(), TensorError> {
            for &v in d {
                w.write_f64::<LittleEndian>(v).map_err(ck_err)?;
            }
            Ok(())
        })?;
        offset += t.numel();
    }
    w.flush().map_err(ck_err)?;
    let f = File::create(&json_path).map_err(ck_err)?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest).map_err(ck_err)?;
    Ok(())
}

/// Load a checkpoint into the given parameters; names and shapes must match
/// the manifest exactly, in order.
pub fn load_checkpoint(stem: &Path, params: &[(String, Tensor)]) -> Result<(), TensorError> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let manifest: Manifest =
        serde_json::from_reader(BufReader::new(File::open(&json_path).map_err(ck_err)?)).map_err(ck_err)?;
    if manifest.tensors.len() != params.len() {
        return Err(TensorError::Checkpoint(format!(
            "manifest holds {} tensors, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let mut r = BufReader::new(File::open(&bin_path).map_err(ck_err)?);
    for (entry, (name, t)) in manifest.tensors.iter().zip(params) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(TensorError::Checkpoint(format!(
                "entry {} ({:?}) does not match parameter {} ({:?})",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
        }
        let mut buf = vec![0.0; t.numel()];
        for v in buf.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(ck_err)?;
        }
        t.apply_update(|data, _| data.copy_from_slice(&buf));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(ck_err)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes in checkpoint stream".into()));
    }
    Ok(())
}
