//! Flat binary-plus-manifest checkpoints.
//!
//! `<stem>.bin` holds every block back to back as little-endian `f32`;
//! `<stem>.json` lists each block's name, shape, byte offset and byte length.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ApproxError, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub byte_order: String,
    pub blocks: Vec<BlockEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save_checkpoint<P: Parameters>(params: &P, stem: &Path) -> Result<Manifest, ApproxError> {
    let mut payload = Vec::new();
    let mut blocks = Vec::new();
    for b in params.param_blocks() {
        let offset = payload.len();
        for &v in b.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        blocks.push(BlockEntry {
            name: b.name,
            shape: b.shape,
            offset,
            bytes: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        dtype: "f32".into(),
        byte_order: "little".into(),
        blocks,
    };
    let (bin, json) = paths(stem);
    fs::write(bin, payload)?;
    fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a checkpoint into `params`, which must already have the same
/// architecture (block names and sizes are checked).
pub fn load_checkpoint<P: Parameters>(params: &mut P, stem: &Path) -> Result<(), ApproxError> {
    let (bin, json) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(json)?)?;
    let payload = fs::read(bin)?;
    let blocks = params.param_blocks_mut();
    if blocks.len() != manifest.blocks.len() {
        return Err(ApproxError::BlockMismatch(format!(
            "checkpoint has {} blocks, model has {}",
            manifest.blocks.len(),
            blocks.len()
        )));
    }
    for (dst, entry) in blocks.into_iter().zip(&manifest.blocks) {
        if dst.name != entry.name || dst.data.len() * 4 != entry.bytes {
            return Err(ApproxError::BlockMismatch(entry.name.clone()));
        }
        let raw = payload
            .get(entry.offset..entry.offset + entry.bytes)
            .ok_or_else(|| ApproxError::BlockMismatch(format!("{} out of range", entry.name)))?;
        for (d, chunk) in dst.data.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        }
    }
    Ok(())
}
