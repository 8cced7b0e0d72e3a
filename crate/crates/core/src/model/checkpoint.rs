//! Single-file checkpoint archive: a JSON header describing the model
//! followed by the named parameter tensors as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, BlockId, ModelError, ModelSplit, UNetConfig};

const MAGIC: &[u8; 8] = b"MDDUNET1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: UNetConfig,
    pub seed: u64,
    pub phase: String,
    pub frozen_blocks: Vec<BlockId>,
    pub tensors: Vec<TensorEntry>,
}

impl ModelSplit {
    /// Write the model to `path`. `phase` is "pretrained" or "adapted".
    pub fn save_checkpoint(&self, path: &Path, phase: &str) -> Result<(), ModelError> {
        let tensors: Vec<TensorEntry> = self
            .arena()
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        let header = CheckpointHeader {
            version: VERSION,
            config: self.config,
            seed: self.seed,
            phase: phase.to_string(),
            frozen_blocks: self.frozen_blocks().to_vec(),
            tensors,
        };
        let hjson = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&(hjson.len() as u64).to_le_bytes())?;
            w.write_all(&hjson)?;
            for (_, p) in self.arena().iter() {
                for v in p.value.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ModelError::Checkpoint("truncated file".into()))?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut lenb = [0u8; 8];
    r.read_exact(&mut lenb)
        .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
    let hlen = u64::from_le_bytes(lenb) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson)
        .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&hjson)
        .map_err(|e| ModelError::Checkpoint(format!("corrupt header: {e}")))?;
    if header.version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "version mismatch: file {} vs supported {VERSION}",
            header.version
        )));
    }
    Ok(header)
}

/// Rebuild a model from a checkpoint. Returns the model and its phase tag.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSplit, String), ModelError> {
    let header = read_checkpoint_header(path)?;
    let mut r = BufReader::new(File::open(path)?);
    let mut pre = [0u8; 16];
    r.read_exact(&mut pre)?;
    let hlen = u64::from_le_bytes(pre[8..16].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; hlen];
    r.read_exact(&mut buf)?;

    let mut model = build_model(header.config, header.seed)?;
    for (entry, idx) in header.tensors.iter().zip(0..) {
        let p = model.arena().iter().nth(idx).map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()));
        let (id, name, shape) = p.ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        if name != entry.name || shape != entry.shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor mismatch: file has {} {:?}, model expects {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| ModelError::Checkpoint(format!("truncated payload at {}", entry.name)))?;
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ndarray::ArrayD::from_shape_vec(entry.shape.clone(), vals)
            .map_err(|e| ModelError::Checkpoint(format!("shape error at {}: {e}", entry.name)))?;
        model.arena_mut().get_mut(id).value = arr;
    }
    let frozen = header.frozen_blocks.clone();
    model.set_frozen(&frozen)?;
    Ok((model, header.phase))
}
