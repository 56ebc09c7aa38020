//! Named-tensor archive: a JSON header describing the architecture and the
//! tensor index, followed by raw little-endian f32 data. Save -> load ->
//! forward round-trips bit-exactly at 32-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::models::{ArchDescriptor, Mode, ModelGraph, NamedParam};
use crate::{CoreError, Result};

const MAGIC: &[u8; 8] = b"SCGTENS1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    arch: ArchDescriptor,
    mode: Mode,
    tensors: Vec<TensorEntry>,
}

pub fn save_model(graph: &ModelGraph<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = ArchiveHeader {
        arch: graph.arch.clone(),
        mode: graph.mode,
        tensors: graph
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC).map_err(|e| CoreError::io(path, e))?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| CoreError::io(path, e))?;
    w.write_all(&header_json).map_err(|e| CoreError::io(path, e))?;
    for p in &graph.params {
        write_f32s(&mut w, p.value.iter().copied(), path)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph<f32>> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| CoreError::io(path, e))?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "{} is not a model archive (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| CoreError::io(path, e))?;
    let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_json)
        .map_err(|e| CoreError::io(path, e))?;
    let header: ArchiveHeader = serde_json::from_slice(&header_json)?;
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = read_f32s(&mut r, n, path)?;
        let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| CoreError::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        params.push(NamedParam {
            name: entry.name,
            value,
        });
    }
    Ok(ModelGraph {
        arch: header.arch,
        params,
        mode: header.mode,
    })
}

pub fn write_f32s<W: Write>(
    w: &mut W,
    values: impl Iterator<Item = f32>,
    path: &Path,
) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| CoreError::io(path, e))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_generator, GeneratorSpec};

    #[test]
    fn model_round_trip_is_bit_exact() {
        let spec = GeneratorSpec {
            base_channels: 2,
            ..Default::default()
        };
        let g = build_generator::<f32>(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        save_model(&g, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.arch, g.arch);
        assert_eq!(loaded.params.len(), g.params.len());
        for (a, b) in g.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(
                a.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_model(&path),
            Err(CoreError::Checkpoint(_))
        ));
    }
}
