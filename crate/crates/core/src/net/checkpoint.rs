//! Checkpoint files: one JSON manifest line, then every tensor as
//! little-endian `f32` in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use super::model::{Architecture, BatchNormLayer, ConvLayer, NetworkParams};
use crate::error::{Result, SdaError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub architecture_hash: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub bn_updates: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
    /// Training metadata, opaque at this level.
    pub metadata: serde_json::Value,
}

/// Every stored tensor (learnable and running statistics) in file order.
fn stored_tensors(params: &NetworkParams) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for (i, c) in params.convs.iter().enumerate() {
        let (k, fi, fo) = c.weights.dim();
        out.push((format!("conv{i}.weight"), vec![k, fi, fo], c.weights.as_slice().expect("standard")));
        out.push((format!("conv{i}.bias"), vec![fo], c.bias.as_slice().expect("standard")));
    }
    for (i, n) in params.norms.iter().enumerate() {
        let f = n.gamma.len();
        for (field, arr) in [
            ("gamma", &n.gamma),
            ("beta", &n.beta),
            ("running_mean", &n.running_mean),
            ("running_var", &n.running_var),
        ] {
            out.push((format!("bn{i}.{field}"), vec![f], arr.as_slice().expect("standard")));
        }
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &NetworkParams, metadata: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let tensors = stored_tensors(params);
    let manifest = CheckpointManifest {
        architecture_hash: params.arch.hash(),
        architecture: params.arch,
        seed: params.seed,
        bn_updates: params.norms.iter().map(|n| n.updates).collect(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        metadata,
    };
    let io = |e| SdaError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(io)?;
    for (_, _, data) in &tensors {
        for &v in *data {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkParams, CheckpointManifest)> {
    let path = path.as_ref();
    let io = |e| SdaError::io(path, e);
    let mut reader = BufReader::new(File::open(path).map_err(io)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line).map_err(io)?;
    if line.pop() != Some(b'\n') {
        return Err(SdaError::Checkpoint(format!("{}: missing manifest line", path.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&line)?;
    if manifest.architecture.hash() != manifest.architecture_hash {
        return Err(SdaError::ArchitectureMismatch {
            expected: manifest.architecture_hash.clone(),
            found: manifest.architecture.hash(),
        });
    }

    let mut template = super::model::init_params(manifest.architecture, manifest.seed);
    let expected: Vec<(String, Vec<usize>)> = stored_tensors(&template)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let found: Vec<(String, Vec<usize>)> = manifest.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != found {
        return Err(SdaError::Checkpoint("tensor list does not match the architecture".into()));
    }
    if manifest.bn_updates.len() != template.norms.len() {
        return Err(SdaError::Checkpoint("wrong number of batch-norm layers".into()));
    }

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob).map_err(io)?;
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(SdaError::Checkpoint(format!(
            "blob holds {} bytes, expected {}",
            blob.len(),
            total * 4
        )));
    }
    let mut cursor = blob.as_slice();
    let mut next = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| cursor.read_f32::<LittleEndian>().map(f64::from).map_err(io))
            .collect()
    };

    let mut convs = Vec::with_capacity(template.convs.len());
    for c in &template.convs {
        let dim = c.weights.dim();
        let weights = Array3::from_shape_vec(dim, next(dim.0 * dim.1 * dim.2)?).expect("sized");
        let bias = Array1::from(next(dim.2)?);
        convs.push(ConvLayer { weights, bias });
    }
    let mut norms = Vec::with_capacity(template.norms.len());
    for (n, &updates) in template.norms.iter().zip(&manifest.bn_updates) {
        let f = n.gamma.len();
        norms.push(BatchNormLayer {
            gamma: Array1::from(next(f)?),
            beta: Array1::from(next(f)?),
            running_mean: Array1::from(next(f)?),
            running_var: Array1::from(next(f)?),
            updates,
        });
    }
    if norms.iter().any(|n| n.running_var.iter().any(|&v| v < 0.0)) {
        return Err(SdaError::Checkpoint("negative running variance".into()));
    }
    template.convs = convs;
    template.norms = norms;
    Ok((template, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::init_params;

    #[test]
    fn round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = init_params(Architecture::STANDARD, 9);
        p.norms[1].updates = 4;
        p.norms[1].running_var.fill(0.25);
        save_checkpoint(&path, &p, serde_json::json!({"epoch": 3})).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.metadata["epoch"], 3);
        assert_eq!(back.norms[1].updates, 4);
        for (a, b) in p.learnable().iter().zip(back.learnable()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // A second save of the loaded params is byte-identical.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &back, serde_json::json!({"epoch": 3})).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &init_params(Architecture::TINY, 1), serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(SdaError::Checkpoint(_))));

        let text = std::fs::read(dir.path().join("m.ckpt")).unwrap();
        let patched = String::from_utf8_lossy(&text).replacen("\"feature_maps\":2", "\"feature_maps\":3", 1);
        std::fs::write(&path, patched.as_bytes()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
