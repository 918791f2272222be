//! Parameter checkpoint format: a flat binary file of little-endian float64
//! values plus a JSON manifest listing (name, shape, byte offset) for each
//! tensor. Model hyperparameters are embedded in the manifest.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value in the `.bin` file.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Arbitrary model/run configuration carried with the weights.
    pub hyperparameters: Value,
    pub tensors: Vec<ManifestTensor>,
}

/// One named tensor to persist or the result of loading one.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn binary_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Write `<stem>.json` and `<stem>.bin`.
pub fn save(stem: &Path, tensors: &[NamedTensor], hyperparameters: Value) -> Result<()> {
    let mut manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        hyperparameters,
        tensors: Vec::with_capacity(tensors.len()),
    };
    let mut bin = std::io::BufWriter::new(std::fs::File::create(binary_path(stem))?);
    let mut offset = 0u64;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Validation(format!(
                "tensor {} shape {:?} does not match {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        manifest.tensors.push(ManifestTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        for v in &t.data {
            bin.write_all(&v.to_le_bytes())?;
        }
        offset += (t.data.len() * 8) as u64;
    }
    bin.flush()?;
    std::fs::write(
        manifest_path(stem),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Read a checkpoint written by [`save`].
pub fn load(stem: &Path) -> Result<(Vec<NamedTensor>, Value)> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(stem))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let mut bin = Vec::new();
    std::fs::File::open(binary_path(stem))?.read_to_end(&mut bin)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let count: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + count * 8;
        if end > bin.len() {
            return Err(Error::Schema(format!(
                "tensor {} extends past the end of the binary file",
                t.name
            )));
        }
        let data: Vec<f64> = bin[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(NamedTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data,
        });
    }
    Ok((tensors, manifest.hyperparameters))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_tensors_and_hyperparameters() {
        let dir = std::env::temp_dir().join("inkseg_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("model");
        let tensors = vec![
            NamedTensor {
                name: "w".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0],
            },
            NamedTensor {
                name: "b".into(),
                shape: vec![3],
                data: vec![0.5, 0.25, -0.125],
            },
        ];
        let hyper = serde_json::json!({"hidden_dim": 8, "kind": "test"});
        save(&stem, &tensors, hyper.clone()).unwrap();
        let (loaded, loaded_hyper) = load(&stem).unwrap();
        assert_eq!(loaded, tensors);
        assert_eq!(loaded_hyper, hyper);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("inkseg_ckpt_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let bad = vec![NamedTensor {
            name: "w".into(),
            shape: vec![2, 2],
            data: vec![1.0],
        }];
        assert!(save(&dir.join("bad"), &bad, Value::Null).is_err());
    }
}
