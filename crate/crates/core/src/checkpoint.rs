//! Binary parameter container.
//!
//! Layout: the 8 magic bytes `LYADEQCK`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! one block of little-endian `f64` values per tensor in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LYADEQCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `"model"` or `"dataset"`.
    pub kind: String,
    pub variant: Option<Variant>,
    pub model: Option<ModelConfig>,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (dataset split and class count, training config).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode(manifest: &Manifest, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    if manifest.tensors.len() != tensors.len() {
        return Err(Error::Contract("manifest and tensor list differ in length".into()));
    }
    for (e, t) in manifest.tensors.iter().zip(tensors) {
        if e.shape != t.shape() {
            return Err(Error::shape("checkpoint entry", &e.shape, t.shape()));
        }
    }
    let json = serde_json::to_vec(manifest)?;
    let total: usize = tensors.iter().map(|t| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| Error::Parse("checkpoint manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    let mut at = 20 + len;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let block = bytes
            .get(at..at + 8 * n)
            .ok_or_else(|| Error::Parse(format!("checkpoint block {} truncated", e.name)))?;
        let data = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(&e.shape, data)?);
        at += 8 * n;
    }
    if at != bytes.len() {
        return Err(Error::Parse(format!("{} trailing bytes after checkpoint blocks", bytes.len() - at)));
    }
    Ok((manifest, tensors))
}

/// Write via a temporary sibling and rename, so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn model_entries(params: &ModelParams) -> (Vec<TensorEntry>, Vec<Tensor>) {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |n: &str, t: &Tensor| {
        entries.push(TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        });
        tensors.push(t.clone());
    };
    params.visit(&mut |n, t| push(n, t));
    for (n, t) in params.buffers() {
        push(n, t);
    }
    (entries, tensors)
}

pub fn encode_model(params: &ModelParams, seed: u64, epoch: usize, extra: serde_json::Value) -> Result<Vec<u8>> {
    let (entries, tensors) = model_entries(params);
    let manifest = Manifest {
        kind: "model".into(),
        variant: Some(params.variant),
        model: Some(params.config.clone()),
        seed,
        epoch,
        tensors: entries,
        extra,
    };
    encode(&manifest, &tensors.iter().collect::<Vec<_>>())
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelParams, Manifest)> {
    let (manifest, tensors) = decode(bytes)?;
    if manifest.kind != "model" {
        return Err(Error::Parse(format!("expected a model checkpoint, found {:?}", manifest.kind)));
    }
    let variant = manifest.variant.ok_or_else(|| Error::Parse("model checkpoint without variant".into()))?;
    let config = manifest
        .model
        .clone()
        .ok_or_else(|| Error::Parse("model checkpoint without model config".into()))?;
    let mut params = ModelParams::init(variant, &config, 0)?;
    let (expected, _) = model_entries(&params);
    if expected != manifest.tensors {
        return Err(Error::Parse("checkpoint tensors do not match the model layout".into()));
    }
    let mut it = tensors.into_iter();
    params.visit_mut(&mut |_, t| *t = it.next().expect("layout checked"));
    for (_, t) in params.buffers_mut() {
        *t = it.next().expect("layout checked");
    }
    Ok((params, manifest))
}

pub fn save_model(path: &Path, params: &ModelParams, seed: u64, epoch: usize, extra: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_model(params, seed, epoch, extra)?)
}

pub fn load_model(path: &Path) -> Result<(ModelParams, Manifest)> {
    decode_model(&fs::read(path)?)
}

pub fn encode_dataset(ds: &Dataset, seed: u64) -> Result<Vec<u8>> {
    let labels = Tensor::new(&[ds.len()], ds.labels.iter().map(|&y| y as f64).collect())?;
    let manifest = Manifest {
        kind: "dataset".into(),
        variant: None,
        model: None,
        seed,
        epoch: 0,
        tensors: vec![
            TensorEntry {
                name: "images".into(),
                shape: ds.images.shape().to_vec(),
            },
            TensorEntry {
                name: "labels".into(),
                shape: vec![ds.len()],
            },
        ],
        extra: serde_json::json!({
            "classes": ds.classes,
            "split": ds.split,
            "provenance": ds.provenance,
        }),
    };
    encode(&manifest, &[&ds.images, &labels])
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (manifest, mut tensors) = decode(bytes)?;
    if manifest.kind != "dataset" || tensors.len() != 2 {
        return Err(Error::Parse("expected a dataset container".into()));
    }
    let labels_t = tensors.pop().expect("two tensors");
    let images = tensors.pop().expect("two tensors");
    let labels = labels_t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse(format!("invalid label value {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let extra = &manifest.extra;
    let classes = extra["classes"]
        .as_u64()
        .ok_or_else(|| Error::Parse("dataset container without class count".into()))? as usize;
    let text = |k: &str| extra[k].as_str().unwrap_or_default().to_string();
    Dataset::new(images, labels, classes, &text("split"), &text("provenance"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    #[test]
    fn model_round_trip() {
        let cfg = ModelConfig {
            input_dim: 10,
            state_dim: 6,
            classes: 3,
            icnn_hidden: 4,
            ..Default::default()
        };
        for v in Variant::ALL {
            let p = ModelParams::init(v, &cfg, 11).unwrap();
            let bytes = encode_model(&p, 11, 2, serde_json::json!({"note": 1})).unwrap();
            let (q, m) = decode_model(&bytes).unwrap();
            assert_eq!(p, q);
            assert_eq!(m.epoch, 2);
            assert_eq!(m.seed, 11);
            assert_eq!(m.variant, Some(v));
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let ds = synth_blobs(3, 20, 2.5, 9).unwrap();
        let back = decode_dataset(&encode_dataset(&ds, 9).unwrap()).unwrap();
        assert_eq!(ds, back);
        for (a, b) in ds.images.data().iter().zip(back.images.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_containers() {
        let ds = synth_blobs(2, 3, 1.0, 0).unwrap();
        let bytes = encode_dataset(&ds, 0).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            input_dim: 4,
            state_dim: 4,
            classes: 2,
            icnn_hidden: 3,
            ..Default::default()
        };
        let p = ModelParams::init(Variant::LyaDeq, &cfg, 1).unwrap();
        save_model(&path, &p, 1, 0, serde_json::Value::Null).unwrap();
        assert_eq!(load_model(&path).unwrap().0, p);
        assert!(!path.with_extension("tmp").exists());
    }
}
