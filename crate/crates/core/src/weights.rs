//! GGW1 weight files.
//!
//! Layout: the magic `GGW1`, a little-endian `u64` header length, a JSON
//! header (dtype, model-spec hash and spec, tensor names and shapes), then
//! every tensor as raw little-endian `f32` values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaitModel, ModelSpec};
use crate::nn::Module;
use crate::optim::{Adam, AdamState};
use crate::skeleton::SkeletonTopology;

pub const MAGIC: &[u8; 4] = b"GGW1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub spec_hash: String,
    pub model_spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// A decoded file: header plus tensor values in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub header: Header,
    pub values: Vec<Vec<f32>>,
}

impl WeightFile {
    pub fn new(spec: &ModelSpec) -> Self {
        WeightFile {
            header: Header {
                format: "GGW1".into(),
                version: VERSION,
                dtype: "f32".into(),
                spec_hash: spec.hash(),
                model_spec: spec.clone(),
                tensors: Vec::new(),
                extra: serde_json::Value::Null,
            },
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f32]) {
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        self.values.push(values.to_vec());
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| (self.header.tensors[i].shape.as_slice(), self.values[i].as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let body: usize = self.values.iter().map(|v| v.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + header.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a GGW1 file".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body_start = 12usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..body_start])
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        if header.format != "GGW1" || header.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported format {} version {}",
                header.format, header.version
            )));
        }
        if header.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        let mut offset = body_start;
        let mut values = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let end = offset + n * 4;
            if end > bytes.len() {
                return Err(Error::Format(format!("truncated data for tensor {}", t.name)));
            }
            values.push(
                bytes[offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor data",
                bytes.len() - offset
            )));
        }
        Ok(WeightFile { header, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Every parameter and running statistic of the model.
pub fn save_weights(model: &GaitModel<f32>) -> Vec<u8> {
    let mut file = WeightFile::new(model.spec());
    model.visit(&mut |p| file.push(&p.name, p.tensor.shape(), p.values()));
    file.to_bytes()
}

/// Copies stored values into `model`, checking every name and shape, then the spec hash.
pub fn load_weights_into(model: &mut GaitModel<f32>, bytes: &[u8]) -> Result<()> {
    let file = WeightFile::from_bytes(bytes)?;
    let mut expected = Vec::new();
    model.visit(&mut |p| expected.push((p.name.clone(), p.tensor.shape().to_vec())));
    if expected.len() != file.header.tensors.len() {
        return Err(Error::Shape(format!(
            "model has {} tensors, file has {}",
            expected.len(),
            file.header.tensors.len()
        )));
    }
    for ((name, shape), t) in expected.iter().zip(&file.header.tensors) {
        if *name != t.name {
            return Err(Error::Shape(format!("expected parameter {name}, file has {}", t.name)));
        }
        if *shape != t.shape {
            return Err(Error::Shape(format!(
                "parameter {name}: model shape {shape:?}, file shape {:?}",
                t.shape
            )));
        }
    }
    let hash = model.spec().hash();
    if hash != file.header.spec_hash {
        return Err(Error::SpecMismatch {
            expected: hash,
            found: file.header.spec_hash,
        });
    }
    let mut values = file.values.into_iter();
    model.visit_mut(&mut |p| {
        let v = values.next().expect("count checked");
        p.tensor.data_mut().copy_from_slice(&v);
    });
    Ok(())
}

/// Rebuilds a model from the spec stored in the file.
pub fn load_weights(bytes: &[u8], topology: &SkeletonTopology) -> Result<GaitModel<f32>> {
    let file = WeightFile::from_bytes(bytes)?;
    let mut model = GaitModel::new(&file.header.model_spec, topology, 0)?;
    load_weights_into(&mut model, bytes)?;
    Ok(model)
}

pub fn save_weights_file(model: &GaitModel<f32>, path: &Path) -> Result<()> {
    fs::write(path, save_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights_file(path: &Path, topology: &SkeletonTopology) -> Result<GaitModel<f32>> {
    load_weights(&fs::read(path).map_err(|e| Error::io(path, e))?, topology)
}

/// Optimizer moments as a sidecar file: `m/<name>` and `v/<name>` per parameter,
/// step counts in the header's `extra` field.
pub fn save_optimizer(adam: &Adam<f32>, spec: &ModelSpec) -> Vec<u8> {
    let mut file = WeightFile::new(spec);
    let mut steps = Vec::new();
    for (name, s) in &adam.states {
        file.push(&format!("m/{name}"), &[s.m.len()], &s.m);
        file.push(&format!("v/{name}"), &[s.v.len()], &s.v);
        steps.push(s.step);
    }
    file.header.extra = serde_json::json!({ "steps": steps });
    file.to_bytes()
}

pub fn load_optimizer(bytes: &[u8]) -> Result<Adam<f32>> {
    let file = WeightFile::from_bytes(bytes)?;
    let steps: Vec<u64> = serde_json::from_value(file.header.extra["steps"].clone())
        .map_err(|e| Error::Format(format!("optimizer steps: {e}")))?;
    if file.values.len() != 2 * steps.len() {
        return Err(Error::Format("optimizer file is inconsistent".into()));
    }
    let mut states = Vec::new();
    for (i, step) in steps.into_iter().enumerate() {
        let name = file.header.tensors[2 * i]
            .name
            .strip_prefix("m/")
            .ok_or_else(|| Error::Format("optimizer tensor order".into()))?
            .to_string();
        states.push((
            name,
            AdamState {
                m: file.values[2 * i].clone(),
                v: file.values[2 * i + 1].clone(),
                step,
            },
        ));
    }
    Ok(Adam { states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GaitModel<f32> {
        GaitModel::new(&ModelSpec::default().scaled(8), &SkeletonTopology::coco17(), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = tiny();
        let bytes = save_weights(&model);
        let back = load_weights(&bytes, &SkeletonTopology::coco17()).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        model.visit(&mut |p| a.push((p.name.clone(), p.tensor.shape().to_vec(), p.values().to_vec())));
        back.visit(&mut |p| b.push((p.name.clone(), p.tensor.shape().to_vec(), p.values().to_vec())));
        assert_eq!(a, b);
        assert_eq!(save_weights(&back), bytes);
    }

    #[test]
    fn corrupted_magic_and_truncation() {
        let mut bytes = save_weights(&tiny());
        assert!(matches!(
            WeightFile::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(WeightFile::from_bytes(b"GG"), Err(Error::Format(_))));
    }

    #[test]
    fn incompatible_shapes_name_the_parameter() {
        let bytes = save_weights(&tiny());
        let mut other = GaitModel::new(&ModelSpec::default().scaled(4), &SkeletonTopology::coco17(), 5).unwrap();
        match load_weights_into(&mut other, &bytes) {
            Err(Error::Shape(msg)) => assert!(msg.contains("input_bn") || msg.contains("blocks."), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hash_mismatch_with_compatible_shapes() {
        let model = tiny();
        let mut file = WeightFile::from_bytes(&save_weights(&model)).unwrap();
        file.header.spec_hash = "0".repeat(64);
        let mut target = tiny();
        assert!(matches!(
            load_weights_into(&mut target, &file.to_bytes()),
            Err(Error::SpecMismatch { .. })
        ));
    }

    #[test]
    fn optimizer_sidecar_round_trip() {
        let model = tiny();
        let mut adam = Adam::for_module(&model);
        adam.states[0].1.m[0] = 0.25;
        adam.states[1].1.step = 7;
        let back = load_optimizer(&save_optimizer(&adam, model.spec())).unwrap();
        assert_eq!(back.states, adam.states);
    }
}
