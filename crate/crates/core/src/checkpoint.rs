//! Binary model container: magic, version, JSON config blob, named tensor table.
//!
//! All integers are little-endian `u32`; tensor payloads are little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distortion::Stage;
use crate::error::{Error, Result};
use crate::imaging::write_atomic;
use crate::model::{ModelConfig, ModelSet};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"LIDM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_models<T: Real>(models: &ModelSet<T>) -> Self {
        let mut tensors = Vec::new();
        for (prefix, store) in models.stores() {
            for p in store.params() {
                tensors.push(NamedTensor {
                    name: format!("{prefix}.{}", p.name),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.f64() as f32).collect(),
                });
            }
        }
        Self { meta: CheckpointMeta { model: models.config(), stages: models.stages.clone() }, tensors }
    }

    /// Rebuild the networks and fill every parameter by name.
    pub fn to_models<T: Real>(&self) -> Result<ModelSet<T>> {
        let mut models = ModelSet::<T>::new(self.meta.model, 0)?;
        models.stages = self.meta.stages.clone();
        let expected: usize = models.stores().iter().map(|(_, s)| s.len()).sum();
        if expected != self.tensors.len() {
            return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", self.tensors.len())));
        }
        let by_name: std::collections::HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (prefix, store) in models.stores_mut() {
            for p in store.params_mut() {
                let name = format!("{prefix}.{}", p.name);
                let t = by_name.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.shape != p.value.shape() {
                    return Err(Error::Checkpoint(format!("tensor {name}: shape {:?}, model expects {:?}", t.shape, p.value.shape())));
                }
                p.value = Tensor::from_vec(&t.shape, t.data.iter().map(|&v| T::lit(v as f64)).collect());
            }
        }
        Ok(models)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let blob = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, blob.len() as u32);
        out.extend_from_slice(&blob);
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {}: data does not match shape", t.name)));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let blob_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(blob_len)?)?;
        meta.model.validate()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }
}

pub fn save_models<T: Real>(models: &ModelSet<T>, path: &Path) -> Result<()> {
    write_atomic(path, &Checkpoint::from_models(models).to_bytes()?)
}

pub fn load_models<T: Real>(path: &Path) -> Result<ModelSet<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)?.to_models()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelSet<f32> {
        let mut m = ModelSet::new(ModelConfig { image_size: 64, base_channels: 4, ..ModelConfig::default() }, 11).unwrap();
        m.stages.push(Stage::Pretrain);
        m
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let models = small();
        let ck = Checkpoint::from_models(&models);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LIDM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let restored: ModelSet<f32> = back.to_models().unwrap();
        assert_eq!(restored.stages, vec![Stage::Pretrain]);
        for ((_, a), (_, b)) in models.stores().iter().zip(restored.stores().iter()) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&pa.value), bits(&pb.value), "{}", pa.name);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_models(&small()).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut ck = Checkpoint::from_models(&small());
        let gone = ck.tensors.remove(3).name;
        ck.tensors.push(NamedTensor { name: "bogus".into(), shape: vec![1], data: vec![0.0] });
        let err = ck.to_models::<f32>().unwrap_err().to_string();
        assert!(err.contains(&gone), "{err}");
    }
}
