//! `L3CK` checkpoints: named tensors plus JSON metadata.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "L3CK"            4 bytes
//! version           u32
//! metadata length   u32, then that many bytes of UTF-8 JSON
//! tensor count      u32
//! per tensor, names in lexicographic order:
//!   name length     u16, then UTF-8 name
//!   rank            u8
//!   extents         u64 × rank
//!   dtype           u8 (0 = f32, 1 = f64)
//!   data            little-endian elements
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TensorMap;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"L3CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converted copy; exact when the stored dtype already is `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Why a checkpoint was written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    BestAcc,
    BestAuc,
    Final,
    Merged,
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    /// 1-based epoch the tensors come from; 0 before training.
    pub epoch: usize,
    pub fold: usize,
    pub seed: u64,
    pub config_hash: String,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
    /// Adapters have been folded into the frozen kernels.
    pub merged: bool,
    /// Frozen tensors are stored; otherwise they are rebuilt from `config`.
    pub includes_backbone: bool,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, AnyTensor>,
}

impl Checkpoint {
    pub fn from_map<T: Scalar>(meta: CheckpointMeta, map: &TensorMap<T>) -> Self
    where
        AnyTensor: From<Tensor<T>>,
    {
        let tensors = map.iter().map(|(k, v)| (k.clone(), AnyTensor::from(v.clone()))).collect();
        Self { meta, tensors }
    }

    pub fn tensor_map<T: Scalar>(&self) -> TensorMap<T> {
        self.tensors.iter().map(|(k, v)| (k.clone(), v.to_tensor())).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::argument(format!("metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::argument(format!("tensor name too long: {name:?}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::argument(format!("rank of {name:?} exceeds 255")))?;
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.push(t.dtype().code());
            match t {
                AnyTensor::F32(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(x) => x.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"L3CK\"")));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at as u64, format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let at = r.pos;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::format(at as u64, format!("metadata: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(at as u64 + 2, "tensor name is not UTF-8"))?
                .to_string();
            if previous.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::format(at as u64, format!("tensor {name:?} out of lexicographic order")));
            }
            let at = r.pos;
            let rank = r.u8("rank")? as usize;
            if rank == 0 {
                return Err(Error::format(at as u64, format!("tensor {name:?} has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let e = r.u64("extent")?;
                shape.push(usize::try_from(e).map_err(|_| Error::format(at as u64, "extent too large"))?);
            }
            let at = r.pos;
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::format(at as u64, format!("unknown dtype code {code}")))?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::format(at as u64, "tensor size overflows"))?;
            let data = r.take(count, "tensor data")?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::from_vec(shape, data.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::from_vec(shape, data.chunks_exact(8).map(f64::read_le).collect())?),
            };
            previous = Some(name.clone());
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::decode(&bytes)
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::argument(format!("{what} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what} at byte {}", self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            kind: CheckpointKind::BestAuc,
            epoch: 3,
            fold: 1,
            seed: 7,
            config_hash: "0123456789abcdef".into(),
            val_acc: Some(0.75),
            val_auc: Some(0.8125),
            merged: false,
            includes_backbone: false,
            config: RunConfig::default(),
        }
    }

    fn sample() -> Checkpoint {
        let mut r = RandomSource::new(2);
        let mut tensors = BTreeMap::new();
        tensors.insert("b.x".to_string(), AnyTensor::F32(Tensor::randn([2, 3], &mut r, 0.0, 1.0).unwrap()));
        tensors.insert("a.y".to_string(), AnyTensor::F64(Tensor::randn([4], &mut r, 0.0, 1.0).unwrap()));
        tensors.insert("c".to_string(), AnyTensor::F32(Tensor::from_vec([1], vec![1.5f32]).unwrap()));
        Checkpoint { meta: meta(), tensors }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn layout_of_first_tensor() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"L3CK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let p = 12 + meta_len;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 3);
        // "a.y" sorts first: u16 length, name, rank 1, extent 4, dtype 1.
        assert_eq!(&bytes[p + 4..p + 6], &3u16.to_le_bytes());
        assert_eq!(&bytes[p + 6..p + 9], b"a.y");
        assert_eq!(bytes[p + 9], 1);
        assert_eq!(&bytes[p + 10..p + 18], &4u64.to_le_bytes());
        assert_eq!(bytes[p + 18], 1);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 4, .. })));
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn conversion_keeps_values() {
        let ck = sample();
        let m: TensorMap<f64> = ck.tensor_map();
        assert_eq!(m["c"].data(), &[1.5]);
        assert_eq!(m["a.y"], ck.tensors["a.y"].to_tensor::<f64>());
    }
}
