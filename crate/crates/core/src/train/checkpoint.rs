//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RSA1" | version u32 | config_len u64 | config UTF-8
//! record_count u64
//! per record: name_len u32 | name | dtype u8 | rank u32 | dims u64 * rank | payload
//! crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: [u8; 4] = *b"RSA1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn tensor<F: Float>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * F::DTYPE.size());
        t.data().iter().for_each(|x| x.write_le(&mut bytes));
        let payload = match F::DTYPE {
            DType::F32 => Payload::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => Payload::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U64 => unreachable!("no Float is stored as u64"),
        };
        Record {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn u64s(name: impl Into<String>, values: Vec<u64>) -> Self {
        Record {
            name: name.into(),
            shape: vec![values.len()],
            payload: Payload::U64(values),
        }
    }

    pub fn f64s(name: impl Into<String>, values: Vec<f64>) -> Self {
        Record {
            name: name.into(),
            shape: vec![values.len()],
            payload: Payload::F64(values),
        }
    }

    /// Reads the record as a tensor of `F`; any other dtype is an error.
    pub fn to_tensor<F: Float>(&self) -> Result<Tensor<F>> {
        let mismatch = || {
            Error::Checkpoint(CheckpointError::DtypeMismatch {
                name: self.name.clone(),
                found: self.payload.dtype().name(),
                expected: F::DTYPE.name(),
            })
        };
        let mut bytes = Vec::new();
        match (&self.payload, F::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            (Payload::F64(v), DType::F64) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            _ => return Err(mismatch()),
        }
        let data = bytes.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.payload {
            Payload::U64(v) => Ok(v),
            p => Err(CheckpointError::DtypeMismatch {
                name: self.name.clone(),
                found: p.dtype().name(),
                expected: "u64",
            }
            .into()),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::F64(v) => Ok(v),
            p => Err(CheckpointError::DtypeMismatch {
                name: self.name.clone(),
                found: p.dtype().name(),
                expected: "f64",
            }
            .into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Malformed(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| CheckpointError::Malformed(format!("length {n} overflows")))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing record {name:?}")).into())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.dtype().code());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Malformed(format!("only {} bytes", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if found != VERSION {
            return Err(CheckpointError::VersionSkew { found, expected: VERSION });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Malformed("missing CRC".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }

        let mut r = Reader { bytes: body, pos: 8 };
        let n = r.len()?;
        let config = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;
        let count = r.len()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?;
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype code {code} for {name:?}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(dtype.size()).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| CheckpointError::Malformed(format!("shape {shape:?} of {name:?} is too large")))?;
            let raw = r.take(numel * dtype.size())?;
            let payload = match dtype {
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::U64 => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            debug_assert_eq!(payload.len(), numel);
            records.push(Record { name, shape, payload });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}
