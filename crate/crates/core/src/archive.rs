//! Portable array archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "CFDARR1\n"
//! u32     entry count
//! entry*  u16 name_len, name (utf-8)
//!         u8 dtype (0 = u8, 1 = f32, 2 = f64), u8 ndim, u64 dims[ndim]
//!         u32 header_len, header (JSON object of integer fields, e.g. block/channel)
//!         data, row-major
//! ```
//!
//! Masks are stored as u8 0/1, evidence maps as f32, parameters in the
//! scalar type they were trained in so snapshots round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CfdError, Result};
use crate::masks::{BinaryMask, EvidenceMap};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CFDARR1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::U8),
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            c => Err(CfdError::Archive(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Converts into the requested scalar type. Exact when the stored dtype
    /// matches `T`; widening f32 -> f64 is also exact.
    pub fn to_scalars<T: Scalar>(&self) -> Vec<T> {
        match self {
            ArrayData::U8(v) => v.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect(),
            ArrayData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        }
    }

    pub fn from_scalars<T: Scalar>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F64 => ArrayData::F64(values.iter().map(|v| v.to_f64_lossless()).collect()),
            _ => ArrayData::F32(values.iter().map(|v| v.to_f64_lossless() as f32).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub header: BTreeMap<String, i64>,
    pub data: ArrayData,
}

impl ArrayEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CfdError::Archive(format!(
                "entry {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            header: BTreeMap::new(),
            data,
        })
    }

    pub fn with_header(mut self, key: &str, value: i64) -> Self {
        self.header.insert(key.to_string(), value);
        self
    }

    pub fn from_mask(name: impl Into<String>, mask: &BinaryMask) -> Self {
        let (h, w) = mask.dims();
        let data = mask.as_slice().iter().map(|&b| b as u8).collect();
        ArrayEntry::new(name, vec![h, w], ArrayData::U8(data))
            .expect("mask dims consistent")
            .with_header("height", h as i64)
            .with_header("width", w as i64)
    }

    pub fn to_mask(&self) -> Result<BinaryMask> {
        let ArrayData::U8(data) = &self.data else {
            return Err(CfdError::Archive(format!("entry {} is not a u8 mask", self.name)));
        };
        let [h, w] = self.shape[..] else {
            return Err(CfdError::Archive(format!("entry {} is not 2-D", self.name)));
        };
        if data.iter().any(|&b| b > 1) {
            return Err(CfdError::Archive(format!("entry {} holds non 0/1 bytes", self.name)));
        }
        BinaryMask::new(h, w, data.iter().map(|&b| b == 1).collect())
    }

    pub fn from_evidence<T: Scalar>(name: impl Into<String>, map: &EvidenceMap<T>) -> Self {
        let (h, w) = map.dims();
        let data = map.values().iter().map(|v| v.to_f64_lossless() as f32).collect();
        ArrayEntry::new(name, vec![h, w], ArrayData::F32(data))
            .expect("evidence dims consistent")
            .with_header("block", map.block as i64)
            .with_header("channel", map.channel as i64)
            .with_header("height", h as i64)
            .with_header("width", w as i64)
    }

    pub fn to_evidence<T: Scalar>(&self) -> Result<EvidenceMap<T>> {
        let field = |k: &str| {
            self.header
                .get(k)
                .copied()
                .ok_or_else(|| CfdError::Archive(format!("entry {} lacks header field {k}", self.name)))
        };
        let [h, w] = self.shape[..] else {
            return Err(CfdError::Archive(format!("entry {} is not 2-D", self.name)));
        };
        EvidenceMap::new(
            field("block")? as usize,
            field("channel")? as usize,
            h,
            w,
            self.data.to_scalars(),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<ArrayEntry>,
}

impl Archive {
    pub fn push(&mut self, entry: ArrayEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.data.dtype().code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let header = serde_json::to_vec(&e.header).expect("integer map serializes");
            out.extend_from_slice(&(header.len() as u32).to_le_bytes());
            out.extend_from_slice(&header);
            match &e.data {
                ArrayData::U8(v) => out.extend_from_slice(v),
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CfdError::Archive("bad magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len)?)
                .map_err(|_| CfdError::Archive("entry name is not utf-8".into()))?;
            let [dtype, ndim] = read_array::<2>(&mut r)?;
            let dtype = DType::from_code(dtype)?;
            let shape = (0..ndim)
                .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let header_len = read_u32(&mut r)? as usize;
            let header: BTreeMap<String, i64> = serde_json::from_slice(&read_vec(&mut r, header_len)?)?;
            let n: usize = shape.iter().product();
            let raw = read_vec(&mut r, n * dtype.width())?;
            let data = match dtype {
                DType::U8 => ArrayData::U8(raw),
                DType::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            entries.push(ArrayEntry {
                name,
                shape,
                header,
                data,
            });
        }
        if !r.is_empty() {
            return Err(CfdError::Archive(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| CfdError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CfdError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CfdError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CfdError::Archive("unexpected end of archive".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_vec(r: &mut &[u8], n: usize) -> Result<Vec<u8>> {
    if r.len() < n {
        return Err(CfdError::Archive("unexpected end of archive".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head.to_vec())
}
