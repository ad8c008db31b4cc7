//! `.rscope` tensor archives.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "RSCOPE01"
//! version      u32       currently 1
//! meta_count   u32
//!   key_len    u32, key bytes (UTF-8)
//!   value_len  u32, value bytes (UTF-8)
//! record_count u64
//!   name_len   u32, name bytes (UTF-8, non-empty, unique)
//!   dtype      u8        1 = f32, 2 = f64, 3 = u8, 4 = i64
//!   rank       u32
//!   extents    rank x u64
//!   data       product(extents) x width(dtype) bytes, row-major
//! ```
//!
//! Metadata entries are written in ascending key order. Nothing may follow the
//! last record.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"RSCOPE01";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "rscope";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error after {bytes_written} bytes: {source}")]
    Io {
        #[source]
        source: io::Error,
        bytes_written: u64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt record `{record}`: {detail}")]
    Corrupt { record: String, detail: String },

    #[error("unsupported version: {0}")]
    Version(String),

    #[error("invalid archive: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
            DType::I64 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            4 => Some(DType::I64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::I64 => 8,
        }
    }
}

/// Flat row-major buffer. Equality is bitwise, so NaN payloads compare equal
/// to themselves and `0.0 != -0.0`.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        use TensorData::*;
        match (self, other) {
            (F32(a), F32(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (F64(a), F64(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (U8(a), U8(b)) => a == b,
            (I64(a), I64(b)) => a == b,
            _ => false,
        }
    }
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le<W: Write>(&self, w: &mut W) -> io::Result<()> {
        match self {
            TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            TensorData::U8(v) => w.write_all(v),
            TensorData::I64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
        }
    }

    fn from_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
            DType::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<u64>, data: TensorData) -> Result<Self, StoreError> {
        let record = TensorRecord { name: name.into(), shape, data };
        record.validate()?;
        Ok(record)
    }

    pub fn f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self, StoreError> {
        Self::new(name, shape.iter().map(|&d| d as u64).collect(), TensorData::F64(data))
    }

    pub fn i64(name: impl Into<String>, shape: &[usize], data: Vec<i64>) -> Result<Self, StoreError> {
        Self::new(name, shape.iter().map(|&d| d as u64).collect(), TensorData::I64(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn num_elements(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    pub fn shape_usize(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.name.is_empty() {
            return Err(StoreError::Invalid("record name is empty".into()));
        }
        let n = self.num_elements().ok_or_else(|| StoreError::Corrupt {
            record: self.name.clone(),
            detail: "element count overflows u64".into(),
        })?;
        if n != self.data.len() as u64 {
            return Err(StoreError::Corrupt {
                record: self.name.clone(),
                detail: format!("shape {:?} implies {n} elements, buffer holds {}", self.shape, self.data.len()),
            });
        }
        Ok(())
    }

    /// Data widened to f64. Integers convert exactly up to 2^53.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub version: u32,
    pub records: Vec<TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl Default for TensorArchive {
    fn default() -> Self {
        Self::new()
    }
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive { version: FORMAT_VERSION, records: Vec::new(), metadata: BTreeMap::new() }
    }

    /// Appends a record, rejecting duplicate names.
    pub fn push(&mut self, record: TensorRecord) -> Result<(), StoreError> {
        record.validate()?;
        if self.get(&record.name).is_some() {
            return Err(StoreError::Invalid(format!("duplicate record name `{}`", record.name)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.name.as_str()) {
                return Err(StoreError::Invalid(format!("duplicate record name `{}`", r.name)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let mut buf = Vec::new();
        write_archive(self, &mut buf)?;
        Ok(buf)
    }
}

struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn len_u32(len: usize, what: &str) -> Result<u32, StoreError> {
    u32::try_from(len).map_err(|_| StoreError::Invalid(format!("{what} longer than u32::MAX bytes")))
}

/// Serializes `archive` into `sink`, returning the number of bytes written.
pub fn write_archive<W: Write>(archive: &TensorArchive, sink: W) -> Result<u64, StoreError> {
    archive.validate()?;
    if archive.version != FORMAT_VERSION {
        return Err(StoreError::Version(format!("cannot write version {}", archive.version)));
    }
    for (k, v) in &archive.metadata {
        len_u32(k.len(), "metadata key")?;
        len_u32(v.len(), "metadata value")?;
    }
    for r in &archive.records {
        len_u32(r.name.len(), "record name")?;
        len_u32(r.shape.len(), "record rank")?;
    }

    let mut w = CountingWriter { inner: sink, count: 0 };
    let result = (|| -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&archive.version.to_le_bytes())?;
        w.write_all(&(archive.metadata.len() as u32).to_le_bytes())?;
        for (k, v) in &archive.metadata {
            w.write_all(&(k.len() as u32).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            w.write_all(&(v.len() as u32).to_le_bytes())?;
            w.write_all(v.as_bytes())?;
        }
        w.write_all(&(archive.records.len() as u64).to_le_bytes())?;
        for r in &archive.records {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&[r.dtype().code()])?;
            w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
            for &d in &r.shape {
                w.write_all(&d.to_le_bytes())?;
            }
            r.data.write_le(&mut w)?;
        }
        w.flush()
    })();
    match result {
        Ok(()) => Ok(w.count),
        Err(source) => Err(StoreError::Io { source, bytes_written: w.count }),
    }
}

/// Reads a complete archive from `source`.
pub fn read_archive<R: Read>(mut source: R) -> Result<TensorArchive, StoreError> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|source| StoreError::Io { source, bytes_written: 0 })?;
    decode_archive(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn header_err(what: &str) -> StoreError {
    StoreError::Format(format!("truncated header while reading {what}"))
}

fn utf8(bytes: &[u8], what: &str) -> Result<String, StoreError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| StoreError::Format(format!("{what} is not valid UTF-8")))
}

/// Parses an archive from an in-memory buffer.
pub fn decode_archive(bytes: &[u8]) -> Result<TensorArchive, StoreError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(MAGIC.len()).ok_or_else(|| StoreError::Format("missing magic bytes".into()))?;
    if magic != MAGIC {
        return Err(StoreError::Format("bad magic bytes".into()));
    }
    let version = c.u32().ok_or_else(|| header_err("version"))?;
    if version != FORMAT_VERSION {
        return Err(StoreError::Version(format!("archive version {version}, reader supports {FORMAT_VERSION}")));
    }

    let meta_count = c.u32().ok_or_else(|| header_err("metadata count"))?;
    let mut metadata = BTreeMap::new();
    for i in 0..meta_count {
        let klen = c.u32().ok_or_else(|| header_err("metadata key length"))? as usize;
        let key = utf8(c.take(klen).ok_or_else(|| header_err("metadata key"))?, "metadata key")?;
        let vlen = c.u32().ok_or_else(|| header_err("metadata value length"))? as usize;
        let value = utf8(c.take(vlen).ok_or_else(|| header_err("metadata value"))?, "metadata value")?;
        if metadata.insert(key.clone(), value).is_some() {
            return Err(StoreError::Format(format!("duplicate metadata key `{key}` (entry {i})")));
        }
    }

    let record_count = c.u64().ok_or_else(|| header_err("record count"))?;
    let mut archive = TensorArchive { version, records: Vec::new(), metadata };
    let mut seen = HashSet::new();
    for index in 0..record_count {
        let placeholder = format!("#{index}");
        let corrupt = |name: &str, detail: &str| StoreError::Corrupt { record: name.to_string(), detail: detail.to_string() };

        let nlen = c.u32().ok_or_else(|| corrupt(&placeholder, "truncated name length"))? as usize;
        let name_bytes = c.take(nlen).ok_or_else(|| corrupt(&placeholder, "truncated name"))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| corrupt(&placeholder, "name is not valid UTF-8"))?;
        if name.is_empty() {
            return Err(corrupt(&placeholder, "empty record name"));
        }
        if !seen.insert(name.clone()) {
            return Err(corrupt(&name, "duplicate record name"));
        }

        let code = c.u8().ok_or_else(|| corrupt(&name, "truncated dtype"))?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| StoreError::Version(format!("record `{name}` has unknown dtype code {code}")))?;
        let rank = c.u32().ok_or_else(|| corrupt(&name, "truncated rank"))? as usize;
        if rank.checked_mul(8).map_or(true, |n| n > c.remaining()) {
            return Err(corrupt(&name, "truncated extents"));
        }
        let shape: Vec<u64> = (0..rank).map(|_| c.u64().unwrap()).collect();
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(&name, "element count overflows u64"))?;
        let nbytes = count
            .checked_mul(dtype.width() as u64)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| corrupt(&name, "byte length overflows"))?;
        let raw = c.take(nbytes).ok_or_else(|| {
            corrupt(&name, &format!("truncated data: need {nbytes} bytes, {} remain", bytes.len() - c.pos))
        })?;
        archive.records.push(TensorRecord { name, shape, data: TensorData::from_le(dtype, raw) });
    }
    if c.remaining() != 0 {
        return Err(StoreError::Format(format!("{} trailing bytes after last record", c.remaining())));
    }
    Ok(archive)
}
