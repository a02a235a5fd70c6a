//! Flat tensor archive with a fixed little-endian byte layout.
//!
//! Layout: magic `HPUT` (4 bytes), version `u32` LE (currently 1), record
//! count `u32` LE, then per record: name length `u16` LE, UTF-8 name,
//! element-kind `u8` (0 = uint8, 1 = float32, 2 = int32, 3 = UTF-8 text),
//! rank `u8`, `rank` extents as `u32` LE, and the payload row-major LE.
//! Record names are unique and payload length always equals element size ×
//! product of extents, so files round-trip bitwise on any host.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub const MAGIC: [u8; 4] = *b"HPUT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("bad magic {found:?} (expected {MAGIC:?})")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported archive version {found} (supported: {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("archive truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("unknown element kind {kind} in record {name:?}")]
    UnknownElementKind { name: String, kind: u8 },
    #[error("duplicate record name {name:?}")]
    DuplicateName { name: String },
    #[error("record {name:?} payload length {got} does not match extents {extents:?} ({want} bytes)")]
    PayloadLength {
        name: String,
        extents: Vec<u32>,
        want: u64,
        got: u64,
    },
    #[error("record name or text payload is not valid UTF-8")]
    InvalidUtf8,
    #[error("record {name:?} is too large to address on this host")]
    Oversized { name: String },
    #[error("record name longer than 65535 bytes")]
    NameTooLong,
    #[error("record {name:?} rank {rank} exceeds 255")]
    RankTooLarge { name: String, rank: usize },
    #[error("archive has more than u32::MAX records")]
    TooManyRecords,
    #[error("missing record {name:?}")]
    MissingRecord { name: String },
    #[error("record {name:?} holds {found}, expected {expected}")]
    WrongKind {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Payload of one record; the variant fixes the on-disk element kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    U8(Vec<u8>),
    F32(Vec<f32>),
    I32(Vec<i32>),
    Text(String),
}

impl Payload {
    fn kind_tag(&self) -> u8 {
        match self {
            Payload::U8(_) => 0,
            Payload::F32(_) => 1,
            Payload::I32(_) => 2,
            Payload::Text(_) => 3,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Payload::U8(_) => "uint8",
            Payload::F32(_) => "float32",
            Payload::I32(_) => "int32",
            Payload::Text(_) => "text",
        }
    }

    fn elem_size(&self) -> u64 {
        match self {
            Payload::U8(_) | Payload::Text(_) => 1,
            Payload::F32(_) | Payload::I32(_) => 4,
        }
    }

    fn elem_count(&self) -> u64 {
        match self {
            Payload::U8(d) => d.len() as u64,
            Payload::F32(d) => d.len() as u64,
            Payload::I32(d) => d.len() as u64,
            Payload::Text(s) => s.len() as u64,
        }
    }
}

/// One named tensor (or text blob) in an archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub extents: Vec<u32>,
    pub payload: Payload,
}

impl Record {
    pub fn new(
        name: impl Into<String>,
        extents: Vec<u32>,
        payload: Payload,
    ) -> Result<Self, ArchiveError> {
        let name = name.into();
        let want: u64 = extents.iter().map(|&e| e as u64).product();
        if want != payload.elem_count() {
            return Err(ArchiveError::PayloadLength {
                name,
                want: want * payload.elem_size(),
                got: payload.elem_count() * payload.elem_size(),
                extents,
            });
        }
        Ok(Record {
            name,
            extents,
            payload,
        })
    }

    pub fn u8(name: impl Into<String>, extents: Vec<u32>, data: Vec<u8>) -> Result<Self, ArchiveError> {
        Record::new(name, extents, Payload::U8(data))
    }

    pub fn f32(name: impl Into<String>, extents: Vec<u32>, data: Vec<f32>) -> Result<Self, ArchiveError> {
        Record::new(name, extents, Payload::F32(data))
    }

    pub fn i32(name: impl Into<String>, extents: Vec<u32>, data: Vec<i32>) -> Result<Self, ArchiveError> {
        Record::new(name, extents, Payload::I32(data))
    }

    /// Text records are rank-1 with extent = byte length.
    pub fn text(name: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Record {
            name: name.into(),
            extents: vec![text.len() as u32],
            payload: Payload::Text(text),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.extents.iter().map(|&e| e as usize).collect()
    }

    pub fn as_f32(&self) -> Result<&[f32], ArchiveError> {
        match &self.payload {
            Payload::F32(d) => Ok(d),
            other => Err(self.wrong_kind("float32", other)),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], ArchiveError> {
        match &self.payload {
            Payload::U8(d) => Ok(d),
            other => Err(self.wrong_kind("uint8", other)),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32], ArchiveError> {
        match &self.payload {
            Payload::I32(d) => Ok(d),
            other => Err(self.wrong_kind("int32", other)),
        }
    }

    pub fn as_text(&self) -> Result<&str, ArchiveError> {
        match &self.payload {
            Payload::Text(s) => Ok(s),
            other => Err(self.wrong_kind("text", other)),
        }
    }

    fn wrong_kind(&self, expected: &'static str, found: &Payload) -> ArchiveError {
        ArchiveError::WrongKind {
            name: self.name.clone(),
            expected,
            found: found.kind_name(),
        }
    }
}

/// Looks a record up by name.
pub fn find<'a>(records: &'a [Record], name: &str) -> Option<&'a Record> {
    records.iter().find(|r| r.name == name)
}

/// Looks a record up by name, erroring if absent.
pub fn require<'a>(records: &'a [Record], name: &str) -> Result<&'a Record, ArchiveError> {
    find(records, name).ok_or_else(|| ArchiveError::MissingRecord {
        name: name.to_string(),
    })
}

pub fn write_to_vec(records: &[Record]) -> Result<Vec<u8>, ArchiveError> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(ArchiveError::DuplicateName {
                name: r.name.clone(),
            });
        }
    }
    if records.len() > u32::MAX as usize {
        return Err(ArchiveError::TooManyRecords);
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        if r.name.len() > u16::MAX as usize {
            return Err(ArchiveError::NameTooLong);
        }
        if r.extents.len() > u8::MAX as usize {
            return Err(ArchiveError::RankTooLarge {
                name: r.name.clone(),
                rank: r.extents.len(),
            });
        }
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.kind_tag());
        out.push(r.extents.len() as u8);
        for &e in &r.extents {
            out.extend_from_slice(&e.to_le_bytes());
        }
        match &r.payload {
            Payload::U8(d) => out.extend_from_slice(d),
            Payload::F32(d) => {
                for v in d {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::I32(d) => {
                for v in d {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Text(s) => out.extend_from_slice(s.as_bytes()),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], ArchiveError> {
        if self.bytes.len() - self.pos < n {
            return Err(ArchiveError::Truncated { context });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_le(&mut self, context: &'static str) -> Result<u16, ArchiveError> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, context: &'static str) -> Result<u32, ArchiveError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_from_slice(bytes: &[u8]) -> Result<Vec<Record>, ArchiveError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32_le("version")?;
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion { found: version });
    }
    let count = cur.u32_le("record count")?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = cur.u16_le("record name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "record name")?)
            .map_err(|_| ArchiveError::InvalidUtf8)?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(ArchiveError::DuplicateName { name });
        }
        let kind = cur.take(1, "element kind")?[0];
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(cur.u32_le("extents")?);
        }
        let count: u64 = extents.iter().map(|&e| e as u64).product();
        let elem_size: u64 = match kind {
            0 | 3 => 1,
            1 | 2 => 4,
            k => return Err(ArchiveError::UnknownElementKind { name, kind: k }),
        };
        let byte_len = count
            .checked_mul(elem_size)
            .filter(|&n| n <= usize::MAX as u64)
            .ok_or(ArchiveError::Oversized { name: name.clone() })? as usize;
        let raw = cur.take(byte_len, "record payload")?;
        let payload = match kind {
            0 => Payload::U8(raw.to_vec()),
            1 => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            2 => Payload::I32(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            _ => Payload::Text(
                std::str::from_utf8(raw)
                    .map_err(|_| ArchiveError::InvalidUtf8)?
                    .to_string(),
            ),
        };
        records.push(Record {
            name,
            extents,
            payload,
        });
    }
    Ok(records)
}

pub fn archive_write(path: &Path, records: &[Record]) -> Result<(), ArchiveError> {
    let bytes = write_to_vec(records)?;
    std::fs::write(path, bytes).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn archive_read(path: &Path) -> Result<Vec<Record>, ArchiveError> {
    let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_from_slice(&bytes)
}
