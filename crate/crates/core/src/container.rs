//! Self-describing binary container: an 8-byte magic, a little-endian `u64`
//! header length, a JSON header listing every record, then the raw
//! little-endian payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GMIC3DC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
            Payload::U8(_) => "u8",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn width(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" => Some(4),
            "f64" => Some(8),
            "u8" => Some(1),
            _ => None,
        }
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        match self {
            Payload::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            Payload::U8(v) => w.write_all(v),
        }
    }

    fn decode(dtype: &str, bytes: &[u8]) -> Option<Payload> {
        Some(match dtype {
            "f32" => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            "f64" => Payload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            "u8" => Payload::U8(bytes.to_vec()),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub attrs: Map<String, Value>,
    pub payload: Payload,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Self {
        Self {
            name: name.into(),
            shape,
            attrs: Map::new(),
            payload,
        }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    bytes: u64,
    #[serde(default)]
    attrs: Map<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    meta: Value,
    records: Vec<RecordHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            records: Vec::new(),
        }
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: "gmic3d-container".into(),
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            records: self
                .records
                .iter()
                .map(|r| {
                    let width = Payload::width(r.payload.dtype()).expect("known dtype");
                    RecordHeader {
                        name: r.name.clone(),
                        dtype: r.payload.dtype().into(),
                        shape: r.shape.clone(),
                        bytes: (r.payload.len() * width) as u64,
                        attrs: r.attrs.clone(),
                    }
                })
                .collect(),
        };
        for r in &self.records {
            let n: usize = r.shape.iter().product();
            if n != r.payload.len() {
                return Err(Error::Shape(format!(
                    "record `{}`: shape {:?} holds {n} elements but payload has {}",
                    r.name,
                    r.shape,
                    r.payload.len()
                )));
            }
        }
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for r in &self.records {
            r.payload.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let fmt = |record: &str, reason: String| Error::Format {
            path: path.to_path_buf(),
            record: record.to_string(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt("<header>", "file shorter than the magic".into()))?;
        if &magic != MAGIC {
            return Err(fmt("<header>", "bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| fmt("<header>", "missing header length".into()))?;
        let len = u64::from_le_bytes(len);
        let file_len = std::fs::metadata(path)?.len();
        if len > file_len.saturating_sub(16) {
            return Err(fmt("<header>", format!("header length {len} exceeds file size {file_len}")));
        }
        let mut hb = vec![0u8; len as usize];
        r.read_exact(&mut hb).map_err(|_| fmt("<header>", "truncated header".into()))?;
        let header: Header = serde_json::from_slice(&hb).map_err(|e| fmt("<header>", e.to_string()))?;
        if header.format != "gmic3d-container" || header.version != VERSION {
            return Err(fmt("<header>", format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut records = Vec::with_capacity(header.records.len());
        for rh in header.records {
            let width = Payload::width(&rh.dtype).ok_or_else(|| fmt(&rh.name, format!("unknown dtype `{}`", rh.dtype)))?;
            let n: usize = rh.shape.iter().product();
            if (n * width) as u64 != rh.bytes {
                return Err(fmt(&rh.name, format!("shape {:?} does not match {} payload bytes", rh.shape, rh.bytes)));
            }
            let mut buf = vec![0u8; rh.bytes as usize];
            let mut got = 0;
            while got < buf.len() {
                match r.read(&mut buf[got..])? {
                    0 => break,
                    k => got += k,
                }
            }
            if got < buf.len() {
                return Err(fmt(&rh.name, format!("truncated payload: expected {} bytes, found {got}", buf.len())));
            }
            let payload = Payload::decode(&rh.dtype, &buf).expect("dtype checked");
            records.push(Record {
                name: rh.name,
                shape: rh.shape,
                attrs: rh.attrs,
                payload,
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(fmt("<trailer>", "unexpected bytes after the last record".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            records,
        })
    }
}
