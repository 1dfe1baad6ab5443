//! PDIS: a record container of little-endian 64-bit arrays with a plain-text
//! manifest beside it.
//!
//! Binary layout (integers little-endian):
//!
//! ```text
//! "PDIS" | version u16 | record count u32
//! per record: name length u16 | name (UTF-8) | kind u8 | rank u8 |
//!             dims u64 × rank | offset u64 | element count u64
//! payload: 8-byte elements; offsets count elements from the payload start
//! ```
//!
//! The manifest lives at `<path>.manifest` and holds sorted `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PDIS";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    F64,
    U64,
}

impl RecordKind {
    fn code(self) -> u8 {
        match self {
            RecordKind::F64 => 1,
            RecordKind::U64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(RecordKind::F64),
            2 => Ok(RecordKind::U64),
            _ => Err(Error::Format(format!("unknown record kind {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl RecordData {
    pub fn kind(&self) -> RecordKind {
        match self {
            RecordData::F64(_) => RecordKind::F64,
            RecordData::U64(_) => RecordKind::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RecordData::F64(v) => v.len(),
            RecordData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bits(&self, i: usize) -> u64 {
        match self {
            RecordData::F64(v) => v[i].to_bits(),
            RecordData::U64(v) => v[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

pub type Manifest = BTreeMap<String, String>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub records: Vec<Record>,
    pub manifest: Manifest,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: RecordData) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("bad record name {name:?}")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate record {name}")));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("record {name}: rank {} too large", shape.len())));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Format(format!(
                "record {name}: shape {shape:?} holds {count} elements, got {}",
                data.len()
            )));
        }
        self.records.push(Record { name, shape, data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.push(name, shape, RecordData::F64(data))
    }

    pub fn push_u64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<u64>) -> Result<()> {
        self.push(name, shape, RecordData::U64(data))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing record {name}")))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let r = self.require(name)?;
        match &r.data {
            RecordData::F64(v) => Ok((&r.shape, v)),
            _ => Err(Error::Format(format!("record {name} is not f64"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<(&[usize], &[u64])> {
        let r = self.require(name)?;
        match &r.data {
            RecordData::U64(v) => Ok((&r.shape, v)),
            _ => Err(Error::Format(format!("record {name} is not u64"))),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest has no key {key}")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("manifest key {key}: cannot parse {raw:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.kind().code());
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(r.data.len() as u64).to_le_bytes());
            offset += r.data.len() as u64;
        }
        for r in &self.records {
            for i in 0..r.data.len() {
                out.extend_from_slice(&r.data.bits(i).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses the binary part; the manifest is left empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("not a PDIS file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported PDIS version {version}")));
        }
        let count = u32::from_le_bytes(cur.array()?) as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.array()?) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let kind = RecordKind::from_code(cur.array::<1>()?[0])?;
            let rank = cur.array::<1>()?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(cur.array()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = u64::from_le_bytes(cur.array()?) as usize;
            let n = u64::from_le_bytes(cur.array()?) as usize;
            let declared = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if declared != Some(n) {
                return Err(Error::Format(format!("record {name}: shape {shape:?} does not match {n} elements")));
            }
            dir.push((name, kind, shape, offset, n));
        }
        let payload = &bytes[cur.pos..];
        if !payload.len().is_multiple_of(8) {
            return Err(Error::Format("payload is not a whole number of 8-byte elements".into()));
        }
        let total = payload.len() / 8;
        let mut spans: Vec<(usize, usize)> = dir.iter().map(|d| (d.3, d.4)).collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[0].0 + w[0].1 > w[1].0 {
                return Err(Error::Format("overlapping records".into()));
            }
        }
        let mut out = Container::new();
        for (name, kind, shape, offset, n) in dir {
            if offset.checked_add(n).is_none_or(|end| end > total) {
                return Err(Error::Format(format!("record {name} extends past the payload")));
            }
            let words = payload[offset * 8..(offset + n) * 8]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")));
            let data = match kind {
                RecordKind::F64 => RecordData::F64(words.map(f64::from_bits).collect()),
                RecordKind::U64 => RecordData::U64(words.collect()),
            };
            out.push(name, shape, data)?;
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        fs::write(manifest_path(path), render_manifest(&self.manifest)?)?;
        Ok(())
    }

    /// Reads a container and, when present, its manifest.
    pub fn read(path: &Path) -> Result<Self> {
        let mut c = Self::from_bytes(&fs::read(path)?)?;
        let m = manifest_path(path);
        if m.exists() {
            c.manifest = parse_manifest(&fs::read_to_string(m)?)?;
        }
        Ok(c)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated PDIS directory".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn render_manifest(m: &Manifest) -> Result<String> {
    let mut out = String::new();
    for (k, v) in m {
        if k.is_empty() || k.contains(['=', '\n', '\r']) || k.trim() != k || v.contains(['\n', '\r']) {
            return Err(Error::Format(format!("manifest entry cannot be written: {k:?}={v:?}")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out)
}

/// `key=value` per line; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut m = Manifest::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected key=value", i + 1)))?;
        if m.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("manifest line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(m)
}
