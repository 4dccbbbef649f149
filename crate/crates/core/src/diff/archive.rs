//! Flat binary archive of named matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RDRSRARC"
//! version  u32
//! meta     u32 length + UTF-8 text (key=value lines)
//! count    u32
//! record*  u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64 bit patterns
//! ```
//!
//! Values are stored as raw IEEE-754 bit patterns so a save/load round trip is
//! bit-exact.

use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 8] = b"RDRSRARC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("archive I/O")]
    Io(#[from] io::Error),
    #[error("not an archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0} (expected {VERSION})")]
    Version(u32),
    #[error("malformed archive: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub records: Vec<Record>,
}

impl Archive {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ArchiveError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(ArchiveError::Malformed(format!("unencodable meta entry `{k}`")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        write_bytes(&mut w, meta.as_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            if r.values.len() != r.rows * r.cols {
                return Err(ArchiveError::Malformed(format!(
                    "record `{}` has {} values for {}x{}",
                    r.name,
                    r.values.len(),
                    r.rows,
                    r.cols
                )));
            }
            write_bytes(&mut w, r.name.as_bytes())?;
            w.write_all(&(r.rows as u64).to_le_bytes())?;
            w.write_all(&(r.cols as u64).to_le_bytes())?;
            for v in &r.values {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ArchiveError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ArchiveError::Version(version));
        }
        let meta_text = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| ArchiveError::Malformed("meta is not UTF-8".into()))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ArchiveError::Malformed(format!("meta line `{line}`")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| ArchiveError::Malformed("record name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| ArchiveError::Malformed(format!("record `{name}` shape overflow")))?;
            let mut values = Vec::with_capacity(n.min(1 << 24));
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                values.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            records.push(Record {
                name,
                rows,
                cols,
                values,
            });
        }
        Ok(Archive { meta, records })
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, ArchiveError> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ArchiveError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ArchiveError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
