//! FSEM embedding files and the tab-separated text sidecar.
//!
//! FSEM layout, little-endian, no padding:
//!
//! ```text
//! "FSEM" | u32 version = 1 | u32 d | u8 modality | u64 n
//! n × ( u16 id length | id UTF-8 bytes | d × f32 )
//! ```
//!
//! The sidecar holds one record per line: `id<TAB>f1,f2,...`. Blank lines
//! and lines starting with `#` are skipped.

use std::path::Path;

use fsir_core::{EmbeddingCorpus, EmbeddingRecord, Modality};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSEM";
pub const VERSION: u32 = 1;

pub fn encode(corpus: &EmbeddingCorpus) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(corpus.dimension() as u32);
    w.u8(corpus.modality().code());
    w.u64(corpus.len() as u64);
    for r in corpus.records() {
        let id = r.id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Invalid(format!("id of {} bytes exceeds the format limit", id.len())))?;
        w.u16(len);
        w.bytes(id);
        w.f32s(&r.vector);
    }
    Ok(w.buf)
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingCorpus> {
    let mut r = Reader::new(bytes);
    let version = r.header(MAGIC, "FSEM")?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let d = r.u32()? as usize;
    let code = r.u8()?;
    let modality = Modality::from_code(code).ok_or_else(|| Error::Invalid(format!("unknown modality code {code}")))?;
    let n = r.u64()?;
    // Each record needs at least its length prefix and floats.
    let min_record = 2 + 4 * d as u64;
    if n.saturating_mul(min_record) > bytes.len() as u64 {
        return Err(Error::TruncatedFile);
    }
    let mut records = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.bytes(len)?).map_err(|_| Error::Invalid("record id is not UTF-8".into()))?;
        records.push(EmbeddingRecord::new(id, r.f32s(d)?, modality)?);
    }
    r.finish()?;
    Ok(EmbeddingCorpus::new(d, records)?)
}

pub fn parse_text(text: &str) -> Result<EmbeddingCorpus> {
    let mut records = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Line { line: line_no, message };
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `id<TAB>comma-separated floats`".into()))?;
        let vector = values
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(format!("bad float: {e}")))?;
        let d = *dim.get_or_insert(vector.len());
        if vector.len() != d {
            return Err(err(format!("{} values, expected {d}", vector.len())));
        }
        records.push(EmbeddingRecord::new(id, vector, Modality::Mixed).map_err(|e| err(e.to_string()))?);
    }
    Ok(EmbeddingCorpus::new(dim.unwrap_or(2), records)?)
}

/// Reads FSEM, or the text sidecar when the extension is `txt` or `tsv`.
pub fn read(path: &Path) -> Result<EmbeddingCorpus> {
    let bytes = read_file(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt" | "tsv") => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Invalid("sidecar is not UTF-8".into()))?;
            parse_text(&text)
        }
        _ => decode(&bytes),
    }
}

pub fn write(corpus: &EmbeddingCorpus, path: &Path) -> Result<()> {
    write_file(path, &encode(corpus)?)
}

/// SHA-256 over the FSEM encoding, hex encoded.
pub fn digest(corpus: &EmbeddingCorpus) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode(corpus)?)))
}
