//! FSIX index files.
//!
//! ```text
//! "FSIX" | u32 version = 1 | u8 kind (0 exact, 1 clustered)
//! u32 d | u64 n | 32-byte SHA-256 of the corpus FSEM encoding
//! clustered only: u32 k | u32 probe_count | u64 len, len × f32 centroids
//!                 k × ( u64 len | len × u32 ordinals )
//! ```
//!
//! Vectors are not stored; loading needs the corpus the index was built on
//! and rejects any other.

use std::path::Path;

use fsir_core::{ClusteredIndex, EmbeddingCorpus, ExactIndex, Hit, VectorIndex};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::fsem;

pub const MAGIC: &[u8; 4] = b"FSIX";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyIndex {
    Exact(ExactIndex),
    Clustered(ClusteredIndex),
}

impl AnyIndex {
    fn inner(&self) -> &dyn VectorIndex {
        match self {
            AnyIndex::Exact(i) => i,
            AnyIndex::Clustered(i) => i,
        }
    }
}

impl VectorIndex for AnyIndex {
    fn dimension(&self) -> usize {
        self.inner().dimension()
    }

    fn len(&self) -> usize {
        self.inner().len()
    }

    fn id(&self, ordinal: usize) -> &str {
        self.inner().id(ordinal)
    }

    fn search_filtered(&self, q: &[f32], k: usize, keep: &dyn Fn(usize) -> bool) -> fsir_core::Result<Vec<Hit>> {
        self.inner().search_filtered(q, k, keep)
    }
}

fn corpus_hash(corpus: &EmbeddingCorpus) -> Result<[u8; 32]> {
    Ok(Sha256::digest(fsem::encode(corpus)?).into())
}

pub fn encode(index: &AnyIndex, corpus: &EmbeddingCorpus) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(match index {
        AnyIndex::Exact(_) => 0,
        AnyIndex::Clustered(_) => 1,
    });
    w.u32(index.dimension() as u32);
    w.u64(index.len() as u64);
    w.bytes(&corpus_hash(corpus)?);
    if let AnyIndex::Clustered(c) = index {
        w.u32(c.n_clusters() as u32);
        w.u32(c.probe_count() as u32);
        w.u64(c.centroids().len() as u64);
        w.f32s(c.centroids());
        for list in c.postings() {
            w.u64(list.len() as u64);
            for &o in list {
                w.u32(o);
            }
        }
    }
    Ok(w.buf)
}

pub fn decode(bytes: &[u8], corpus: &EmbeddingCorpus) -> Result<AnyIndex> {
    let mut r = Reader::new(bytes);
    let version = r.header(MAGIC, "FSIX")?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let kind = r.u8()?;
    let d = r.u32()? as usize;
    let n = r.u64()? as usize;
    let hash = r.bytes(32)?;
    if d != corpus.dimension() || n != corpus.len() || hash != corpus_hash(corpus)? {
        return Err(Error::Invalid("index was built on a different corpus".into()));
    }
    let index = match kind {
        0 => AnyIndex::Exact(ExactIndex::build(corpus)?),
        1 => {
            let k = r.u32()? as usize;
            let probes = r.u32()? as usize;
            let len = r.u64()? as usize;
            if len > bytes.len() {
                return Err(Error::TruncatedFile);
            }
            let centroids = r.f32s(len)?;
            let mut postings = Vec::with_capacity(k.min(n));
            for _ in 0..k {
                let len = r.u64()? as usize;
                if len > bytes.len() {
                    return Err(Error::TruncatedFile);
                }
                let raw = r.bytes(len * 4)?;
                postings.push(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
                        .collect(),
                );
            }
            AnyIndex::Clustered(ClusteredIndex::from_parts(corpus, centroids, postings, probes)?)
        }
        other => return Err(Error::Invalid(format!("unknown index kind {other}"))),
    };
    r.finish()?;
    Ok(index)
}

pub fn read(path: &Path, corpus: &EmbeddingCorpus) -> Result<AnyIndex> {
    decode(&read_file(path)?, corpus)
}

pub fn write(index: &AnyIndex, corpus: &EmbeddingCorpus, path: &Path) -> Result<()> {
    write_file(path, &encode(index, corpus)?)
}
