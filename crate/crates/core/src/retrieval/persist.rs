//! Binary index file.
//!
//! Layout (little-endian): magic `PGNX`, format version `u32`, dim `u32`,
//! metric `u8` (0 = cosine), backend `u8`, entry count `u64`, then per entry
//! the length-prefixed UTF-8 fields id/title/text/source, a category byte and
//! `dim` f64 values. Approximate indexes append the graph parameters and
//! adjacency lists. A SHA-256 digest of every preceding byte closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::hnsw::{HnswGraph, HnswParams};
use super::{CorpusCategory, CorpusEntry, IndexBackend, RetrievalError, VectorIndex};

pub const MAGIC: &[u8; 4] = b"PGNX";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const NO_ENTRY: u32 = u32::MAX;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            RetrievalError::Corrupt(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, RetrievalError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, RetrievalError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, RetrievalError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| RetrievalError::Corrupt(format!("length {n} exceeds file size")))
    }
    fn str(&mut self) -> Result<String, RetrievalError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| RetrievalError::Corrupt("invalid UTF-8 in string field".into()))
    }
}

fn encode(index: &VectorIndex) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(index.dim() as u32);
    w.u8(0);
    w.u8(match index.backend() {
        IndexBackend::Exact => 0,
        IndexBackend::Approximate => 1,
    });
    w.u64(index.len() as u64);
    for (e, v) in index.entries().iter().zip(index.vectors()) {
        w.str(&e.id);
        w.str(&e.title);
        w.str(&e.text);
        w.str(&e.source);
        w.u8(e.category.code());
        for &x in v {
            w.f64(x);
        }
    }
    if let Some(g) = index.graph() {
        w.u64(g.params.m as u64);
        w.u64(g.params.ef_construction as u64);
        w.u64(g.params.ef_search as u64);
        w.u64(g.params.seed);
        w.u32(g.entry.unwrap_or(NO_ENTRY));
        for node in &g.links {
            w.u32(node.len() as u32);
            for layer in node {
                w.u32(layer.len() as u32);
                for &n in layer {
                    w.u32(n);
                }
            }
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

fn decode(bytes: &[u8]) -> Result<VectorIndex, RetrievalError> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(RetrievalError::Corrupt("missing index magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(RetrievalError::IncompatibleVersion { found: version, supported: FORMAT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(RetrievalError::Corrupt("checksum mismatch (file truncated or modified)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let dim = r.u32()? as usize;
    if r.u8()? != 0 {
        return Err(RetrievalError::Corrupt("unknown metric".into()));
    }
    let backend = match r.u8()? {
        0 => IndexBackend::Exact,
        1 => IndexBackend::Approximate,
        b => return Err(RetrievalError::Corrupt(format!("unknown backend tag {b}"))),
    };
    let count = r.u64()? as usize;
    if dim == 0 || count == 0 {
        return Err(RetrievalError::Corrupt("empty index".into()));
    }
    let mut entries = Vec::new();
    let mut vectors = Vec::new();
    for _ in 0..count {
        let id = r.str()?;
        let title = r.str()?;
        let text = r.str()?;
        let source = r.str()?;
        let category = CorpusCategory::from_code(r.u8()?)
            .ok_or_else(|| RetrievalError::Corrupt("unknown category tag".into()))?;
        let v = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        entries.push(CorpusEntry { id, category, title, text, source });
        vectors.push(v);
    }
    let graph = match backend {
        IndexBackend::Exact => None,
        IndexBackend::Approximate => {
            let params = HnswParams {
                m: r.u64()? as usize,
                ef_construction: r.u64()? as usize,
                ef_search: r.u64()? as usize,
                seed: r.u64()?,
            };
            let entry = match r.u32()? {
                NO_ENTRY => None,
                e if (e as usize) < count => Some(e),
                e => return Err(RetrievalError::Corrupt(format!("graph entry {e} out of range"))),
            };
            let mut links = Vec::with_capacity(count);
            for _ in 0..count {
                let layers = r.u32()? as usize;
                let mut node = Vec::new();
                for _ in 0..layers {
                    let n = r.u32()? as usize;
                    let list = (0..n)
                        .map(|_| {
                            r.u32().and_then(|x| {
                                if (x as usize) < count {
                                    Ok(x)
                                } else {
                                    Err(RetrievalError::Corrupt(format!("graph link {x} out of range")))
                                }
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    node.push(list);
                }
                if node.is_empty() {
                    return Err(RetrievalError::Corrupt("graph node without layers".into()));
                }
                links.push(node);
            }
            Some(HnswGraph { params, entry, links })
        }
    };
    if r.pos != body.len() {
        return Err(RetrievalError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(VectorIndex::from_parts(dim, backend, entries, vectors, graph))
}

pub fn save_index(index: &VectorIndex, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
    let path = path.as_ref();
    let io = |source| RetrievalError::Io { path: path.display().to_string(), source };
    let bytes = encode(index);
    // write-then-rename so readers never observe a partial file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    tracing::info!(path = %path.display(), count = index.len(), bytes = bytes.len(), "index saved");
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<VectorIndex, RetrievalError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| RetrievalError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::retrieval::build_index;

    fn sample(backend: IndexBackend) -> VectorIndex {
        let entries = (0..40)
            .map(|i| CorpusEntry {
                id: format!("e{i:03}"),
                category: CorpusCategory::ALL[i % 5],
                title: format!("title {i}"),
                text: format!("passage number {i} about bone healing ü"),
                source: "unit".into(),
            })
            .collect();
        build_index(entries, &HashEmbedder::new(32).unwrap(), backend, HnswParams::default()).unwrap()
    }

    #[test]
    fn roundtrip_both_backends() {
        for backend in [IndexBackend::Exact, IndexBackend::Approximate] {
            let idx = sample(backend);
            let back = decode(&encode(&idx)).unwrap();
            assert_eq!(idx, back);
            assert_eq!(encode(&idx), encode(&back));
        }
    }

    #[test]
    fn wrong_magic_is_corrupt() {
        let mut bytes = encode(&sample(IndexBackend::Exact));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(RetrievalError::Corrupt(_))));
    }

    #[test]
    fn future_version_is_incompatible() {
        let mut bytes = encode(&sample(IndexBackend::Exact));
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(RetrievalError::IncompatibleVersion { found: 999, .. })));
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = encode(&sample(IndexBackend::Approximate));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(RetrievalError::Corrupt(_))), "cut {cut}");
        }
    }
}
