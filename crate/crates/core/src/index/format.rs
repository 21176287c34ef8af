//! On-disk snapshot format.
//!
//! ```text
//! magic        4 bytes  "RGF1"
//! version      u32
//! generation   u64
//! kind         u8       0 = exact, 1 = ivf
//! N, d, C      u64 each (C = 0 for exact)
//! fingerprint  8 bytes  passage-encoder fingerprint, u64 LE
//! embeddings   N*d f32, row-major
//! chunk ids    N u32
//! centroids    C*d f32, row-major
//! lists        C times: u32 length, then that many u32 row indices
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Embeddings, IndexKind, IndexSnapshot};
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RGF1";
pub const SNAPSHOT_VERSION: u32 = 1;

impl IndexSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let d = self.dim();
        let c = self.num_clusters();
        let mut out = Vec::with_capacity(45 + 4 * (n * d + n + c * d + c + n));
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.generation.to_le_bytes());
        out.push(match self.kind {
            IndexKind::Exact => 0,
            IndexKind::Ivf => 1,
        });
        for x in [n, d, c] {
            out.extend_from_slice(&(x as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.encoder_fingerprint.to_le_bytes());
        for x in self.embeddings.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for id in &self.chunk_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        if let Some(centroids) = &self.centroids {
            for x in centroids.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for list in &self.inverted_lists {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for row in list {
                out.extend_from_slice(&row.to_le_bytes());
            }
        }
        out
    }

    /// Parses and fully validates a snapshot. Never panics on malformed
    /// input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != SNAPSHOT_MAGIC {
            return Err(bad("magic mismatch"));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let generation = r.u64()?;
        let kind = match r.take(1)?[0] {
            0 => IndexKind::Exact,
            1 => IndexKind::Ivf,
            k => return Err(bad(format!("unknown index kind {k}"))),
        };
        let n = r.len_field()?;
        let d = r.len_field()?;
        let c = r.len_field()?;
        let fingerprint = r.u64()?;
        if n == 0 || d == 0 {
            return Err(bad("empty snapshot"));
        }
        match kind {
            IndexKind::Exact if c != 0 => return Err(bad("exact snapshot with clusters")),
            IndexKind::Ivf if c == 0 || c > n => return Err(bad("cluster count out of range")),
            _ => {}
        }

        let embeddings = Embeddings::new(d, r.f32s(mul(n, d)?)?)?;
        let chunk_ids = r.u32s(n)?;
        let centroids = match kind {
            IndexKind::Exact => None,
            IndexKind::Ivf => Some(Embeddings::new(d, r.f32s(mul(c, d)?)?)?),
        };
        let mut inverted_lists = Vec::with_capacity(c);
        let mut seen = vec![false; n];
        for _ in 0..c {
            let len = r.u32()? as usize;
            let list = r.u32s(len)?;
            for &row in &list {
                let slot = seen
                    .get_mut(row as usize)
                    .ok_or_else(|| bad(format!("list row {row} out of range")))?;
                if std::mem::replace(slot, true) {
                    return Err(bad(format!("row {row} appears in two lists")));
                }
            }
            inverted_lists.push(list);
        }
        if kind == IndexKind::Ivf && seen.iter().any(|s| !s) {
            return Err(bad("inverted lists do not cover every row"));
        }
        if !r.buf.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.buf.len())));
        }
        if embeddings.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite embedding"));
        }
        if generation == 0 {
            return Err(bad("generation must be positive"));
        }
        Ok(IndexSnapshot::from_parts(
            generation,
            kind,
            fingerprint,
            embeddings,
            chunk_ids,
            centroids,
            inverted_lists,
        ))
    }
}

pub fn save_snapshot(snapshot: &IndexSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, snapshot.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<IndexSnapshot> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    IndexSnapshot::from_bytes(&bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Snapshot(msg.into())
}

fn mul(a: usize, b: usize) -> Result<usize> {
    a.checked_mul(b).ok_or_else(|| bad("size overflow"))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_field(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length does not fit in memory"))
    }

    // Length checks happen in `take` before anything is allocated.
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(mul(n, 4)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(mul(n, 4)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}
