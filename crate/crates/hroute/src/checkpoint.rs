//! Binary checkpoints: named parameter tensors plus an embedded run
//! configuration, written bit-exactly.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HMCK"                        magic
//! u32   version
//! u32   config length,  then that many JSON bytes
//! u32   tensor count
//! per tensor:
//!   u32 name length,    then that many UTF-8 bytes
//!   u8  dtype (0 = f32)
//!   u32 rank,           then rank u32 dims
//!   u64 payload offset
//!   u64 payload byte length
//! u64   payload length, then the packed f32 payload
//! ```
//!
//! Offsets must tile the payload contiguously in manifest order, so a
//! file has exactly one valid encoding and a save/load round trip
//! reproduces it byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Graph, TensorId};

pub const MAGIC: [u8; 4] = *b"HMCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One named tensor held by a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// An in-memory checkpoint: the run configuration it was trained under
/// plus every parameter tensor by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Capture the current values of `params` out of a graph.
    pub fn capture(
        config_json: impl Into<String>,
        graph: &Graph<f32>,
        params: &[(String, TensorId)],
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(params.len());
        for (name, id) in params {
            entries.push(Entry {
                name: name.clone(),
                shape: graph.shape(*id)?.to_vec(),
                data: graph.data(*id)?.to_vec(),
            });
        }
        Ok(Self { config_json: config_json.into(), entries })
    }

    /// Copy the stored values back into a graph. Every parameter must
    /// match a stored entry by name and shape, and vice versa.
    pub fn restore(&self, graph: &mut Graph<f32>, params: &[(String, TensorId)]) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(Error::Contract {
                op: "checkpoint_restore",
                detail: format!(
                    "checkpoint holds {} tensors, model has {} parameters",
                    self.entries.len(),
                    params.len()
                ),
            });
        }
        for (name, id) in params {
            let entry = self.entry(name).ok_or_else(|| Error::Contract {
                op: "checkpoint_restore",
                detail: format!("parameter `{name}` missing from checkpoint"),
            })?;
            if graph.shape(*id)? != entry.shape.as_slice() {
                return Err(Error::Contract {
                    op: "checkpoint_restore",
                    detail: format!(
                        "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                        graph.shape(*id)?,
                        entry.shape
                    ),
                });
            }
            graph.data_mut(*id)?.copy_from_slice(&entry.data);
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let bytes = (e.data.len() * 4) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&bytes.to_le_bytes());
            offset += bytes;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(corrupt("bad magic, not a checkpoint file"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let config_len = cur.u32()? as usize;
        let config_json = String::from_utf8(cur.take(config_len)?.to_vec())
            .map_err(|_| corrupt("config snapshot is not UTF-8"))?;
        let count = cur.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        let mut expected_offset = 0u64;
        for i in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?;
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(corrupt(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let offset = cur.u64()?;
            let len = cur.u64()?;
            if offset != expected_offset {
                return Err(corrupt(format!("tensor `{name}` payload is not contiguous")));
            }
            if len != (numel(&shape) * 4) as u64 {
                return Err(corrupt(format!("tensor `{name}` byte length does not match its shape")));
            }
            expected_offset += len;
            manifest.push((name, shape, len as usize));
        }
        let payload_len = cur.u64()?;
        if payload_len != expected_offset {
            return Err(corrupt("payload length does not match the manifest"));
        }
        let payload = cur.take(payload_len as usize)?;
        if cur.pos != bytes.len() {
            return Err(corrupt("trailing bytes after the payload"));
        }

        let mut entries = Vec::with_capacity(count);
        let mut at = 0;
        for (name, shape, len) in manifest {
            let raw = &payload[at..at + len];
            at += len;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        Ok(Self { config_json, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint { detail: detail.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!(
                "file ends after {} bytes, needed {} more",
                self.bytes.len(),
                self.pos + n - self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_json: r#"{"task": "demo"}"#.into(),
            entries: vec![
                Entry {
                    name: "a.w".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-39, -2.5, 1e30],
                },
                Entry { name: "a.b".into(), shape: vec![3], data: vec![0.1, 0.2, 0.3] },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_json, ck.config_json);
        assert_eq!(back.entries.len(), 2);
        for (a, b) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // Canonical encoding: re-serializing reproduces the bytes.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_anywhere_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [3, 7, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::CorruptCheckpoint { .. }),
                "cut at {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes_are_detected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CorruptCheckpoint { .. })
        ));

        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_its_own_error() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 2);
                assert_eq!(expected, VERSION);
            }
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn capture_and_restore_move_values_between_graphs() {
        let mut a: Graph<f32> = Graph::new();
        let w = a.param(vec![1.5, -2.5, 3.25], vec![3]).unwrap();
        a.seal();
        let params = vec![("w".to_string(), w)];
        let ck = Checkpoint::capture("{}", &a, &params).unwrap();

        let mut b: Graph<f32> = Graph::new();
        let w2 = b.param(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        b.seal();
        ck.restore(&mut b, &[("w".to_string(), w2)]).unwrap();
        assert_eq!(b.data(w2).unwrap(), &[1.5, -2.5, 3.25]);

        // Name and shape mismatches are rejected.
        assert!(ck.restore(&mut b, &[("v".to_string(), w2)]).is_err());
        let mut c: Graph<f32> = Graph::new();
        let short = c.param(vec![0.0], vec![1]).unwrap();
        c.seal();
        assert!(ck.restore(&mut c, &[("w".to_string(), short)]).is_err());
    }

    #[test]
    fn file_round_trip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hmck");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }
}
