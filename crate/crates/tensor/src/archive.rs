//! The AEDM tensor container.
//!
//! Little-endian layout: magic `AEDM`, `u32` format version, `u32` entry
//! count, then per entry: `u32` name length, UTF-8 name, `u32` rank, `u32`
//! extents, raw `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const AEDM_MAGIC: [u8; 4] = *b"AEDM";
pub const AEDM_VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| TensorError::Format { offset: 0, detail: format!("archive has no tensor named `{name}`") })
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<f32>)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| TensorError::Format { offset: 0, detail: format!("{what} {n} exceeds u32") })
}

pub fn write_archive<W: Write>(mut w: W, archive: &Archive) -> Result<()> {
    w.write_all(&AEDM_MAGIC)?;
    w.write_all(&AEDM_VERSION.to_le_bytes())?;
    w.write_all(&u32_of(archive.len(), "entry count")?.to_le_bytes())?;
    for (name, t) in archive.entries() {
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(t.rank(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, "extent")?.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                TensorError::Format { offset: self.offset, detail: format!("truncated while reading {what}") }
            }
            _ => TensorError::Io(e),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_archive<R: Read>(r: R) -> Result<Archive> {
    let mut cur = Cursor { inner: r, offset: 0 };
    let magic = cur.bytes(4, "magic")?;
    if magic != AEDM_MAGIC {
        return Err(TensorError::Format { offset: 0, detail: format!("bad magic {magic:?}, expected \"AEDM\"") });
    }
    let version = cur.u32("version")?;
    if version != AEDM_VERSION {
        return Err(TensorError::Format {
            offset: 4,
            detail: format!("unsupported format version {version} (this build reads {AEDM_VERSION})"),
        });
    }
    let count = cur.u32("entry count")?;
    let mut archive = Archive::new();
    for _ in 0..count {
        let at = cur.offset;
        let len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.bytes(len, "name")?)
            .map_err(|_| TensorError::Format { offset: at, detail: "tensor name is not UTF-8".into() })?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.bytes(n * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| TensorError::Format { offset: at, detail: format!("tensor `{name}`: {e}") })?;
        archive.push(name, tensor);
    }
    Ok(archive)
}

pub fn write_archive_file(path: impl AsRef<Path>, archive: &Archive) -> Result<()> {
    write_archive(BufWriter::new(File::create(path)?), archive)
}

pub fn read_archive_file(path: impl AsRef<Path>) -> Result<Archive> {
    read_archive(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let mut a = Archive::new();
        a.push("w", Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap());
        let mut buf = Vec::new();
        write_archive(&mut buf, &a).unwrap();
        assert_eq!(&buf[0..4], b"AEDM");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[1, 0, 0, 0]);
        assert_eq!(buf[16], b'w');
        assert_eq!(&buf[17..21], &[1, 0, 0, 0]);
        assert_eq!(&buf[21..25], &[2, 0, 0, 0]);
        assert_eq!(&buf[25..29], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut a = Archive::new();
        a.push("x", Tensor::new(vec![1, 3], vec![0.5f32; 3]).unwrap());
        let mut buf = Vec::new();
        write_archive(&mut buf, &a).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_archive(&bad[..]), Err(TensorError::Format { offset: 0, .. })));

        let mut bad = buf.clone();
        bad[4] = 2;
        let err = read_archive(&bad[..]).unwrap_err();
        assert!(err.to_string().contains("unsupported format version 2"));

        let err = read_archive(&buf[..buf.len() - 2]).unwrap_err();
        assert!(matches!(err, TensorError::Format { .. }));
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..4), seed in any::<u32>()) {
            let mut a = Archive::new();
            for (i, s) in shapes.iter().enumerate() {
                let t = Tensor::from_fn(s.clone(), |j| ((j as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6);
                a.push(format!("t{i}-é"), t);
            }
            let mut buf = Vec::new();
            write_archive(&mut buf, &a).unwrap();
            prop_assert_eq!(read_archive(&buf[..]).unwrap(), a);
        }
    }
}
