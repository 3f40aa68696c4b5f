//! The `PETW` tensor container.
//!
//! Little-endian layout: magic `PETW`, u32 version, u32 tensor count; then per
//! tensor: u32 name length, UTF-8 name, u8 dtype code (0 = f32, 1 = f64),
//! u8 rank, rank x u64 dims, raw row-major payload. No padding between
//! records.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"PETW";
pub const VERSION: u32 = 1;

pub fn write_tensors<F: Scalar, W: Write>(
    mut w: W,
    entries: &[(&str, &Tensor<F>)],
) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[F::DTYPE.code(), t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_tensors<F: Scalar>(path: &Path, entries: &[(&str, &Tensor<F>)]) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write_tensors(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Read every record, converting the stored dtype into `F` (f32 -> f64 is
/// exact; the reverse narrows and is only used by explicit casts).
pub fn read_tensors<F: Scalar, R: Read>(r: R) -> Result<Vec<(String, Tensor<F>)>> {
    let mut r = Counted { inner: r, offset: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: r.offset,
            msg: "name is not UTF-8".into(),
        })?;
        let head = r.take(2, "dtype/rank")?;
        let dtype = Dtype::from_code(head[0]).ok_or(Error::Format {
            offset: r.offset - 2,
            msg: format!("unknown dtype code {} for tensor `{name}`", head[0]),
        })?;
        let rank = head[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * dtype.width(), "payload")?;
        let data: Vec<F> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| F::fl(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => payload.chunks_exact(8).map(|c| F::fl(f64::read_le(c))).collect(),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn load_tensors<F: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<F>)>> {
    let f = File::open(path)?;
    read_tensors(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = Tensor::<f32>::vector(vec![1.0, -2.5, 3.0e-8, f32::MIN_POSITIVE]);
        let b = Tensor::<f32>::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a", &a), ("nested.b", &b)]).unwrap();
        let back = read_tensors::<f32, _>(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let a = Tensor::<f32>::scalar(1.0);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a", &a)]).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_tensors::<f32, _>(&buf[..]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let a = Tensor::<f32>::vector(vec![1.0; 8]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a", &a)]).unwrap();
        buf.truncate(buf.len() - 5);
        match read_tensors::<f32, _>(&buf[..]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn f32_payload_reads_exactly_into_f64() {
        let a = Tensor::<f32>::vector(vec![0.1, 0.2]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a", &a)]).unwrap();
        let back = read_tensors::<f64, _>(&buf[..]).unwrap();
        assert_eq!(back[0].1.data(), &[0.1f32 as f64, 0.2f32 as f64]);
    }
}
