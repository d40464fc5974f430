//! Self-describing binary tensor format and named-tensor bundles.
//!
//! Single tensor record: magic `TAPE`, version u16, rank u16, dims as u64
//! list, then the row-major payload as little-endian f64. A bundle (used
//! for checkpoints and dataset caches) is magic `TAPB`, version u16, a
//! length-prefixed UTF-8 header, entry count u32, then repeated
//! (u16 name length, name bytes, tensor record).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"TAPE";
const BUNDLE_MAGIC: &[u8; 4] = b"TAPB";
const VERSION: u16 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u16).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format { details: format!("bad tensor magic {magic:?}") });
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::Format { details: format!("unsupported tensor version {version}") });
    }
    let rank = read_u16(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(&mut f, t).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut f)
}

/// A bundle of named tensors plus a free-form text header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub header: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new(header: impl Into<String>) -> Self {
        Bundle { header: header.into(), entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format { details: format!("bundle entry '{name}' missing") })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = self.header.as_bytes();
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Bundle> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Format { details: format!("bad bundle magic {magic:?}") });
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(Error::Format { details: format!("unsupported bundle version {version}") });
        }
        let hlen = read_u32(r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        read_exact(r, &mut hbuf)?;
        let header = String::from_utf8(hbuf)
            .map_err(|e| Error::Format { details: format!("bundle header not utf-8: {e}") })?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u16(r)? as usize;
            let mut nbuf = vec![0u8; nlen];
            read_exact(r, &mut nbuf)?;
            let name = String::from_utf8(nbuf)
                .map_err(|e| Error::Format { details: format!("entry name not utf-8: {e}") })?;
            entries.push((name, read_tensor(r)?));
        }
        Ok(Bundle { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Bundle> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Bundle::read(&mut f)
    }
}

/// CSV text for a rank <= 2 tensor (rank 0 and 1 become a single row).
pub fn tensor_to_csv(t: &Tensor) -> Result<String> {
    if t.rank() > 2 {
        return Err(Error::InvalidShape {
            op: "tensor_to_csv",
            shape: t.shape().to_vec(),
            details: "csv export requires rank <= 2".into(),
        });
    }
    let (rows, cols) = match t.shape() {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!(),
    };
    let mut out = String::new();
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.17e}", t.data()[i * cols + j]));
        }
        out.push('\n');
    }
    Ok(out)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format { details: format!("truncated input: {e}") })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let t = Tensor::from_fn(&[3, 4, 2], |i| {
            ((i[0] * 8 + i[1] * 2 + i[2]) as f64).sin() * 1e10
        });
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
        // magic bytes lead the record
        assert_eq!(&buf[..4], b"TAPE");
    }

    #[test]
    fn bundle_roundtrip() {
        let mut b = Bundle::new("seed=7\n");
        b.push("alpha", Tensor::from_fn(&[2, 2], |i| i[0] as f64 - i[1] as f64));
        b.push("beta", Tensor::scalar(3.5));
        let mut buf = Vec::new();
        b.write(&mut buf).unwrap();
        let back = Bundle::read(&mut buf.as_slice()).unwrap();
        assert_eq!(b, back);
        assert_eq!(back.get("beta").unwrap().data(), &[3.5]);
        assert!(back.get("gamma").is_err());
    }

    #[test]
    fn truncated_input_is_a_format_error() {
        let t = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_rank_guard() {
        assert!(tensor_to_csv(&Tensor::zeros(&[2, 2, 2])).is_err());
        let csv = tensor_to_csv(&Tensor::from_fn(&[2, 2], |i| (i[0] * 2 + i[1]) as f64)).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}
