//! Named, shape-tagged tensor files and `u8` label grids.
//!
//! A tensor record is `u64` name length, name bytes, `u64` rank, `u64`
//! dims, then little-endian `f64` values. Blob files are the magic
//! `GEPBLOB1`, a `u64` record count and the records. Label files are the
//! magic `GEPLBL01`, `u64` count, height, width and the raw bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{GepError, Result};
use crate::tensor::Tensor;

const BLOB_MAGIC: &[u8; 8] = b"GEPBLOB1";
const LABEL_MAGIC: &[u8; 8] = b"GEPLBL01";
/// Guards allocations driven by corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_record<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_u64(w, t.ndim() as u64)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let nl = read_u64(r)?;
    if nl > 4096 {
        return Err(GepError::Format(format!("tensor name of {nl} bytes")));
    }
    let mut name = vec![0u8; nl as usize];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name).map_err(|_| GepError::Format("tensor name is not UTF-8".into()))?;
    let rank = read_u64(r)?;
    if rank > 8 {
        return Err(GepError::Format(format!("tensor {name} has rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_u64(r)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d)).filter(|&n| n <= MAX_ELEMENTS);
    let n = n.ok_or_else(|| GepError::Format(format!("tensor {name} has shape {shape:?}")))?;
    let mut bytes = vec![0u8; n as usize * 8];
    read_exact(r, &mut bytes)?;
    let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
    Ok((name, Tensor::new(&shape, data)?))
}

pub fn write_blob<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(BLOB_MAGIC)?;
    write_u64(&mut w, tensors.len() as u64)?;
    for (name, t) in tensors {
        write_record(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_blob<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    expect_magic(&mut r, BLOB_MAGIC)?;
    let n = read_u64(&mut r)?;
    (0..n).map(|_| read_record(&mut r)).collect()
}

pub fn write_blob_file(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    write_blob(BufWriter::new(File::create(path)?), tensors)
}

pub fn read_blob_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_blob(BufReader::new(File::open(path)?))
}

/// Looks up a tensor by name.
pub fn take(blob: &[(String, Tensor)], name: &str) -> Result<Tensor> {
    blob.iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| GepError::Format(format!("missing tensor `{name}`")))
}

/// `count` label grids of `height × width` bytes each, concatenated.
pub fn write_labels<W: Write>(mut w: W, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    let cell = height * width;
    if cell == 0 || !labels.len().is_multiple_of(cell) {
        return Err(GepError::Shape(format!("{} labels for {height}×{width} grids", labels.len())));
    }
    w.write_all(LABEL_MAGIC)?;
    for v in [labels.len() / cell, height, width] {
        write_u64(&mut w, v as u64)?;
    }
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

/// Returns `(height, width, bytes)`.
pub fn read_labels<R: Read>(mut r: R) -> Result<(usize, usize, Vec<u8>)> {
    expect_magic(&mut r, LABEL_MAGIC)?;
    let (n, h, w) = (read_u64(&mut r)?, read_u64(&mut r)?, read_u64(&mut r)?);
    let total = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|&v| v <= MAX_ELEMENTS)
        .ok_or_else(|| GepError::Format("label header out of range".into()))?;
    let mut bytes = vec![0u8; total as usize];
    read_exact(&mut r, &mut bytes)?;
    Ok((h as usize, w as usize, bytes))
}

pub fn write_labels_file(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    write_labels(BufWriter::new(File::create(path)?), height, width, labels)
}

pub fn read_labels_file(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_labels(BufReader::new(File::open(path)?))
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut m = [0u8; 8];
    read_exact(r, &mut m)?;
    if &m != magic {
        return Err(GepError::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| GepError::Format("truncated file".into()))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let a = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap();
        let b = Tensor::scalar(4.25);
        let mut buf = Vec::new();
        write_blob(&mut buf, &[("a", &a), ("b", &b)]).unwrap();
        let back = read_blob(buf.as_slice()).unwrap();
        assert_eq!(take(&back, "a").unwrap(), a);
        assert_eq!(take(&back, "b").unwrap(), b);
        assert!(take(&back, "c").is_err());
        assert!(read_blob(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn label_round_trip() {
        let labels: Vec<u8> = (0..24).map(|v| v as u8).collect();
        let mut buf = Vec::new();
        write_labels(&mut buf, 3, 4, &labels).unwrap();
        assert_eq!(read_labels(buf.as_slice()).unwrap(), (3, 4, labels));
        assert!(write_labels(&mut Vec::new(), 5, 5, &[0; 24]).is_err());
    }
}
