use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

use super::Dataset;

pub const MAGIC: &[u8; 4] = b"IPDS";
pub const VERSION: usize = 1;
/// Magic, version and five u32 dimensions.
pub const HEADER_LEN: usize = 28;
pub const CRC_LEN: usize = 4;

/// `IPDS` bytes: header, u8 pixels, u32 labels, then a CRC32 of everything
/// before it.
pub fn to_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION)?;
    for v in [
        d.len(),
        d.channels(),
        d.height(),
        d.width(),
        d.num_classes(),
    ] {
        w.u32(v)?;
    }
    w.bytes(d.pixels());
    for &l in d.labels() {
        w.u32(l)?;
    }
    let crc = crc32fast::hash(&w.buf);
    w.bytes(&crc.to_le_bytes());
    Ok(w.buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(Error::Format(format!(
            "{} bytes is too short for a dataset",
            bytes.len()
        )));
    }
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not an IPDS dataset (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let (n, c, h, w, classes) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let pixels = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("dataset dimensions overflow".into()))?;
    let expected = HEADER_LEN + pixels + 4 * n + CRC_LEN;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[..bytes.len() - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("dataset checksum mismatch".into()));
    }
    let images = r.take(pixels)?.to_vec();
    let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    Dataset::new(c, h, w, images, labels, classes, None).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(path: &Path, d: &Dataset) -> Result<()> {
    std::fs::write(path, to_bytes(d)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
