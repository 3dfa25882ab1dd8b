//! PRLW weight container: a flat list of named tensors in a little-endian
//! binary layout.
//!
//! ```text
//! magic "PRLW" | u32 version | u32 entry count
//! per entry: u16 name length | name bytes (UTF-8) | u8 rank
//!            | rank x u32 extents | extents product x f32 data
//! ```
//!
//! Writing then reading returns bit-identical tensors; the reader rejects
//! unknown versions, malformed entries, truncation, and trailing bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"PRLW";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(out: &mut W, entries: &[(&str, &Tensor)]) -> Result<()> {
    {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in entries {
            if !seen.insert(*name) {
                return Err(TensorError::Container(format!(
                    "duplicate entry name '{name}'"
                )));
            }
        }
    }
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| TensorError::Container("too many entries".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len()).map_err(|_| {
            TensorError::Container(format!("entry name longer than 65535 bytes: '{name}'"))
        })?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&[tensor.rank() as u8])?;
        for &e in tensor.shape() {
            let extent = u32::try_from(e)
                .map_err(|_| TensorError::Container(format!("extent {e} exceeds u32")))?;
            out.write_all(&extent.to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(TensorError::Container(format!(
            "bad magic {magic:?}, not a PRLW file"
        )));
    }
    let version = read_u32(input, "version")?;
    if version > FORMAT_VERSION {
        return Err(TensorError::Container(format!(
            "format version {version} is newer than supported version {FORMAT_VERSION}"
        )));
    }
    let count = read_u32(input, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    let mut seen = std::collections::HashSet::new();
    for i in 0..count {
        let name_len = read_u16(input, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(input, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| TensorError::Container(format!("entry {i}: name is not UTF-8")))?;
        if !seen.insert(name.clone()) {
            return Err(TensorError::Container(format!(
                "duplicate entry name '{name}'"
            )));
        }
        let mut rank = [0u8; 1];
        read_exact(input, &mut rank, "rank")?;
        let rank = rank[0] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::Container(format!(
                "entry '{name}': rank {rank} out of range 1..={MAX_RANK}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = read_u32(input, "extent")? as usize;
            if e == 0 {
                return Err(TensorError::Container(format!(
                    "entry '{name}': zero extent"
                )));
            }
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| TensorError::Container(format!("entry '{name}': size overflow")))?;
            shape.push(e);
        }
        let mut bytes = vec![0u8; numel * 4];
        read_exact(input, &mut bytes, "tensor data")?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    let mut probe = [0u8; 1];
    match input.read(&mut probe)? {
        0 => Ok(entries),
        _ => Err(TensorError::Container(
            "trailing bytes after final entry".into(),
        )),
    }
}

pub fn save_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    write_tensors(&mut writer, entries)?;
    writer.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path)?;
    read_tensors(&mut BufReader::new(file))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            TensorError::Container(format!("truncated file while reading {what}"))
        } else {
            TensorError::Io(e)
        }
    })
}

fn read_u16<R: Read>(input: &mut R, what: &str) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(input, &mut buf, what)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<(String, Tensor)> {
        vec![
            (
                "backbone.conv1.weight".to_string(),
                Tensor::from_fn(&[4, 3, 3, 3], |i| (i as f32 * 0.713).sin()),
            ),
            (
                "head.bias".to_string(),
                Tensor::from_vec(&[5], vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, 3e8]).unwrap(),
            ),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let entries = sample_entries();
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &refs).unwrap();
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert!(t0.bitwise_eq(t1));
        }
    }

    #[test]
    fn newer_version_is_rejected() {
        let entries = sample_entries();
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &refs).unwrap();
        buf[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = read_tensors(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(read_tensors(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncation_is_reported() {
        let entries = sample_entries();
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &refs).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensors(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn trailing_bytes_are_reported() {
        let entries = sample_entries();
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &refs).unwrap();
        buf.push(0);
        let err = read_tensors(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }

    #[test]
    fn duplicate_names_are_rejected_both_ways() {
        let t = Tensor::ones(&[2]);
        let mut buf = Vec::new();
        assert!(write_tensors(&mut buf, &[("w", &t), ("w", &t)]).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.prlw");
        let entries = sample_entries();
        let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(&path, &refs).unwrap();
        let back = load_tensors(&path).unwrap();
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert!(t0.bitwise_eq(t1));
        }
    }
}
