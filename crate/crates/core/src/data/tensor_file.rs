//! Raw tensor files: magic `SIVC`, u16 version, u16 rank, rank x u32 dims,
//! then the row-major f32 payload, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SIVC";
pub const TENSOR_FORMAT_VERSION: u16 = 1;

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape {
            expected: shape.to_vec(),
            actual: vec![data.len()],
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, shape, data)?;
    w.flush()?;
    Ok(())
}

pub fn encode<W: Write>(w: &mut W, shape: &[usize], data: &[f32]) -> Result<()> {
    let fail = |what: &str| Error::Domain(format!("{what} does not fit the tensor header"));
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(TENSOR_FORMAT_VERSION)?;
    w.write_u16::<LittleEndian>(u16::try_from(shape.len()).map_err(|_| fail("rank"))?)?;
    for &d in shape {
        w.write_u32::<LittleEndian>(u32::try_from(d).map_err(|_| fail("dimension"))?)?;
    }
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Reads a tensor file, returning its shape and payload.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let fail = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| fail(e.to_string()))?;
    decode(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Io(io) => fail(io.to_string()),
        Error::Domain(msg) => fail(msg),
        other => other,
    })
}

pub fn decode<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Domain("not a tensor file (bad magic)".into()));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(Error::Domain(format!("unsupported tensor format version {version}")));
    }
    let rank = r.read_u16::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Domain("tensor dimensions overflow".into()))?;
    let mut data = vec![0.0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Domain("trailing bytes after tensor payload".into()));
    }
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.1).sin().abs()).collect();
        write_tensor(&path, &[2, 3, 4], &data).unwrap();
        let (shape, back) = read_tensor(&path).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        encode(&mut buf, &[1, 2], &[0.5, 1.0]).unwrap();
        assert_eq!(&buf[..4], b"SIVC");
        assert_eq!(&buf[4..8], &[1, 0, 2, 0]);
        assert_eq!(&buf[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 16 + 8);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let mut buf = Vec::new();
        encode(&mut buf, &[4], &[0.0; 4]).unwrap();
        assert!(decode(&mut &buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode(&mut bad.as_slice()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let err = read_tensor(&dir.path().join("missing.bin")).unwrap_err();
        assert!(err.to_string().contains("missing.bin"));
    }
}
