//! `LSCT` tensor files: `b"LSCT"`, `u16` version, `u16` rank, `rank x u32`
//! extents, then the row-major payload as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Array;

pub const MAGIC: &[u8; 4] = b"LSCT";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LsctError {
    #[error("lsct parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("lsct io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("value {value} at index {index} is not representable as f32")]
    NotRepresentable { index: usize, value: f64 },
}

fn parse_err(offset: usize, message: impl Into<String>) -> LsctError {
    LsctError::Parse {
        offset,
        message: message.into(),
    }
}

pub fn encode(array: &Array) -> Result<Vec<u8>, LsctError> {
    let mut out = Vec::with_capacity(8 + 4 * array.rank() + 4 * array.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(array.rank() as u16).to_le_bytes());
    for &e in array.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for (index, &value) in array.data().iter().enumerate() {
        let v = value as f32;
        if value.is_finite() && !v.is_finite() {
            return Err(LsctError::NotRepresentable { index, value });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Array, LsctError> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<(usize, &[u8]), LsctError> {
        if bytes.len() < pos + n {
            return Err(parse_err(pos, format!("truncated while reading {what}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &bytes[at..at + n]))
    };
    let (_, magic) = take(4, "magic")?;
    if magic != MAGIC {
        return Err(parse_err(0, "bad magic"));
    }
    let (at, v) = take(2, "version")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != VERSION {
        return Err(parse_err(at, format!("unsupported version {version}")));
    }
    let (_, r) = take(2, "rank")?;
    let rank = u16::from_le_bytes([r[0], r[1]]) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let (_, e) = take(4, "extent")?;
        shape.push(u32::from_le_bytes([e[0], e[1], e[2], e[3]]) as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| parse_err(8, "extent product overflows"))?;
    let payload_start = 8 + 4 * rank;
    let need = count
        .checked_mul(4)
        .ok_or_else(|| parse_err(payload_start, "payload size overflows"))?;
    let (_, payload) = take(need, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if pos != bytes.len() {
        return Err(parse_err(pos, "trailing bytes after payload"));
    }
    Array::new(shape, data).map_err(|e| parse_err(payload_start, e.to_string()))
}

pub fn save(path: &Path, array: &Array) -> Result<(), LsctError> {
    let bytes = encode(array)?;
    let io = |source| LsctError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)
}

pub fn load(path: &Path) -> Result<Array, LsctError> {
    let bytes = fs::read(path).map_err(|source| LsctError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let a = Array::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&a).unwrap();
        assert_eq!(&b[..4], b"LSCT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[2, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn truncated_input_reports_offset() {
        let a = Array::from_vec(vec![1.0, 2.0, 3.0]);
        let b = encode(&a).unwrap();
        for cut in 0..b.len() {
            match decode(&b[..cut]) {
                Err(LsctError::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut b = encode(&Array::scalar(1.0)).unwrap();
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let mut b = encode(&Array::scalar(1.0)).unwrap();
        b[4] = 9;
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_at_f32(values in prop::collection::vec(-1e6f32..1e6f32, 1..64)) {
            let a = Array::from_vec(values.iter().map(|&v| v as f64).collect());
            let back = decode(&encode(&a).unwrap()).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
