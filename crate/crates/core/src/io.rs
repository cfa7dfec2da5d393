//! The `RGR1` binary matrix format and CSV export.
//!
//! Layout: the magic bytes `RGR1`, the row and column counts as u64
//! little-endian, then `rows · cols` f64 little-endian values in row-major
//! order.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGR1";

/// Serializes a matrix (any shape, including empty).
pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 8 * m.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            buf.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 20 {
        return Err(Error::Format(format!("{} bytes is shorter than the 20-byte header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("{rows}×{cols} overflows")))?;
    let payload = &bytes[20..];
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "{rows}×{cols} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    decode(&std::fs::read(path)?)
}

/// Shortest decimal text that parses back to exactly `v`.
pub fn format_value(v: f64) -> String {
    let plain = format!("{v}");
    if plain.len() <= 24 {
        plain
    } else {
        format!("{v:e}")
    }
}

/// One line per row, values separated by commas, every line ending in `\n`.
pub fn to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", format_value(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

/// Parses CSV produced by [`to_csv`].
pub fn from_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", i + 1))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Format("ragged CSV rows".into()));
    }
    let flat: Vec<f64> = rows.concat();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_csv() {
        assert_eq!(to_csv(&DMatrix::identity(2, 2)), "1,0\n0,1\n");
        assert_eq!(to_csv(&DMatrix::zeros(0, 0)), "");
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -0.0, f64::MIN_POSITIVE, 1e300, 0.1, -7.25]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 20 + 48);
        assert_eq!(&buf[20..28], &1.0f64.to_le_bytes());
        let back = decode(&buf).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(decode(&buf[..30]), Err(Error::Format(_))));
        buf[0] = b'X';
        assert!(matches!(decode(&buf), Err(Error::Format(_))));
    }

    #[test]
    fn awkward_values_round_trip_through_csv() {
        let m = DMatrix::from_row_slice(1, 4, &[0.1 + 0.2, 1.0 / 3.0, 5e-324, -123456789.123456789]);
        let back = from_csv(&to_csv(&m)).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
