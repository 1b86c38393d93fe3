//! Binary tensor blocks: `b"PPB1"`, u16 schema version, u16 rank, `rank`
//! u32 dimensions, then row-major little-endian f32 data.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"PPB1";
pub const BLOCK_VERSION: u16 = 1;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    encode(&[m.rows() as u32, m.cols() as u32], m.as_slice())
}

pub fn encode(dims: &[u32], values: &[f64]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().map(|&d| d as usize).product::<usize>(), values.len());
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes a rank-2 block into a matrix.
pub fn decode_matrix(name: &str, bytes: &[u8]) -> Result<Matrix> {
    let (dims, values) = decode(name, bytes)?;
    let [rows, cols] = dims[..] else {
        return Err(format_err(name, format!("expected rank 2, found rank {}", dims.len())));
    };
    Matrix::from_vec(rows as usize, cols as usize, values)
}

pub fn decode(name: &str, bytes: &[u8]) -> Result<(Vec<u32>, Vec<f64>)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err(name, "bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BLOCK_VERSION {
        return Err(format_err(name, format!("unsupported block version {version}")));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(name, "truncated header".into()));
    }
    let dims: Vec<u32> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| format_err(name, "dimension overflow".into()))?;
    let body = &bytes[header..];
    if body.len() != 4 * count {
        return Err(format_err(
            name,
            format!("expected {} data bytes, found {}", 4 * count, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((dims, values))
}

fn format_err(name: &str, reason: String) -> Error {
    Error::Format {
        block: name.to_string(),
        reason,
    }
}
