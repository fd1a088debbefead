//! Binary vector files: an 8-byte header (4-byte magic, little-endian `u32`
//! dimension) followed by row-major little-endian `f32` values.

use thiserror::Error;

/// Token embedding file.
pub const MAGIC_EMBEDDING: [u8; 4] = *b"AEMB";
/// Synthetic image payload (mock backend).
pub const MAGIC_IMAGE: [u8; 4] = *b"AIMG";
/// Matrix of cached image embeddings, one row per image.
pub const MAGIC_MATRIX: [u8; 4] = *b"AEMX";

pub const HEADER_LEN: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("file too short for header ({0} bytes)")]
    Truncated(usize),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("zero dimension")]
    ZeroDimension,
    #[error("payload of {len} bytes is not a whole number of {dim}-float rows")]
    Ragged { len: usize, dim: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

pub fn encode_rows(magic: [u8; 4], dim: usize, rows: &[&[f32]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rows.len() * dim * 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_vector(magic: [u8; 4], values: &[f32]) -> Vec<u8> {
    encode_rows(magic, values.len(), &[values])
}

/// Decodes a file into `(dim, flat values)`.
pub fn decode_rows(magic: [u8; 4], bytes: &[u8]) -> Result<(usize, Vec<f32>), CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated(bytes.len()));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if found != magic {
        return Err(CodecError::BadMagic { expected: magic, found });
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice")) as usize;
    if dim == 0 {
        return Err(CodecError::ZeroDimension);
    }
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(dim * 4) {
        return Err(CodecError::Ragged { len: body.len(), dim });
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite(i));
    }
    Ok((dim, values))
}

/// Decodes a single-row file.
pub fn decode_vector(magic: [u8; 4], bytes: &[u8]) -> Result<Vec<f32>, CodecError> {
    let (dim, values) = decode_rows(magic, bytes)?;
    if values.len() != dim {
        return Err(CodecError::Ragged { len: values.len() * 4, dim });
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn vector_round_trip_is_bit_exact(values in prop::collection::vec(-1e6f32..1e6, 1..64)) {
            let bytes = encode_vector(MAGIC_EMBEDDING, &values);
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * values.len());
            let back = decode_vector(MAGIC_EMBEDDING, &bytes).unwrap();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn truncated_and_wrong_magic() {
        let bytes = encode_vector(MAGIC_IMAGE, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            decode_vector(MAGIC_IMAGE, &bytes[..bytes.len() - 2]),
            Err(CodecError::Ragged { .. })
        ));
        assert!(matches!(decode_vector(MAGIC_EMBEDDING, &bytes), Err(CodecError::BadMagic { .. })));
        assert_eq!(decode_vector(MAGIC_IMAGE, &bytes[..3]), Err(CodecError::Truncated(3)));
    }
}
