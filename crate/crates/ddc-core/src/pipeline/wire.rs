//! Binary wire format for compressed records crossing the edge/cloud
//! boundary.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DDC1"
//! 4       1     version (1)
//! 5       4     segment_id  u32
//! 9       2     cg          u16
//! 11      4     latent_len  u32
//! 15      4     predicted_error  f32
//! 19      4*n   payload: latent_len f32 values
//! ```

use crate::domain::CompressedRecord;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DDC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 19;

/// Serialized size of a record with the given latent length.
pub fn wire_len(latent_len: usize) -> usize {
    HEADER_LEN + 4 * latent_len
}

/// Encode one record.
pub fn serialize(record: &CompressedRecord) -> Result<Vec<u8>> {
    let cg: u16 = record
        .cg
        .try_into()
        .map_err(|_| Error::InvalidArgument(format!("cg {} exceeds wire range", record.cg)))?;
    let latent_len: u32 = record
        .latent
        .len()
        .try_into()
        .map_err(|_| Error::InvalidArgument("latent too long for wire format".into()))?;
    let mut out = Vec::with_capacity(wire_len(record.latent.len()));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&record.segment_id.to_le_bytes());
    out.extend_from_slice(&cg.to_le_bytes());
    out.extend_from_slice(&latent_len.to_le_bytes());
    out.extend_from_slice(&record.predicted_error.to_le_bytes());
    for v in &record.latent {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode one record from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn deserialize(bytes: &[u8]) -> Result<(CompressedRecord, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            had: bytes.len(),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            got: bytes[4],
        });
    }
    let segment_id = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let cg = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as u32;
    let latent_len = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let predicted_error = f32::from_le_bytes(bytes[15..19].try_into().unwrap());
    let total = wire_len(latent_len);
    if bytes.len() < total {
        return Err(Error::Truncated {
            needed: total,
            had: bytes.len(),
        });
    }
    let mut latent = Vec::with_capacity(latent_len);
    for i in 0..latent_len {
        let at = HEADER_LEN + 4 * i;
        latent.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
    }
    Ok((
        CompressedRecord {
            segment_id,
            cg,
            latent,
            predicted_error,
        },
        total,
    ))
}

/// Encode a stream of records back to back.
pub fn write_stream(records: &[CompressedRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(serialize(r)?);
    }
    Ok(out)
}

/// Decode a whole stream; trailing garbage is an error.
pub fn read_stream(mut bytes: &[u8]) -> Result<Vec<CompressedRecord>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (record, used) = deserialize(bytes)?;
        out.push(record);
        bytes = &bytes[used..];
    }
    Ok(out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn any_record_round_trips(
            segment_id in any::<u32>(),
            cg in 1u32..1024,
            predicted_error in 0.0f32..100.0,
            latent in proptest::collection::vec(-1e3f32..1e3, 0..64),
        ) {
            let record = CompressedRecord { segment_id, cg, latent, predicted_error };
            let bytes = serialize(&record).unwrap();
            prop_assert_eq!(bytes.len(), 19 + 4 * record.latent.len());
            let (back, used) = deserialize(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, record);
        }
    }
}
