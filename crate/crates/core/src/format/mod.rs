//! Little-endian binary file formats.
//!
//! | magic  | contents                                        |
//! |--------|-------------------------------------------------|
//! | `DJVW` | model weights                                   |
//! | `DJVS` | oracle sparsity records                         |
//! | `DJVP` | one trained sparsity predictor                  |
//!
//! Every file starts with the 4 magic bytes and a `u32` format version.

mod bytes;
mod records;
mod weights;

pub use bytes::{ByteReader, ByteWriter};
pub use records::{
    decode_records, encode_records, read_records, write_records, RECORDS_MAGIC, RECORDS_VERSION,
};
pub use weights::{
    decode_weights, encode_weights, read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

use sha2::{Digest, Sha256};

/// First 8 bytes of the SHA-256 digest, little-endian.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}
