//! Byte payloads <-> framed bit-streams.
//!
//! Layout: a 32-bit big-endian byte count, the payload bits MSB-first, then
//! zero padding up to the channel capacity. With ECC enabled the header and
//! body are zero-padded to whole `k`-bit blocks and every block is replaced
//! by its `n`-bit BCH codeword before the final padding.

mod bch;

pub use bch::{Bch, Decoded};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_BITS: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PayloadError {
    #[error("payload needs {needed_bits} bits but capacity is {capacity_bits} bits (at most {max_bytes} payload bytes fit)")]
    PayloadTooLarge {
        needed_bits: usize,
        capacity_bits: usize,
        max_bytes: usize,
    },
    #[error("framing error: {0}")]
    Framing(String),
    #[error("uncorrectable BCH block")]
    UncorrectableBlock,
    #[error("invalid BCH({n},{k}): {reason}")]
    InvalidCode { n: usize, k: usize, reason: String },
    #[error("block length {got}, expected {expected}")]
    BlockLength { expected: usize, got: usize },
}

/// Error-correction settings (`ecc.enabled`, `ecc.n`, `ecc.k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EccConfig {
    pub enabled: bool,
    pub n: usize,
    pub k: usize,
}

impl Default for EccConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            n: 255,
            k: 131,
        }
    }
}

impl EccConfig {
    pub fn bch(n: usize, k: usize) -> Self {
        Self { enabled: true, n, k }
    }

    fn code(&self) -> Result<Option<Bch>, PayloadError> {
        if self.enabled {
            Bch::new(self.n, self.k).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// A framed bit-stream exactly `capacity` bits long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPayload {
    bits: Vec<bool>,
}

impl BitPayload {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }
}

/// Unframed payload plus the number of bit errors the ECC repaired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unframed {
    pub bytes: Vec<u8>,
    pub corrected_bits: usize,
}

/// Bits occupied by a framed payload of `payload_len` bytes (before padding).
pub fn framed_len_bits(payload_len: usize, ecc: &EccConfig) -> usize {
    let raw = HEADER_BITS + 8 * payload_len;
    if ecc.enabled {
        raw.div_ceil(ecc.k) * ecc.n
    } else {
        raw
    }
}

/// Largest payload, in bytes, whose frame fits `capacity_bits`.
pub fn max_payload_bytes(capacity_bits: usize, ecc: &EccConfig) -> usize {
    let message_bits = if ecc.enabled {
        (capacity_bits / ecc.n) * ecc.k
    } else {
        capacity_bits
    };
    message_bits.saturating_sub(HEADER_BITS).min(u32::MAX as usize * 8) / 8
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
        .collect()
}

/// Packs MSB-first bits; a trailing partial byte is zero-filled.
pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (u8::from(b) << (7 - i)))
        })
        .collect()
}

pub fn frame_payload(bytes: &[u8], capacity_bits: usize, ecc: &EccConfig) -> Result<BitPayload, PayloadError> {
    let code = ecc.code()?;
    let needed_bits = framed_len_bits(bytes.len(), ecc);
    if needed_bits > capacity_bits || bytes.len() > u32::MAX as usize {
        return Err(PayloadError::PayloadTooLarge {
            needed_bits,
            capacity_bits,
            max_bytes: max_payload_bytes(capacity_bits, ecc),
        });
    }
    let mut message = bytes_to_bits(&(bytes.len() as u32).to_be_bytes());
    message.extend(bytes_to_bits(bytes));

    let mut bits = match code {
        None => message,
        Some(code) => {
            message.resize(message.len().div_ceil(code.k()) * code.k(), false);
            let mut out = Vec::with_capacity(needed_bits);
            for block in message.chunks(code.k()) {
                out.extend(code.encode(block)?);
            }
            out
        }
    };
    bits.resize(capacity_bits, false);
    Ok(BitPayload { bits })
}

pub fn unframe_payload(bits: &[bool], ecc: &EccConfig) -> Result<Vec<u8>, PayloadError> {
    unframe_payload_with_stats(bits, ecc).map(|u| u.bytes)
}

pub fn unframe_payload_with_stats(bits: &[bool], ecc: &EccConfig) -> Result<Unframed, PayloadError> {
    let capacity = bits.len();
    match ecc.code()? {
        None => {
            let len = read_header(bits, capacity, ecc)?;
            Ok(Unframed {
                bytes: bits_to_bytes(&bits[HEADER_BITS..HEADER_BITS + 8 * len]),
                corrected_bits: 0,
            })
        }
        Some(code) => {
            let available = capacity / code.n();
            let mut message = Vec::new();
            let mut corrected = 0;
            let mut decode_until = |blocks: usize, message: &mut Vec<bool>| -> Result<(), PayloadError> {
                if blocks > available {
                    return Err(PayloadError::Framing(format!(
                        "frame needs {blocks} BCH blocks, only {available} fit"
                    )));
                }
                let done = message.len() / code.k();
                for b in done..blocks {
                    let d = code.decode(&bits[b * code.n()..(b + 1) * code.n()])?;
                    corrected += d.corrected;
                    message.extend(d.message);
                }
                Ok(())
            };
            decode_until(HEADER_BITS.div_ceil(code.k()), &mut message)?;
            let len = read_header(&message, capacity, ecc)?;
            decode_until((HEADER_BITS + 8 * len).div_ceil(code.k()), &mut message)?;
            Ok(Unframed {
                bytes: bits_to_bytes(&message[HEADER_BITS..HEADER_BITS + 8 * len]),
                corrected_bits: corrected,
            })
        }
    }
}

fn read_header(bits: &[bool], capacity: usize, ecc: &EccConfig) -> Result<usize, PayloadError> {
    if bits.len() < HEADER_BITS {
        return Err(PayloadError::Framing(format!(
            "{} bits cannot hold the {HEADER_BITS}-bit length header",
            bits.len()
        )));
    }
    let header = bits_to_bytes(&bits[..HEADER_BITS]);
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if framed_len_bits(len, ecc) > capacity {
        return Err(PayloadError::Framing(format!(
            "length header claims {len} bytes, more than the {capacity}-bit channel holds"
        )));
    }
    Ok(len)
}
