//! Binary message codec for the stop-set exchange.
//!
//! Every message starts with a 4-byte big-endian header: a 16-bit length
//! covering the whole message (header included) and a 16-bit type. Type 0 is
//! the only defined type, the stop-set update:
//!
//! ```text
//! offset  0               2               4      5      6
//!         +-------+-------+-------+-------+------+------+----------------+----------
//!         |    length     |    type (0)   |window| slice| s i c  13x0    | stop set
//!         +-------+-------+-------+-------+------+------+----------------+----------
//! ```
//!
//! The three flag bits occupy the most significant bits of the 16-bit flag
//! field: `s` (0 = pair list, 1 = Bloom filter bits), `i` (0 = IPv4; IPv6 is
//! not supported), `c` (0 = raw, 1 = DEFLATE-compressed). The remaining 13
//! bits are reserved: written as zero, tolerated nonzero on input.
//!
//! Updates larger than one 65535-byte frame are split into several messages
//! carrying the same window/slice; [`UpdateAssembler`] puts them back
//! together on the receiving side.

use std::io::{Read, Write};

/// The stop-set update message type.
pub const TYPE_STOP_SET: u16 = 0;
/// Bytes in the generic header.
pub const HEADER_LEN: usize = 4;
/// A frame's length field is 16-bit, so this caps the whole message.
pub const MAX_FRAME_LEN: usize = u16::MAX as usize;
/// Uncompressed update bytes carried per frame when splitting. A multiple of
/// 8 so list-mode fragments stay aligned to whole pairs, and far enough under
/// the frame cap that even incompressible DEFLATE output (stored blocks add
/// ~5 bytes per 64 KiB plus a 2-byte wrapper) still fits.
pub const SPLIT_CHUNK: usize = 60_000;

const FLAG_S: u16 = 1 << 15;
const FLAG_I: u16 = 1 << 14;
const FLAG_C: u16 = 1 << 13;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("truncated header at offset {offset}: need 4 bytes, have {have}")]
    TruncatedHeader { offset: usize, have: usize },
    #[error("length field {declared} at offset {offset} is below the 4-byte minimum")]
    LengthBelowMinimum { offset: usize, declared: u16 },
    #[error("length field {declared} at offset {offset} but only {have} bytes present")]
    Truncated { offset: usize, declared: u16, have: usize },
    #[error("length field {declared} at offset {offset} but {have} bytes present; trailing bytes start at offset {}", *offset + *declared as usize)]
    TrailingBytes { offset: usize, declared: u16, have: usize },
    #[error("unknown message type {found} at offset {offset}")]
    UnknownType { offset: usize, found: u16 },
    #[error("stop-set payload at offset {offset} is {have} bytes; window/slice/flags need 4")]
    TruncatedStopSet { offset: usize, have: usize },
    #[error("IPv6 flag set at offset {offset}: only IPv4 keys are supported")]
    Ipv6Unsupported { offset: usize },
    #[error("pair-list body of {len} bytes at offset {offset} is not a whole number of 8-byte pairs")]
    RaggedPairs { offset: usize, len: usize },
    #[error("update of {len} bytes exceeds one frame; split it before encoding")]
    Oversize { len: usize },
    #[error("corrupt compressed body: {reason}")]
    BadDeflate { reason: String },
    #[error("Bloom update fragments for window {window} slice {slice} interrupted before completion")]
    IncompleteBloomUpdate { window: u8, slice: u8 },
    #[error("Bloom update for window {window} slice {slice}: descriptor promises {expected} bytes, got {got}")]
    BloomLengthMismatch { window: u8, slice: u8, expected: usize, got: usize },
}

/// A decoded type-0 payload. `body` is exactly what the frame carried: still
/// compressed when `compressed` is set, and possibly just one fragment of a
/// split update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopSetPayload {
    pub window: u8,
    pub slice: u8,
    /// s flag: body bytes are Bloom filter bits rather than a pair list.
    pub bloom: bool,
    /// c flag: body bytes are DEFLATE-compressed.
    pub compressed: bool,
    pub body: Vec<u8>,
}

/// Frames `payload` under the generic header.
pub fn encode_message(msg_type: u16, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let total = HEADER_LEN + payload.len();
    if total > MAX_FRAME_LEN {
        return Err(WireError::Oversize { len: payload.len() });
    }
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&(total as u16).to_be_bytes());
    out.extend_from_slice(&msg_type.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits one message off the front of `bytes`, checking the length field
/// against what is actually there. Returns (type, payload).
pub fn decode_message(bytes: &[u8]) -> Result<(u16, &[u8]), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::TruncatedHeader { offset: 0, have: bytes.len() });
    }
    let declared = u16::from_be_bytes([bytes[0], bytes[1]]);
    let msg_type = u16::from_be_bytes([bytes[2], bytes[3]]);
    if (declared as usize) < HEADER_LEN {
        return Err(WireError::LengthBelowMinimum { offset: 0, declared });
    }
    match bytes.len().cmp(&(declared as usize)) {
        std::cmp::Ordering::Less => Err(WireError::Truncated { offset: 0, declared, have: bytes.len() }),
        std::cmp::Ordering::Greater => Err(WireError::TrailingBytes { offset: 0, declared, have: bytes.len() }),
        std::cmp::Ordering::Equal => Ok((msg_type, &bytes[HEADER_LEN..declared as usize])),
    }
}

/// Encodes a complete stop-set frame, header included. Reserved flag bits are
/// written as zero. Fails on an IPv6 payload, a ragged raw pair list, or a
/// body too large for one frame.
pub fn encode_stopset(p: &StopSetPayload) -> Result<Vec<u8>, WireError> {
    if !p.bloom && !p.compressed && p.body.len() % 8 != 0 {
        return Err(WireError::RaggedPairs { offset: 8, len: p.body.len() });
    }
    let mut flags = 0u16;
    if p.bloom {
        flags |= FLAG_S;
    }
    if p.compressed {
        flags |= FLAG_C;
    }
    let mut payload = Vec::with_capacity(4 + p.body.len());
    payload.push(p.window);
    payload.push(p.slice);
    payload.extend_from_slice(&flags.to_be_bytes());
    payload.extend_from_slice(&p.body);
    encode_message(TYPE_STOP_SET, &payload)
}

/// Decodes a complete stop-set frame (header included). Nonzero reserved
/// bits are accepted and dropped, so a re-encode normalizes them to zero.
pub fn decode_stopset(bytes: &[u8]) -> Result<StopSetPayload, WireError> {
    let (msg_type, payload) = decode_message(bytes)?;
    if msg_type != TYPE_STOP_SET {
        return Err(WireError::UnknownType { offset: 2, found: msg_type });
    }
    if payload.len() < 4 {
        return Err(WireError::TruncatedStopSet { offset: HEADER_LEN, have: payload.len() });
    }
    let flags = u16::from_be_bytes([payload[2], payload[3]]);
    if flags & FLAG_I != 0 {
        return Err(WireError::Ipv6Unsupported { offset: HEADER_LEN + 2 });
    }
    let p = StopSetPayload {
        window: payload[0],
        slice: payload[1],
        bloom: flags & FLAG_S != 0,
        compressed: flags & FLAG_C != 0,
        body: payload[4..].to_vec(),
    };
    if !p.bloom && !p.compressed && p.body.len() % 8 != 0 {
        return Err(WireError::RaggedPairs { offset: HEADER_LEN + 4, len: p.body.len() });
    }
    Ok(p)
}

/// Raw DEFLATE (RFC 1951), no container.
pub fn compress_update(bytes: &[u8]) -> Vec<u8> {
    let mut enc = flate2::write::DeflateEncoder::new(Vec::new(), flate2::Compression::default());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("finishing a Vec-backed encoder cannot fail")
}

pub fn decompress_update(bytes: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    flate2::read::DeflateDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| WireError::BadDeflate { reason: e.to_string() })?;
    Ok(out)
}

/// Turns one logical update into one or more frames. `update` is the
/// uncompressed content: serialized pairs (`bloomts = false`) or Bloom
/// descriptor + filter bits (`bloom = true`). Splitting happens on the
/// uncompressed bytes in [`SPLIT_CHUNK`] pieces; compression is applied per
/// frame afterwards, so each frame stays independently decodable.
pub fn encode_update(
    window: u8,
    slice: u8,
    bloom: bool,
    compress: bool,
    update: &[u8],
) -> Result<Vec<Vec<u8>>, WireError> {
    let mut frames = Vec::new();
    let mut rest = update;
    loop {
        let take = rest.len().min(SPLIT_CHUNK);
        let (piece, tail) = rest.split_at(take);
        let body = if compress { compress_update(piece) } else { piece.to_vec() };
        frames.push(encode_stopset(&StopSetPayload { window, slice, bloom, compressed: compress, body })?);
        rest = tail;
        if rest.is_empty() {
            break;
        }
    }
    Ok(frames)
}

/// A reassembled update: the full uncompressed content bytes for one
/// (window, slice), plus which representation they carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompleteUpdate {
    pub window: u8,
    pub slice: u8,
    pub bloom: bool,
    pub content: Vec<u8>,
}

/// Rebuilds logical updates from a stream of frames.
///
/// Pair-list fragments are whole updates in their own right (splitting keeps
/// them pair-aligned), so every list frame completes immediately. Bloom
/// fragments accumulate until the length promised by the 8-byte descriptor
/// at the front of the filter bytes is reached; fragments of one update must
/// arrive consecutively, which the ring's FIFO mailboxes guarantee.
#[derive(Debug, Default)]
pub struct UpdateAssembler {
    pending: Option<CompleteUpdate>,
}

impl UpdateAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one decoded frame; returns a finished update if this frame
    /// completed one.
    pub fn push(&mut self, frame: &StopSetPayload) -> Result<Option<CompleteUpdate>, WireError> {
        let content = if frame.compressed { decompress_update(&frame.body)? } else { frame.body.clone() };
        if !frame.bloom {
            if let Some(p) = &self.pending {
                return Err(WireError::IncompleteBloomUpdate { window: p.window, slice: p.slice });
            }
            if content.len() % 8 != 0 {
                return Err(WireError::RaggedPairs { offset: HEADER_LEN + 4, len: content.len() });
            }
            return Ok(Some(CompleteUpdate {
                window: frame.window,
                slice: frame.slice,
                bloom: false,
                content,
            }));
        }
        let mut pending = match self.pending.take() {
            Some(p) if p.window == frame.window && p.slice == frame.slice => p,
            Some(p) => return Err(WireError::IncompleteBloomUpdate { window: p.window, slice: p.slice }),
            None => CompleteUpdate { window: frame.window, slice: frame.slice, bloom: true, content: Vec::new() },
        };
        pending.content.extend_from_slice(&content);
        // The filter descriptor (4 bytes of m, 4 of k) arrives in the first
        // fragment; SPLIT_CHUNK guarantees that.
        if pending.content.len() >= 8 {
            let m = u32::from_be_bytes(pending.content[0..4].try_into().unwrap());
            let expected = 8 + (m as usize).div_ceil(8);
            if pending.content.len() > expected {
                return Err(WireError::BloomLengthMismatch {
                    window: pending.window,
                    slice: pending.slice,
                    expected,
                    got: pending.content.len(),
                });
            }
            if pending.content.len() == expected {
                return Ok(Some(pending));
            }
        }
        self.pending = Some(pending);
        Ok(None)
    }

    /// True while a split Bloom update is still missing fragments.
    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }
}
