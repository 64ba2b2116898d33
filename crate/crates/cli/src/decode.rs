//! Human-readable dump of a message log: one frame per line of input, in
//! the `<sender> <hex>` layout cmd_run writes (a bare hex line works too).

use std::fmt::Write as _;
use std::path::Path;

use doubletree::stopset::parse_update;
use doubletree::wire::{decode_stopset, decompress_update};

use crate::errors::Fail;

fn flags_text(bloom: bool, compressed: bool) -> String {
    format!("{} ipv4 {}", if bloom { "bloom" } else { "list" }, if compressed { "deflate" } else { "raw" })
}

fn describe_bloom_body(out: &mut String, body: &[u8]) {
    if body.len() >= 8 {
        let m = u32::from_be_bytes(body[0..4].try_into().unwrap());
        let k = u32::from_be_bytes(body[4..8].try_into().unwrap());
        let expected = 8 + (m as usize).div_ceil(8);
        if m > 0 && k >= 1 && k <= 5 && body.len() == expected {
            let set: u64 = body[8..].iter().map(|b| b.count_ones() as u64).sum();
            let _ = writeln!(out, "  filter: m={m} bits, k={k} hashes, {set} bits set");
            return;
        }
    }
    let _ = writeln!(out, "  filter fragment: {} bytes (reassemble consecutive frames)", body.len());
}

/// Decodes one frame (one input line) into indented text.
fn describe_frame(sender: Option<&str>, bytes: &[u8], line: usize) -> Result<String, Fail> {
    let payload =
        decode_stopset(bytes).map_err(|e| Fail::decode_frame(format!("line {line}: {e}")))?;
    let mut out = String::new();
    let from = sender.map(|s| format!(" from {s}")).unwrap_or_default();
    let _ = writeln!(out, "frame{from}: {} bytes, type 0 (stop-set)", bytes.len());
    let _ = writeln!(
        out,
        "  window {}  slice {}  flags: {}",
        payload.window,
        payload.slice,
        flags_text(payload.bloom, payload.compressed)
    );
    let body = if payload.compressed {
        decompress_update(&payload.body).map_err(|e| Fail::decode_frame(format!("line {line}: {e}")))?
    } else {
        payload.body.clone()
    };
    if payload.bloom {
        describe_bloom_body(&mut out, &body);
    } else {
        let pairs = parse_update(&body)
            .map_err(|e| Fail::decode_frame(format!("line {line}: pair list at offset 8: {e}")))?;
        let _ = writeln!(out, "  pairs ({}):", pairs.len());
        for p in pairs {
            let _ = writeln!(out, "    {} -> {}", p.interface, p.dest_key);
        }
    }
    Ok(out)
}

pub fn cmd_decode(path: &Path) -> Result<String, Fail> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Fail::io(format!("cannot read {}: {e}", path.display())))?;
    let mut out = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        let (sender, hex_text) = match tokens.as_slice() {
            [] => continue,
            [h] => (None, *h),
            [s, h] => (Some(*s), *h),
            _ => {
                return Err(Fail::decode_line(format!(
                    "line {line}: expected `<sender> <hex>` or `<hex>`, found {} fields",
                    tokens.len()
                )))
            }
        };
        let bytes =
            hex::decode(hex_text).map_err(|e| Fail::decode_line(format!("line {line}: bad hex: {e}")))?;
        out.push_str(&describe_frame(sender, &bytes, line)?);
    }
    Ok(out)
}
