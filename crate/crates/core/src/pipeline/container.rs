//! `magic | version u32 | header length u64 | JSON header | f64 payload |
//! SHA-256 of everything before it`, all little-endian.

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

const DIGEST: usize = 32;

pub const VERSION: u32 = 1;

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f64]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<f64>), String> {
    if bytes.len() < 20 + DIGEST || &bytes[..8] != magic {
        return Err("not a file of the expected kind (bad magic)".into());
    }
    let (bytes, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(bytes).as_slice() != digest {
        return Err("checksum mismatch (file is corrupt or truncated)".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err("truncated header".into());
    }
    let header = serde_json::from_slice(&body[..len]).map_err(|e| format!("bad header: {e}"))?;
    let payload = &body[len..];
    if payload.len() % 8 != 0 {
        return Err("payload is not a whole number of 64-bit values".into());
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}
