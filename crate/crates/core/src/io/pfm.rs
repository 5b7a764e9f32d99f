use std::path::Path;

use super::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::frame::DepthMap;

/// Reads a single-channel PFM. Non-positive and non-finite samples are invalid.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    decode_pfm(&bytes).map_err(|reason| Error::MalformedDepth {
        path: path.to_path_buf(),
        reason,
    })
}

/// Writes a little-endian single-channel PFM; invalid pixels are stored as 0.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    atomic_write(path, &encode_pfm(depth))
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = (depth.width, depth.height);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    // rows run bottom to top
    for y in (0..h).rev() {
        for x in 0..w {
            let i = y * w + x;
            let v = if depth.valid[i] { depth.values[i] as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a str, String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| "header is not ASCII".to_string())
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<DepthMap, String> {
    let mut pos = 0;
    match header_token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err("three-channel PFM cannot hold depth".into()),
        other => return Err(format!("bad magic '{other}'")),
    }
    let w: usize = header_token(bytes, &mut pos)?.parse().map_err(|_| "bad width".to_string())?;
    let h: usize = header_token(bytes, &mut pos)?.parse().map_err(|_| "bad height".to_string())?;
    let scale: f64 = header_token(bytes, &mut pos)?.parse().map_err(|_| "bad scale".to_string())?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err("degenerate header".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(4)).ok_or("image too large")?;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != need {
        return Err(format!("expected {need} raster bytes, found {}", data.len()));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0; w * h];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (k / w, k % w);
        values[(h - 1 - row) * w + x] = v as f64;
    }
    DepthMap::from_values(w, h, values).map_err(|e| e.to_string())
}
