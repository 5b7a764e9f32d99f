//! On-disk formats: PNG frames, PFM depth, CSV matches, PLY scenes, TUM
//! trajectories, and JSON documents. Every write goes through a temporary
//! file in the destination directory followed by a rename.

mod pfm;
mod ply;
mod png;
mod tum;

use std::io::Write as _;
use std::path::{Path, PathBuf};

pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use ply::{decode_ply, encode_ply, read_ply, write_ply, PLY_PROPERTIES};
pub use png::{encode_srgb8, linear_to_srgb, read_png, srgb_to_linear, write_png};
pub use tum::{format_tum, parse_tum, read_tum, write_tum, TumEntry};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::losses::{Match, MatchSet};
use crate::synthetic::SynthBundle;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let k: Intrinsics = read_json(path)?;
    k.validate()?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    write_json(path, k)
}

/// Reads a match CSV with header `u_prev,v_prev,u_cur,v_cur,confidence`.
pub fn read_matches(path: &Path) -> Result<MatchSet> {
    let bytes = read_bytes(path)?;
    let malformed = |reason: String| Error::MalformedMatches {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    let want = ["u_prev", "v_prev", "u_cur", "v_cur", "confidence"];
    if header.iter().collect::<Vec<_>>() != want {
        return Err(malformed(format!("header must be {}", want.join(","))));
    }
    let mut matches = Vec::new();
    for (i, row) in rdr.deserialize::<Match>().enumerate() {
        let m = row.map_err(|e| malformed(format!("row {}: {e}", i + 2)))?;
        let vals = [m.u_prev, m.v_prev, m.u_cur, m.v_cur, m.confidence];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(malformed(format!("row {}: non-finite value", i + 2)));
        }
        if !(0.0..=1.0).contains(&m.confidence) {
            return Err(malformed(format!("row {}: confidence {} outside [0, 1]", i + 2, m.confidence)));
        }
        matches.push(m);
    }
    Ok(MatchSet::new(matches))
}

pub fn write_matches(path: &Path, set: &MatchSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["u_prev", "v_prev", "u_cur", "v_cur", "confidence"])
        .and_then(|_| {
            set.matches.iter().try_for_each(|m| {
                w.write_record(&[m.u_prev, m.v_prev, m.u_cur, m.v_cur, m.confidence].map(|v| v.to_string()))
            })
        })
        .map_err(|e| Error::Config(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Directory layout shared by the synthetic writer and the file providers.
pub mod layout {
    pub const IMAGES: &str = "images/{index:06}.png";
    pub const DEPTH: &str = "depth/{index:06}.pfm";
    pub const MATCHES: &str = "matches/{prev:06}_{cur:06}.csv";
    pub const INTRINSICS: &str = "intrinsics.json";
    pub const TRAJECTORY: &str = "trajectory.tum";
    pub const PRESET: &str = "preset.json";
}

/// Expands `{index:06}`, `{prev:06}`, and `{cur:06}` style placeholders.
pub fn expand_template(template: &str, index: usize, prev: usize, cur: usize) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let Some(len) = rest[start..].find('}') else {
            out.push_str(&rest[start..]);
            return out;
        };
        let spec = &rest[start + 1..start + len];
        let (name, width) = match spec.split_once(':') {
            Some((n, w)) => (n, w.trim_start_matches('0').parse::<usize>().unwrap_or(0)),
            None => (spec, 0),
        };
        let value = match name {
            "index" => Some(index),
            "prev" => Some(prev),
            "cur" => Some(cur),
            _ => None,
        };
        match value {
            Some(v) => out.push_str(&format!("{v:0width$}")),
            None => out.push_str(&rest[start..start + len + 1]),
        }
        rest = &rest[start + len + 1..];
    }
    out.push_str(rest);
    out
}

/// Writes frames, depths, matches, intrinsics, ground-truth trajectory, and
/// the preset into `dir`.
pub fn write_bundle(dir: &Path, bundle: &SynthBundle) -> Result<()> {
    for (i, (img, depth)) in bundle.frames.iter().zip(&bundle.depths).enumerate() {
        write_png(&dir.join(expand_template(layout::IMAGES, i, 0, 0)), img)?;
        write_pfm(&dir.join(expand_template(layout::DEPTH, i, 0, 0)), depth)?;
    }
    for (t, set) in bundle.matches.iter().enumerate() {
        write_matches(&dir.join(expand_template(layout::MATCHES, 0, t, t + 1)), set)?;
    }
    write_intrinsics(&dir.join(layout::INTRINSICS), &bundle.intrinsics)?;
    let entries: Vec<TumEntry> = bundle
        .camera_to_world()
        .into_iter()
        .enumerate()
        .map(|(i, p)| TumEntry {
            timestamp: i as f64,
            camera_to_world: p,
        })
        .collect();
    write_tum(&dir.join(layout::TRAJECTORY), &entries)?;
    write_json(&dir.join(layout::PRESET), &bundle.preset)
}
