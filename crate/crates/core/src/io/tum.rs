use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quaternion};

/// One TUM row: timestamp and camera-to-world pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TumEntry {
    pub timestamp: f64,
    pub camera_to_world: Pose,
}

/// Parses `timestamp tx ty tz qx qy qz qw` rows; `#` comments and blank lines
/// are skipped. Errors carry 1-based line numbers.
pub fn read_tum(path: &Path) -> Result<Vec<TumEntry>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: "file is not UTF-8".into(),
    })?;
    parse_tum(&text).map_err(|(line, reason)| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    })
}

pub fn parse_tum(text: &str) -> std::result::Result<Vec<TumEntry>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 8 {
            return Err((line_no, format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0_f64; 8];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f.parse().map_err(|_| (line_no, format!("field {} ('{f}') is not a number", k + 1)))?;
            if !v[k].is_finite() {
                return Err((line_no, format!("field {} is not finite", k + 1)));
            }
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-12 {
            return Err((line_no, "zero quaternion".into()));
        }
        out.push(TumEntry {
            timestamp: v[0],
            camera_to_world: Pose::new(q, Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

pub fn format_tum(entries: &[TumEntry]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for e in entries {
        let (t, q) = (e.camera_to_world.translation, e.camera_to_world.rotation);
        writeln!(s, "{} {} {} {} {} {} {} {}", e.timestamp, t.x, t.y, t.z, q.x, q.y, q.z, q.w).unwrap();
    }
    s
}

pub fn write_tum(path: &Path, entries: &[TumEntry]) -> Result<()> {
    atomic_write(path, format_tum(entries).as_bytes())
}
