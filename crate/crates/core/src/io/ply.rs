use std::path::Path;

use super::{atomic_write, read_bytes};
use crate::error::{Error, Result};
use crate::scene::GaussianScene;

/// Property order written by [`write_ply`]. Colors are linear RGB, `opacity`
/// is the logit, `scale_*` are log scales, `rot_*` a w-first quaternion.
pub const PLY_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "red", "green", "blue", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

pub fn write_ply(path: &Path, scene: &GaussianScene) -> Result<()> {
    atomic_write(path, &encode_ply(scene))
}

pub fn encode_ply(scene: &GaussianScene) -> Vec<u8> {
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", scene.len());
    for p in PLY_PROPERTIES {
        header.push_str(&format!("property double {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(scene.len() * PLY_PROPERTIES.len() * 8);
    for i in 0..scene.len() {
        let row = scene.positions[i]
            .iter()
            .chain(&scene.colors[i])
            .chain(std::iter::once(&scene.logit_opacities[i]))
            .chain(&scene.log_scales[i])
            .chain(&scene.rotations[i]);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_ply(path: &Path) -> Result<GaussianScene> {
    let bytes = read_bytes(path)?;
    decode_ply(&bytes).map_err(|reason| Error::MalformedPly {
        path: path.to_path_buf(),
        reason,
    })
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            "uchar" | "uint8" => Self::U8,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 | Self::I32 | Self::U32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Self::U8 => b[0] as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        }
    }
}

/// Parses a binary little-endian vertex PLY carrying the splat properties.
/// Extra vertex properties are skipped.
pub fn decode_ply(bytes: &[u8]) -> std::result::Result<GaussianScene, String> {
    const END: &[u8] = b"end_header\n";
    if !bytes.starts_with(b"ply\n") {
        return Err("missing 'ply' magic".into());
    }
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not ASCII")?;

    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    for line in header.lines().skip(1) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(format!("unsupported format '{other}'")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| format!("bad vertex count '{n}'"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return Err("list properties are not supported".into()),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or(format!("unsupported property type '{ty}'"))?;
                props.push((name.to_string(), s));
            }
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            ["property", ..] => {}
            _ => return Err(format!("unexpected header line '{line}'")),
        }
    }
    if !header.contains("format binary_little_endian 1.0") {
        return Err("missing format line".into());
    }
    let n = count.ok_or("no vertex element")?;
    let mut offsets = [usize::MAX; 14];
    let mut kinds = [Scalar::F64; 14];
    let mut stride = 0;
    for (name, s) in &props {
        if let Some(k) = PLY_PROPERTIES.iter().position(|p| p == name) {
            offsets[k] = stride;
            kinds[k] = *s;
        }
        stride += s.size();
    }
    if let Some(k) = offsets.iter().position(|o| *o == usize::MAX) {
        return Err(format!("missing property '{}'", PLY_PROPERTIES[k]));
    }
    let body = &bytes[end..];
    if body.len() < n * stride {
        return Err(format!("expected {} vertex bytes, found {}", n * stride, body.len()));
    }
    let mut scene = GaussianScene::new();
    for i in 0..n {
        let row = &body[i * stride..(i + 1) * stride];
        let v: Vec<f64> = (0..14).map(|k| kinds[k].read(&row[offsets[k]..])).collect();
        scene.push_raw(
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            [v[10], v[11], v[12], v[13]],
            [v[7], v[8], v[9]],
            v[6],
        );
    }
    Ok(scene)
}
