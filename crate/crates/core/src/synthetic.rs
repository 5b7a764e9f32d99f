//! Procedural ground-truth worlds: analytic surfaces with a solid noise
//! texture, camera trajectories, and the frames, depths, and matches they
//! induce. Frames are ray traced against the analytic surface and share no
//! code with the splat rasterizer.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, Image};
use crate::geometry::{backproject, project, Intrinsics, Pose, Quaternion};
use crate::losses::{Match, MatchSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Tilted plane `n·x = offset`.
    Plane,
    /// Interior of a sphere, the camera looking at its far wall.
    Cavity,
    /// Interior of a cylinder along +z closed by an end wall.
    Corridor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Forward translation along the optical axis.
    Dolly,
    /// Forward motion along a circular arc, turning right with the tangent.
    Arc,
    /// Rotation about a point ahead of the first camera.
    Orbit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Spatial frequency of the base octave, cycles per scene unit.
    pub frequency: f64,
    pub octaves: u32,
    /// 0 gives a flat color.
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub name: String,
    pub geometry: Geometry,
    pub texture: TextureSpec,
    pub trajectory: TrajectoryKind,
    /// Arc length travelled by the camera center over the sequence.
    pub extent: f64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    pub seed: u64,
    /// Share of the headlight term in the Lambertian shading.
    pub headlight: f64,
    /// Samples per pixel side.
    pub supersample: usize,
    /// Grid spacing of emitted matches in pixels.
    pub match_stride: usize,
    /// Extra low-confidence random matches, as a fraction of the exact ones.
    pub outlier_fraction: f64,
}

pub const PRESET_NAMES: [&str; 4] = ["plane", "cavity", "corridor", "lowtex"];

impl SynthPreset {
    /// A named preset with `frames` frames and the given seed.
    pub fn named(name: &str, frames: usize, seed: u64) -> Result<Self> {
        let base = Self {
            name: name.to_string(),
            geometry: Geometry::Plane,
            texture: TextureSpec {
                frequency: 2.0,
                octaves: 4,
                contrast: 1.0,
            },
            trajectory: TrajectoryKind::Arc,
            extent: 0.3,
            frames,
            width: 160,
            height: 128,
            focal_scale: 0.8,
            seed,
            headlight: 0.25,
            supersample: 3,
            match_stride: 4,
            outlier_fraction: 0.0,
        };
        let p = match name {
            "plane" => base,
            "cavity" => Self {
                geometry: Geometry::Cavity,
                trajectory: TrajectoryKind::Orbit,
                ..base
            },
            "corridor" => Self {
                geometry: Geometry::Corridor,
                trajectory: TrajectoryKind::Arc,
                ..base
            },
            "lowtex" => Self {
                texture: TextureSpec {
                    contrast: 0.02,
                    ..base.texture
                },
                ..base
            },
            other => return Err(Error::InvalidPreset(format!("unknown preset '{other}' (expected one of {PRESET_NAMES:?})"))),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPreset(m.to_string()));
        if self.frames == 0 {
            return bad("frame count must be at least 1");
        }
        if self.width < 2 || self.height < 2 {
            return bad("image must be at least 2x2");
        }
        if !(self.focal_scale > 0.0) || !(self.extent >= 0.0) || !self.extent.is_finite() {
            return bad("focal scale must be positive and extent non-negative");
        }
        if self.supersample == 0 || self.match_stride == 0 {
            return bad("supersample and match stride must be positive");
        }
        if !(0.0..=1.0).contains(&self.headlight) || !(self.outlier_fraction >= 0.0) {
            return bad("headlight must lie in [0, 1] and outlier fraction be non-negative");
        }
        if !(self.texture.frequency > 0.0) || self.texture.octaves == 0 || !(self.texture.contrast >= 0.0) {
            return bad("texture needs positive frequency, at least one octave, non-negative contrast");
        }
        // keep the camera well inside the closed geometries
        let limit = match self.geometry {
            Geometry::Plane => 1.2,
            Geometry::Cavity => 0.8,
            Geometry::Corridor => 1.0,
        };
        if self.extent > limit {
            return bad(&format!("extent {} leaves the usable volume (max {limit})", self.extent));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.focal_scale * self.width as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    /// Camera-to-world pose of frame `i`; frame 0 is the identity.
    pub fn camera_to_world(&self, i: usize) -> Pose {
        let s = if self.frames > 1 { i as f64 / (self.frames - 1) as f64 } else { 0.0 };
        let e = self.extent;
        let (center, yaw) = match self.trajectory {
            TrajectoryKind::Dolly => (Vector3::new(0.0, 0.0, e * s), 0.0),
            TrajectoryKind::Arc => {
                let r = ARC_RADIUS;
                let phi = e * s / r;
                (Vector3::new(r * (1.0 - phi.cos()), 0.0, r * phi.sin()), phi)
            }
            TrajectoryKind::Orbit => {
                let d = ORBIT_DISTANCE;
                let psi = e * s / d;
                (Vector3::new(-d * psi.sin(), 0.0, d - d * psi.cos()), psi)
            }
        };
        Pose::new(Quaternion::from_axis_angle(&Vector3::new(0.0, yaw, 0.0)), center)
    }
}

const ORBIT_DISTANCE: f64 = 2.0;
const ARC_RADIUS: f64 = 0.75;

/// Everything generated for one preset; poses are world-to-camera with the
/// world anchored at the first camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBundle {
    pub preset: SynthPreset,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Image>,
    pub depths: Vec<DepthMap>,
    /// `matches[t]` links frame `t` to frame `t + 1`.
    pub matches: Vec<MatchSet>,
    pub poses: Vec<Pose>,
}

impl SynthBundle {
    pub fn camera_to_world(&self) -> Vec<Pose> {
        self.poses.iter().map(|p| p.inverse()).collect()
    }
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
}

struct World {
    geometry: Geometry,
    texture: TextureSpec,
    seed: u64,
}

impl World {
    /// Nearest intersection of `o + t d`, `t > 0`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self.geometry {
            Geometry::Plane => {
                let n = Vector3::new(0.15, -0.1, 1.0).normalize();
                let offset = 2.0;
                let nd = n.dot(d);
                if nd.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - n.dot(o)) / nd;
                (t > 0.0).then_some(Hit { t, normal: n })
            }
            Geometry::Cavity => {
                let c = Vector3::new(0.1, -0.05, 1.2);
                let r = 2.4;
                let oc = o - c;
                let (a, b, cc) = (d.dot(d), 2.0 * oc.dot(d), oc.dot(&oc) - r * r);
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b + disc.sqrt()) / (2.0 * a);
                (t > 0.0).then(|| Hit {
                    t,
                    normal: (o + d * t - c) / r,
                })
            }
            Geometry::Corridor => {
                let axis = (0.12, -0.08);
                let (r, end) = (1.0, 4.0);
                let (ox, oy) = (o.x - axis.0, o.y - axis.1);
                let a = d.x * d.x + d.y * d.y;
                let mut best: Option<Hit> = None;
                if a > 1e-15 {
                    let b = 2.0 * (ox * d.x + oy * d.y);
                    let cc = ox * ox + oy * oy - r * r;
                    let disc = b * b - 4.0 * a * cc;
                    if disc >= 0.0 {
                        let t = (-b + disc.sqrt()) / (2.0 * a);
                        let p = o + d * t;
                        if t > 0.0 && p.z <= end {
                            best = Some(Hit {
                                t,
                                normal: Vector3::new(p.x - axis.0, p.y - axis.1, 0.0) / r,
                            });
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    let t = (end - o.z) / d.z;
                    if t > 0.0 && best.as_ref().is_none_or(|h| t < h.t) {
                        best = Some(Hit {
                            t,
                            normal: Vector3::new(0.0, 0.0, -1.0),
                        });
                    }
                }
                best
            }
        }
    }

    fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let tex = &self.texture;
        let q = p * tex.frequency;
        let n1 = fbm(&q, tex.octaves, self.seed);
        let n2 = fbm(&(q * 1.9 + Vector3::new(17.3, -4.1, 9.7)), tex.octaves, self.seed.wrapping_add(101));
        // fbm concentrates around 0.5; stretch it to use the palette
        let t = (0.5 + 2.2 * tex.contrast * (n1 - 0.5)).clamp(0.0, 1.0);
        let u = (0.5 + 2.2 * tex.contrast * (n2 - 0.5)).clamp(0.0, 1.0);
        let dark = [0.45, 0.12, 0.12];
        let light = [0.95, 0.72, 0.62];
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let base = dark[ch] + (light[ch] - dark[ch]) * t;
            let tint = [0.08, -0.05, 0.1][ch] * (u - 0.5) * 2.0;
            c[ch] = (base + tint).clamp(0.0, 1.0);
        }
        c
    }

    fn shade(&self, o: &Vector3<f64>, d: &Vector3<f64>, headlight: f64) -> [f64; 3] {
        let Some(hit) = self.intersect(o, d) else { return [0.0; 3] };
        let p = o + d * hit.t;
        let cos = hit.normal.dot(&d.normalize()).abs();
        let s = (1.0 - headlight) + headlight * cos;
        self.albedo(&p).map(|c| c * s)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix(
        seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let fl = p.map(f64::floor);
    let f = p - fl;
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (u, v, w) = (fade(f.x), fade(f.y), fade(f.z));
    let (x, y, z) = (fl.x as i64, fl.y as i64, fl.z as i64);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c = |dx, dy, dz| lattice(seed, x + dx, y + dy, z + dz);
    lerp(
        lerp(lerp(c(0, 0, 0), c(1, 0, 0), u), lerp(c(0, 1, 0), c(1, 1, 0), u), v),
        lerp(lerp(c(0, 0, 1), c(1, 0, 1), u), lerp(c(0, 1, 1), c(1, 1, 1), u), v),
        w,
    )
}

fn fbm(p: &Vector3<f64>, octaves: u32, seed: u64) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for o in 0..octaves {
        sum += amp * value_noise(&(p * freq), seed.wrapping_add(o as u64 * 7919));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

/// Generates the full bundle for `preset`.
pub fn generate(preset: &SynthPreset) -> Result<SynthBundle> {
    preset.validate()?;
    let k = preset.intrinsics();
    let world = World {
        geometry: preset.geometry,
        texture: preset.texture,
        seed: preset.seed,
    };
    let poses: Vec<Pose> = (0..preset.frames).map(|i| preset.camera_to_world(i).inverse()).collect();

    let rendered: Vec<(Image, DepthMap)> = poses.par_iter().map(|pose| render_frame(&world, preset, &k, pose)).collect::<Result<_>>()?;
    let (frames, depths): (Vec<Image>, Vec<DepthMap>) = rendered.into_iter().unzip();

    let matches = (1..preset.frames)
        .map(|t| emit_matches(&world, preset, &k, &poses[t - 1], &poses[t], &depths[t - 1], t as u64))
        .collect();
    Ok(SynthBundle {
        preset: preset.clone(),
        intrinsics: k,
        frames,
        depths,
        matches,
        poses,
    })
}

fn render_frame(world: &World, preset: &SynthPreset, k: &Intrinsics, pose: &Pose) -> Result<(Image, DepthMap)> {
    let c2w = pose.inverse();
    let rot: Matrix3<f64> = c2w.rotation_matrix();
    let origin = c2w.translation;
    let mut img = Image::new(k.width, k.height);
    let mut depth = vec![0.0; k.num_pixels()];
    let ss = preset.supersample;
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let d = rot * k.ray(x as f64, y as f64);
            // camera z of the hit, stored at f32 precision so that the depth
            // files reproduce it exactly
            depth[i] = match world.intersect(&origin, &d) {
                Some(h) => h.t as f32 as f64,
                None => 0.0,
            };
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let v = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let c = world.shade(&origin, &(rot * k.ray(u, v)), preset.headlight);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            let n = (ss * ss) as f64;
            img.set_pixel(x, y, acc.map(|a| a / n));
        }
    }
    let depth = DepthMap::from_values(k.width, k.height, depth)?;
    if depth.valid_count() == 0 {
        return Err(Error::InvalidPreset("camera sees no surface".into()));
    }
    Ok((img, depth))
}

fn emit_matches(world: &World, preset: &SynthPreset, k: &Intrinsics, prev: &Pose, cur: &Pose, depth_prev: &DepthMap, t: u64) -> MatchSet {
    let cur_center = cur.inverse().translation;
    let mut out = Vec::new();
    let stride = preset.match_stride;
    for y in (0..k.height).step_by(stride) {
        for x in (0..k.width).step_by(stride) {
            let Some(d) = depth_prev.at(x, y) else { continue };
            let Ok(p) = backproject(prev, k, (x as f64, y as f64), d) else { continue };
            let Ok(q) = project(cur, k, &p) else { continue };
            let (w, h) = (k.width as f64, k.height as f64);
            if q.u < -0.5 || q.u >= w - 0.5 || q.v < -0.5 || q.v >= h - 0.5 {
                continue;
            }
            // occlusion: the surface seen along the ray must be this point
            let dir = p - cur_center;
            match world.intersect(&cur_center, &dir) {
                Some(hit) if (hit.t - 1.0).abs() < 1e-4 => {}
                _ => continue,
            }
            out.push(Match {
                u_prev: x as f64,
                v_prev: y as f64,
                u_cur: q.u,
                v_cur: q.v,
                confidence: 1.0,
            });
        }
    }
    let n_out = (preset.outlier_fraction * out.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(preset.seed ^ splitmix(t));
    for _ in 0..n_out {
        out.push(Match {
            u_prev: rng.gen_range(0..k.width) as f64,
            v_prev: rng.gen_range(0..k.height) as f64,
            u_cur: rng.gen_range(0.0..k.width as f64 - 1.0),
            v_cur: rng.gen_range(0.0..k.height as f64 - 1.0),
            confidence: 0.05,
        });
    }
    MatchSet::new(out)
}

/// Largest reprojection error in pixels over every match with confidence at
/// least `min_confidence`: each source pixel is back-projected with the frame
/// depth and ground-truth pose and projected into the next frame.
pub fn reprojection_error(
    k: &Intrinsics,
    poses: &[Pose],
    depths: &[DepthMap],
    matches: &[MatchSet],
    min_confidence: f64,
) -> Result<f64> {
    if matches.len() + 1 != poses.len() || depths.len() != poses.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} poses, depths, and {} match sets", poses.len(), poses.len().saturating_sub(1)),
            found: format!("{} depths, {} match sets", depths.len(), matches.len()),
        });
    }
    let mut worst = 0.0_f64;
    for (t, set) in matches.iter().enumerate() {
        for m in set.matches.iter().filter(|m| m.confidence >= min_confidence) {
            let (x, y) = (m.u_prev.round() as usize, m.v_prev.round() as usize);
            let d = depths[t].at(x, y).ok_or(Error::NoValidMatches)?;
            let p = backproject(&poses[t], k, (m.u_prev, m.v_prev), d)?;
            let q = project(&poses[t + 1], k, &p)?;
            worst = worst.max((q.u - m.u_cur).hypot(q.v - m.v_cur));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str, frames: usize) -> SynthPreset {
        SynthPreset {
            width: 40,
            height: 32,
            supersample: 2,
            ..SynthPreset::named(name, frames, 7).unwrap()
        }
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(matches!(SynthPreset::named("swamp", 3, 0), Err(Error::InvalidPreset(_))));
        let mut p = small("plane", 3);
        p.frames = 0;
        assert!(matches!(generate(&p), Err(Error::InvalidPreset(_))));
    }

    #[test]
    fn plane_depth_is_analytic() {
        let mut p = small("plane", 4);
        p.trajectory = TrajectoryKind::Dolly;
        let b = generate(&p).unwrap();
        let k = b.intrinsics;
        let n = Vector3::new(0.15, -0.1, 1.0).normalize();
        for y in 0..k.height {
            for x in 0..k.width {
                let r = k.ray(x as f64, y as f64);
                let z = 2.0 / n.dot(&r);
                let got = b.depths[0].at(x, y).unwrap();
                assert!((got - z).abs() <= 1e-6 * z);
            }
        }
        assert_eq!(b.poses[0], Pose::identity());
    }

    #[test]
    fn zero_extent_gives_identical_frames() {
        for name in PRESET_NAMES {
            let mut p = small(name, 3);
            p.extent = 0.0;
            let b = generate(&p).unwrap();
            assert!(b.frames[0] == b.frames[2], "{name}");
            for set in &b.matches {
                assert!(!set.is_empty());
                assert!(set.matches.iter().all(|m| m.displacement() < 1e-9));
            }
        }
    }

    #[test]
    fn bundles_are_self_consistent() {
        for name in PRESET_NAMES {
            let mut p = small(name, 4);
            p.outlier_fraction = 0.1;
            let b = generate(&p).unwrap();
            let err = reprojection_error(&b.intrinsics, &b.poses, &b.depths, &b.matches, 0.2).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
            let outliers = b.matches[0].matches.iter().filter(|m| m.confidence < 0.2).count();
            let exact = b.matches[0].len() - outliers;
            assert_eq!(outliers, (0.1 * exact as f64).round() as usize);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = small("corridor", 3);
        assert_eq!(generate(&p).unwrap(), generate(&p).unwrap());
        let mut q = p.clone();
        q.seed += 1;
        assert_ne!(generate(&p).unwrap().frames, generate(&q).unwrap().frames);
    }

    #[test]
    fn trajectories_start_at_identity_and_cover_extent() {
        for kind in [TrajectoryKind::Dolly, TrajectoryKind::Arc, TrajectoryKind::Orbit] {
            let mut p = small("plane", 6);
            p.trajectory = kind;
            assert_eq!(p.camera_to_world(0).translation, Vector3::zeros());
            let mut length = 0.0;
            for i in 1..6 {
                length += (p.camera_to_world(i).translation - p.camera_to_world(i - 1).translation).norm();
            }
            assert!((length - p.extent).abs() < 0.01 * p.extent, "{kind:?}: {length}");
        }
    }

    #[test]
    fn frames_are_textured_and_in_range() {
        let b = generate(&small("corridor", 1)).unwrap();
        let f = &b.frames[0];
        assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = f.data.iter().sum::<f64>() / f.data.len() as f64;
        let var = f.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.data.len() as f64;
        assert!(var > 1e-3);
        assert_eq!(b.depths[0].valid_count(), 40 * 32);
    }
}
