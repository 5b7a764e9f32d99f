//! C interface to the reconstruction engine.
//!
//! Every entry point returns a status code; on failure the message is kept
//! per thread and can be fetched with [`ps_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use progsplat::geometry::{Intrinsics, Pose, Quaternion};
use progsplat::io::{read_ply, read_tum, write_bundle, write_ply};
use progsplat::metrics::{ate, TrajectoryPair};
use progsplat::nalgebra::Vector3;
use progsplat::pipeline::{run, Reconstruction, RunConfig};
use progsplat::raster::render;
use progsplat::scene::GaussianScene;
use progsplat::synthetic::{generate, SynthPreset};
use progsplat::Error;

pub type PsStatus = i32;

pub const PS_OK: PsStatus = 0;
/// Invalid or missing input, malformed file, bad configuration.
pub const PS_E_INPUT: PsStatus = 1;
/// Pose optimization diverged; partial outputs were written.
pub const PS_E_DIVERGED: PsStatus = 2;
/// Non-finite values or a degenerate numerical problem.
pub const PS_E_NUMERIC: PsStatus = 3;
pub const PS_E_IO: PsStatus = 4;
/// A required pointer argument was null.
pub const PS_E_NULL: PsStatus = 5;
/// The engine panicked; the handle arguments are left untouched.
pub const PS_E_PANIC: PsStatus = 6;

/// Pinhole camera; image size in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PsIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Gaussian scene.
pub struct PsScene {
    scene: GaussianScene,
}

/// Finished reconstruction: scene, trajectory, and summary.
pub struct PsReconstruction {
    inner: Reconstruction,
    summary_json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PsStatus {
    match e.code() {
        "E_DIVERGED" => PS_E_DIVERGED,
        "E_NUMERIC" => PS_E_NUMERIC,
        "E_IO" => PS_E_IO,
        _ => PS_E_INPUT,
    }
}

fn fail(e: Error) -> PsStatus {
    set_error(format!("ERROR[{}]: {e}", e.code()));
    status_of(&e)
}

fn null_arg(name: &str) -> PsStatus {
    set_error(format!("argument `{name}` is null"));
    PS_E_NULL
}

/// Runs `f`, converting panics into `PS_E_PANIC`.
fn guard(f: impl FnOnce() -> PsStatus) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PS_E_PANIC
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Option<PathBuf> {
    if p.is_null() {
        return None;
    }
    Some(PathBuf::from(CStr::from_ptr(p).to_string_lossy().into_owned()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message length
/// excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn ps_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a scene from a PLY file.
#[no_mangle]
pub unsafe extern "C" fn ps_scene_load(path: *const c_char, out: *mut *mut PsScene) -> PsStatus {
    guard(|| {
        let Some(path) = path_arg(path) else { return null_arg("path") };
        if out.is_null() {
            return null_arg("out");
        }
        match read_ply(&path) {
            Ok(scene) => {
                *out = Box::into_raw(Box::new(PsScene { scene }));
                PS_OK
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_scene_save(scene: *const PsScene, path: *const c_char) -> PsStatus {
    guard(|| {
        let Some(s) = scene.as_ref() else { return null_arg("scene") };
        let Some(path) = path_arg(path) else { return null_arg("path") };
        match write_ply(&path, &s.scene) {
            Ok(()) => PS_OK,
            Err(e) => fail(e),
        }
    })
}

/// Number of Gaussians; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ps_scene_len(scene: *const PsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.scene.len())
}

#[no_mangle]
pub unsafe extern "C" fn ps_scene_free(scene: *mut PsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Renders `scene` from the camera-to-world pose `pose_c2w`
/// (`tx ty tz qx qy qz qw`). `rgb` receives `width*height*3` linear values
/// row-major; `depth`, if not null, receives `width*height` values.
#[no_mangle]
pub unsafe extern "C" fn ps_render(
    scene: *const PsScene,
    intrinsics: *const PsIntrinsics,
    pose_c2w: *const f64,
    rgb: *mut f64,
    depth: *mut f64,
) -> PsStatus {
    guard(|| {
        let Some(s) = scene.as_ref() else { return null_arg("scene") };
        let Some(ki) = intrinsics.as_ref() else { return null_arg("intrinsics") };
        if pose_c2w.is_null() {
            return null_arg("pose_c2w");
        }
        if rgb.is_null() {
            return null_arg("rgb");
        }
        let k = match Intrinsics::new(ki.fx, ki.fy, ki.cx, ki.cy, ki.width as usize, ki.height as usize) {
            Ok(k) => k,
            Err(e) => return fail(e),
        };
        let p = std::slice::from_raw_parts(pose_c2w, 7);
        let q = Quaternion::new(p[6], p[3], p[4], p[5]);
        if p.iter().any(|v| !v.is_finite()) || q.norm() < 1e-12 {
            return fail(Error::Config("pose must be 7 finite values with a non-zero quaternion".into()));
        }
        let w2c = Pose::new(q.normalized(), Vector3::new(p[0], p[1], p[2])).inverse();
        let out = render(&s.scene, &w2c, &k);
        std::slice::from_raw_parts_mut(rgb, out.color.data.len()).copy_from_slice(&out.color.data);
        if !depth.is_null() {
            std::slice::from_raw_parts_mut(depth, out.depth.len()).copy_from_slice(&out.depth);
        }
        PS_OK
    })
}

/// Runs a reconstruction from a JSON configuration (the same document the
/// command line accepts; missing fields take their defaults) and writes its
/// outputs. On `PS_E_DIVERGED` the handle is still set and holds the partial
/// result.
#[no_mangle]
pub unsafe extern "C" fn ps_reconstruct(config_json: *const c_char, out: *mut *mut PsReconstruction) -> PsStatus {
    guard(|| {
        if config_json.is_null() {
            return null_arg("config_json");
        }
        if out.is_null() {
            return null_arg("out");
        }
        let text = CStr::from_ptr(config_json).to_string_lossy();
        let cfg: RunConfig = match serde_json::from_str(&text) {
            Ok(c) => c,
            Err(e) => return fail(Error::Config(format!("config: {e}"))),
        };
        match run(&cfg) {
            Ok(r) => {
                let status = r.aborted.as_ref().map(|e| {
                    set_error(format!("ERROR[{}]: {e}", e.code()));
                    status_of(e)
                });
                let summary = serde_json::to_string(&r.report.summary).unwrap_or_default();
                *out = Box::into_raw(Box::new(PsReconstruction {
                    inner: r,
                    summary_json: CString::new(summary).unwrap_or_default(),
                }));
                status.unwrap_or(PS_OK)
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of trajectory entries.
#[no_mangle]
pub unsafe extern "C" fn ps_reconstruction_len(r: *const PsReconstruction) -> usize {
    r.as_ref().map_or(0, |r| r.inner.trajectory.len())
}

/// Copies up to `capacity` trajectory entries: frame indices into `frames`
/// and camera-to-world poses (`tx ty tz qx qy qz qw`) into `poses`. Returns
/// the number written.
#[no_mangle]
pub unsafe extern "C" fn ps_reconstruction_trajectory(
    r: *const PsReconstruction,
    frames: *mut u64,
    poses: *mut f64,
    capacity: usize,
) -> usize {
    let Some(r) = r.as_ref() else { return 0 };
    let entries = r.inner.trajectory.to_tum();
    let n = entries.len().min(capacity);
    for (i, e) in entries.iter().take(n).enumerate() {
        if !frames.is_null() {
            *frames.add(i) = e.timestamp as u64;
        }
        if !poses.is_null() {
            let (t, q) = (e.camera_to_world.translation, e.camera_to_world.rotation);
            let row = [t.x, t.y, t.z, q.x, q.y, q.z, q.w];
            ptr::copy_nonoverlapping(row.as_ptr(), poses.add(7 * i), 7);
        }
    }
    n
}

/// Run summary as JSON, valid until the handle is freed.
#[no_mangle]
pub unsafe extern "C" fn ps_reconstruction_summary(r: *const PsReconstruction) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.summary_json.as_ptr())
}

/// Copies the reconstructed scene into a new handle.
#[no_mangle]
pub unsafe extern "C" fn ps_reconstruction_scene(r: *const PsReconstruction) -> *mut PsScene {
    r.as_ref().map_or(ptr::null_mut(), |r| {
        Box::into_raw(Box::new(PsScene {
            scene: r.inner.scene.clone(),
        }))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_reconstruction_free(r: *mut PsReconstruction) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Writes a synthetic bundle (`plane`, `cavity`, `corridor`, or `lowtex`).
#[no_mangle]
pub unsafe extern "C" fn ps_synth(preset: *const c_char, frames: u32, seed: u64, out_dir: *const c_char) -> PsStatus {
    guard(|| {
        if preset.is_null() {
            return null_arg("preset");
        }
        let Some(dir) = path_arg(out_dir) else { return null_arg("out_dir") };
        let name = CStr::from_ptr(preset).to_string_lossy();
        let result = SynthPreset::named(&name, frames as usize, seed)
            .and_then(|p| generate(&p))
            .and_then(|b| write_bundle(&dir, &b));
        match result {
            Ok(()) => PS_OK,
            Err(e) => fail(e),
        }
    })
}

/// Absolute trajectory error between two TUM files, rigid alignment unless
/// `align_scale` is non-zero.
#[no_mangle]
pub unsafe extern "C" fn ps_ate(pred: *const c_char, gt: *const c_char, align_scale: i32, out: *mut f64) -> PsStatus {
    guard(|| {
        let Some(pred) = path_arg(pred) else { return null_arg("pred") };
        let Some(gt) = path_arg(gt) else { return null_arg("gt") };
        if out.is_null() {
            return null_arg("out");
        }
        let result = read_tum(&pred).and_then(|p| {
            let g = read_tum(&gt)?;
            ate(&TrajectoryPair::from_entries(&p, &g), align_scale != 0)
        });
        match result {
            Ok(a) => {
                *out = a.rmse;
                PS_OK
            }
            Err(e) => fail(e),
        }
    })
}
