//! Per-frame image, depth, and inter-frame match sources.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DepthMap, Image};
use crate::geometry::{Intrinsics, Pose};
use crate::io::{expand_template, layout, read_matches, read_pfm, read_png};
use crate::losses::MatchSet;
use crate::synthetic::{generate, reprojection_error, SynthBundle, SynthPreset};

pub trait FrameProvider: Send + Sync {
    fn frame(&self, index: usize) -> Result<Image>;
    /// Number of frames available, indices `0..len`.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait DepthProvider: Send + Sync {
    fn depth(&self, index: usize) -> Result<DepthMap>;
}

pub trait MatchProvider: Send + Sync {
    fn matches(&self, prev: usize, cur: usize) -> Result<MatchSet>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Files,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    /// Directory holding the files, for `files`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Relative path template, e.g. `depth/{index:06}.pfm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Generator settings, for `synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<SynthPreset>,
}

impl ProviderSpec {
    pub fn files(root: impl Into<PathBuf>, template: &str) -> Self {
        Self {
            kind: ProviderKind::Files,
            root: Some(root.into()),
            template: Some(template.to_string()),
            preset: None,
        }
    }

    pub fn synthetic(preset: SynthPreset) -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            root: None,
            template: None,
            preset: Some(preset),
        }
    }

    fn file_parts(&self, default_template: &str) -> Result<(PathBuf, String)> {
        let root = self.root.clone().ok_or_else(|| Error::Config("file provider needs a root".into()))?;
        if !root.is_dir() {
            return Err(Error::MissingResource { path: root });
        }
        Ok((root, self.template.clone().unwrap_or_else(|| default_template.to_string())))
    }

    fn bundle(&self) -> Result<Arc<SynthBundle>> {
        let preset = self.preset.as_ref().ok_or_else(|| Error::Config("synthetic provider needs a preset".into()))?;
        Ok(Arc::new(generate(preset)?))
    }

    /// Opens a depth source whose maps must be `width × height`.
    pub fn open_depth(&self, width: usize, height: usize) -> Result<Box<dyn DepthProvider>> {
        match self.kind {
            ProviderKind::Files => {
                let (root, template) = self.file_parts(layout::DEPTH)?;
                Ok(Box::new(FileDepth {
                    root,
                    template,
                    width,
                    height,
                }))
            }
            ProviderKind::Synthetic => Ok(Box::new(SyntheticProvider::new(self.bundle()?))),
        }
    }

    pub fn open_matches(&self, width: usize, height: usize) -> Result<Box<dyn MatchProvider>> {
        match self.kind {
            ProviderKind::Files => {
                let (root, template) = self.file_parts(layout::MATCHES)?;
                Ok(Box::new(FileMatches {
                    root,
                    template,
                    width,
                    height,
                }))
            }
            ProviderKind::Synthetic => Ok(Box::new(SyntheticProvider::new(self.bundle()?))),
        }
    }
}

/// PNG frames addressed by a template with an `{index}` placeholder; the
/// sequence is the run of consecutive indices starting at 0.
pub struct FileFrames {
    pub root: PathBuf,
    pub template: String,
    count: usize,
}

impl FileFrames {
    pub fn open(root: impl Into<PathBuf>, template: &str) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::MissingResource { path: root });
        }
        let mut f = Self {
            root,
            template: template.to_string(),
            count: 0,
        };
        while f.path(f.count).is_file() {
            f.count += 1;
        }
        if f.count == 0 {
            return Err(Error::MissingResource { path: f.path(0) });
        }
        Ok(f)
    }

    pub fn path(&self, index: usize) -> PathBuf {
        self.root.join(expand_template(&self.template, index, 0, 0))
    }
}

impl FrameProvider for FileFrames {
    fn frame(&self, index: usize) -> Result<Image> {
        read_png(&self.path(index))
    }

    fn len(&self) -> usize {
        self.count
    }
}

/// PFM files addressed by a template with an `{index}` placeholder.
pub struct FileDepth {
    pub root: PathBuf,
    pub template: String,
    pub width: usize,
    pub height: usize,
}

impl FileDepth {
    pub fn path(&self, index: usize) -> PathBuf {
        self.root.join(expand_template(&self.template, index, 0, 0))
    }
}

impl DepthProvider for FileDepth {
    fn depth(&self, index: usize) -> Result<DepthMap> {
        let path = self.path(index);
        let d = read_pfm(&path)?;
        if d.width != self.width || d.height != self.height {
            return Err(Error::MalformedDepth {
                path,
                reason: format!("size {}x{} does not match frames of {}x{}", d.width, d.height, self.width, self.height),
            });
        }
        Ok(d)
    }
}

/// Match CSVs addressed by a template with `{prev}` and `{cur}` placeholders.
pub struct FileMatches {
    pub root: PathBuf,
    pub template: String,
    pub width: usize,
    pub height: usize,
}

impl FileMatches {
    pub fn path(&self, prev: usize, cur: usize) -> PathBuf {
        self.root.join(expand_template(&self.template, 0, prev, cur))
    }
}

impl MatchProvider for FileMatches {
    fn matches(&self, prev: usize, cur: usize) -> Result<MatchSet> {
        let path = self.path(prev, cur);
        let set = read_matches(&path)?;
        set.validate(self.width, self.height)
            .map_err(|reason| Error::MalformedMatches { path, reason })?;
        Ok(set)
    }
}

/// Serves depths and matches straight from a generated bundle.
pub struct SyntheticProvider {
    bundle: Arc<SynthBundle>,
}

impl SyntheticProvider {
    pub fn new(bundle: Arc<SynthBundle>) -> Self {
        Self { bundle }
    }

    fn missing(what: String) -> Error {
        Error::MissingResource {
            path: PathBuf::from(format!("<synthetic>/{what}")),
        }
    }
}

impl FrameProvider for SyntheticProvider {
    fn frame(&self, index: usize) -> Result<Image> {
        self.bundle
            .frames
            .get(index)
            .cloned()
            .ok_or_else(|| Self::missing(format!("images/{index}")))
    }

    fn len(&self) -> usize {
        self.bundle.frames.len()
    }
}

impl DepthProvider for SyntheticProvider {
    fn depth(&self, index: usize) -> Result<DepthMap> {
        self.bundle
            .depths
            .get(index)
            .cloned()
            .ok_or_else(|| Self::missing(format!("depth/{index}")))
    }
}

impl MatchProvider for SyntheticProvider {
    fn matches(&self, prev: usize, cur: usize) -> Result<MatchSet> {
        if cur != prev + 1 {
            return Err(Self::missing(format!("matches/{prev}_{cur}")));
        }
        self.bundle
            .matches
            .get(prev)
            .cloned()
            .ok_or_else(|| Self::missing(format!("matches/{prev}_{cur}")))
    }
}

/// Largest reprojection error (pixels) of the provided matches against the
/// provided depths and the world-to-camera `poses`, over matches with
/// confidence at least `min_confidence`.
pub fn check_consistency(
    k: &Intrinsics,
    poses: &[Pose],
    depth: &dyn DepthProvider,
    matches: &dyn MatchProvider,
    min_confidence: f64,
) -> Result<f64> {
    let depths = (0..poses.len()).map(|i| depth.depth(i)).collect::<Result<Vec<_>>>()?;
    let sets = (1..poses.len()).map(|t| matches.matches(t - 1, t)).collect::<Result<Vec<_>>>()?;
    reprojection_error(k, poses, &depths, &sets, min_confidence)
}

/// Depth and match file providers rooted at a bundle directory with the
/// default layout.
pub fn bundle_file_providers(dir: &Path, width: usize, height: usize) -> Result<(Box<dyn DepthProvider>, Box<dyn MatchProvider>)> {
    Ok((
        ProviderSpec::files(dir, layout::DEPTH).open_depth(width, height)?,
        ProviderSpec::files(dir, layout::MATCHES).open_matches(width, height)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{read_tum, write_bundle, write_pfm};
    use crate::synthetic::TrajectoryKind;

    fn small(name: &str, frames: usize) -> SynthPreset {
        SynthPreset {
            width: 40,
            height: 32,
            supersample: 1,
            ..SynthPreset::named(name, frames, 3).unwrap()
        }
    }

    #[test]
    fn synthetic_provider_serves_exact_plane_depth() {
        let p = small("plane", 3);
        let spec = ProviderSpec::synthetic(p.clone());
        let d = spec.open_depth(40, 32).unwrap();
        let bundle = generate(&p).unwrap();
        assert_eq!(d.depth(1).unwrap(), bundle.depths[1]);
        assert!(matches!(d.depth(9), Err(Error::MissingResource { .. })));
        // idempotent
        assert_eq!(d.depth(0).unwrap(), d.depth(0).unwrap());
    }

    #[test]
    fn file_providers_round_trip_a_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = small("corridor", 4);
        p.outlier_fraction = 0.1;
        let bundle = generate(&p).unwrap();
        write_bundle(dir.path(), &bundle).unwrap();
        let (depth, matches) = bundle_file_providers(dir.path(), 40, 32).unwrap();
        let frames = FileFrames::open(dir.path(), layout::IMAGES).unwrap();
        assert_eq!(frames.len(), 4);
        let f = frames.frame(2).unwrap();
        for (a, b) in f.data.iter().zip(&bundle.frames[2].data) {
            assert!((a - b).abs() < 0.01);
        }
        for i in 0..4 {
            let d = depth.depth(i).unwrap();
            for (a, b) in d.values.iter().zip(&bundle.depths[i].values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(matches.matches(1, 2).unwrap(), bundle.matches[1]);

        let gt: Vec<Pose> = read_tum(&dir.path().join(layout::TRAJECTORY))
            .unwrap()
            .iter()
            .map(|e| e.camera_to_world.inverse())
            .collect();
        let err = check_consistency(&bundle.intrinsics, &gt, depth.as_ref(), matches.as_ref(), 0.2).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pure_translation_matches_equal_ground_truth_flow() {
        let mut p = small("plane", 2);
        p.trajectory = TrajectoryKind::Dolly;
        let b = generate(&p).unwrap();
        let k = b.intrinsics;
        let prov = SyntheticProvider::new(Arc::new(b.clone()));
        for m in prov.matches(0, 1).unwrap().matches {
            let z = b.depths[0].at(m.u_prev as usize, m.v_prev as usize).unwrap();
            let z1 = z - p.extent;
            let u = k.cx + (m.u_prev - k.cx) * z / z1;
            let v = k.cy + (m.v_prev - k.cy) * z / z1;
            assert!((u - m.u_cur).abs() < 1e-6 && (v - m.v_cur).abs() < 1e-6);
        }
    }

    #[test]
    fn file_errors_are_structured() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(FileFrames::open(dir.path(), layout::IMAGES), Err(Error::MissingResource { .. })));
        let missing = ProviderSpec::files(dir.path().join("nope"), layout::DEPTH).open_depth(4, 4);
        assert!(matches!(missing, Err(Error::MissingResource { .. })));

        let d = ProviderSpec::files(dir.path(), layout::DEPTH).open_depth(4, 4).unwrap();
        match d.depth(0) {
            Err(Error::MissingResource { path }) => assert!(path.ends_with("depth/000000.pfm")),
            other => panic!("{other:?}"),
        }
        write_pfm(&dir.path().join("depth/000000.pfm"), &DepthMap::constant(5, 4, 1.0)).unwrap();
        assert!(matches!(d.depth(0), Err(Error::MalformedDepth { .. })));

        std::fs::create_dir_all(dir.path().join("matches")).unwrap();
        std::fs::write(dir.path().join("matches/000000_000001.csv"), "u_prev,v_prev,u_cur,v_cur,confidence\n1,1,9,1,1\n").unwrap();
        let m = ProviderSpec::files(dir.path(), layout::MATCHES).open_matches(4, 4).unwrap();
        assert!(matches!(m.matches(0, 1), Err(Error::MalformedMatches { .. })));
    }
}
