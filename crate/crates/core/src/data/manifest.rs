//! Dataset manifest: a single JSON document describing cameras, sequences,
//! frames, object tracks, and scene bounds. Image/depth/mask paths are
//! relative to the manifest file.

use crate::geom::{Aabb, Mat3, Vec3};
use crate::lie::SE3Pose;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported manifest version {0}")]
    BadVersion(u32),
    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),
    #[error("invalid pose for {0}")]
    InvalidPose(String),
    #[error("timestamps not strictly increasing in {0}")]
    UnsortedTimestamps(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraSpec {
    pub id: String,
    /// 3×3 intrinsics, upper triangular with positive focal entries.
    pub intrinsics: Mat3<f64>,
    /// Camera-to-ego rigid transform.
    pub extrinsic: SE3Pose,
    pub width: usize,
    pub height: usize,
    /// Optional ego-mask image (PGM P5, 0 = excluded pixel).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub id: String,
    pub timestamps: Vec<f64>,
    /// Ego-to-world pose per timestamp.
    pub ego_poses: Vec<SE3Pose>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameSpec {
    pub sequence: String,
    pub timestamp: f64,
    pub camera: String,
    pub image: String,
    /// Optional sparse depth map (raw f32 format); zero entries carry no
    /// supervision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackPoint {
    pub timestamp: f64,
    /// Object-to-ego pose at this timestamp.
    pub pose: SE3Pose,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub sequence: String,
    /// Full box extents along the object axes.
    pub size: Vec3<f64>,
    pub track: Vec<TrackPoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub scene_bounds: Aabb,
    /// Maximum sequence duration in seconds; normalizes time to `[-1, 1]`.
    pub max_sequence_length: f64,
    pub cameras: Vec<CameraSpec>,
    pub sequences: Vec<SequenceSpec>,
    pub frames: Vec<FrameSpec>,
    pub objects: Vec<ObjectSpec>,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<(), ManifestError> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(ManifestError::BadVersion(m.version));
        }
        m.validate(dir)?;
        Ok(m)
    }

    /// Structural validation: sorted timestamps, valid poses, referenced
    /// files present, sane intrinsics.
    pub fn validate(&self, dir: &Path) -> Result<(), ManifestError> {
        const POSE_TOL: f64 = 1e-6;
        if !self.scene_bounds.is_valid() {
            return Err(ManifestError::Invalid("scene_bounds invalid".into()));
        }
        if self.max_sequence_length <= 0.0 {
            return Err(ManifestError::Invalid("max_sequence_length must be positive".into()));
        }
        for c in &self.cameras {
            let k = &c.intrinsics.0;
            if k[0][0] <= 0.0 || k[1][1] <= 0.0 || k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
                return Err(ManifestError::Invalid(format!(
                    "camera {}: intrinsics not upper-triangular with positive focals",
                    c.id
                )));
            }
            if !c.extrinsic.is_valid(POSE_TOL) {
                return Err(ManifestError::InvalidPose(format!("camera {}", c.id)));
            }
            if let Some(m) = &c.mask {
                let p = dir.join(m);
                if !p.exists() {
                    return Err(ManifestError::MissingFile(p));
                }
            }
        }
        for s in &self.sequences {
            if s.timestamps.is_empty() {
                return Err(ManifestError::Invalid(format!("sequence {} has no timestamps", s.id)));
            }
            if s.timestamps.len() != s.ego_poses.len() {
                return Err(ManifestError::Invalid(format!(
                    "sequence {}: {} timestamps vs {} poses",
                    s.id,
                    s.timestamps.len(),
                    s.ego_poses.len()
                )));
            }
            if !s.timestamps.windows(2).all(|w| w[0] < w[1]) {
                return Err(ManifestError::UnsortedTimestamps(format!("sequence {}", s.id)));
            }
            for p in &s.ego_poses {
                if !p.is_valid(POSE_TOL) {
                    return Err(ManifestError::InvalidPose(format!("sequence {}", s.id)));
                }
            }
        }
        for f in &self.frames {
            let p = dir.join(&f.image);
            if !p.exists() {
                return Err(ManifestError::MissingFile(p));
            }
            if let Some(d) = &f.depth {
                let p = dir.join(d);
                if !p.exists() {
                    return Err(ManifestError::MissingFile(p));
                }
            }
        }
        for o in &self.objects {
            if o.track.is_empty() {
                return Err(ManifestError::Invalid(format!("object {} has empty track", o.id)));
            }
            if !o.track.windows(2).all(|w| w[0].timestamp < w[1].timestamp) {
                return Err(ManifestError::UnsortedTimestamps(format!("object {}", o.id)));
            }
            if o.size.0.iter().any(|v| *v <= 0.0) {
                return Err(ManifestError::Invalid(format!("object {}: non-positive size", o.id)));
            }
            for t in &o.track {
                if !t.pose.is_valid(POSE_TOL) {
                    return Err(ManifestError::InvalidPose(format!("object {}", o.id)));
                }
            }
        }
        Ok(())
    }
}
