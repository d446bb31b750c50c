//! Scene-bounds computation from range-filtered point clouds and ego
//! positions.

use crate::geom::{Aabb, Vec3};
use crate::lie::SE3Pose;
use thiserror::Error;

/// Per-sweep range filter: points farther than this from the ego are
/// dropped before registration.
pub const MAX_POINT_RANGE: f64 = 80.0;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("no points or poses given")]
    EmptyInput,
}

/// Point cloud in the ego frame at one timestamp.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<Vec3<f64>>,
    pub timestamp: f64,
}

/// Filters each cloud at [`MAX_POINT_RANGE`], registers it to the world
/// with its ego pose, and returns the padded axis-aligned bounds of all
/// surviving points plus the ego positions themselves.
pub fn compute_scene_bounds(
    clouds: &[(PointCloud, SE3Pose)],
    ego_poses: &[SE3Pose],
) -> Result<Aabb, BoundsError> {
    if clouds.is_empty() && ego_poses.is_empty() {
        return Err(BoundsError::EmptyInput);
    }
    let mut bb = Aabb::empty();
    let mut any = false;
    for (cloud, pose) in clouds {
        for p in &cloud.points {
            if !p.0.iter().all(|v| v.is_finite()) || p.norm() > MAX_POINT_RANGE {
                continue;
            }
            bb.include(&pose.apply(p));
            any = true;
        }
        bb.include(&pose.translation);
        any = true;
    }
    for pose in ego_poses {
        bb.include(&pose.translation);
        any = true;
    }
    if !any {
        return Err(BoundsError::EmptyInput);
    }
    Ok(bb.padded(0.05, 1.0))
}
