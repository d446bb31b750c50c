//! Point-to-point ICP: k-d tree nearest neighbors, closed-form SVD rigid
//! alignment per iteration.

use super::bounds::PointCloud;
use crate::geom::{Mat3, Vec3};
use crate::lie::SE3Pose;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IcpError {
    #[error("clouds too small ({0} and {1} points; need at least 10)")]
    TooFewPoints(usize, usize),
    #[error("degenerate geometry: cross-covariance is rank-deficient")]
    DegenerateGeometry,
}

/// Static 3D k-d tree built once over the target cloud.
struct KdTree {
    /// Nodes in heap order: `(point, original index, split axis)`.
    nodes: Vec<(Vec3<f64>, usize, u8)>,
}

impl KdTree {
    fn build(points: &[Vec3<f64>]) -> KdTree {
        // pre-order flattening; the search reconstructs child ranges from
        // the left-half/right-half recursion
        fn build_rec(
            points: &[Vec3<f64>],
            idx: &mut [usize],
            depth: u8,
            out: &mut Vec<(Vec3<f64>, usize, u8)>,
        ) {
            if idx.is_empty() {
                return;
            }
            let axis = depth % 3;
            idx.sort_by(|a, b| {
                points[*a].0[axis as usize]
                    .partial_cmp(&points[*b].0[axis as usize])
                    .unwrap()
            });
            let mid = idx.len() / 2;
            out.push((points[idx[mid]], idx[mid], axis));
            let (lo, rest) = idx.split_at_mut(mid);
            build_rec(points, lo, depth + 1, out);
            build_rec(points, &mut rest[1..], depth + 1, out);
        }
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        build_rec(points, &mut idx, 0, &mut nodes);
        KdTree { nodes }
    }

    fn nearest(&self, q: &Vec3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.nodes.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: &Vec3<f64>, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let count = hi - lo;
        let mid_len = count / 2;
        let (point, orig, axis) = self.nodes[lo];
        let d2 = (*q - point).norm_sq();
        if d2 < best.1 {
            *best = (orig, d2);
        }
        // children: left block is nodes[lo+1 .. lo+1+mid_len],
        // right block is the remainder
        let left = (lo + 1, lo + 1 + mid_len);
        let right = (lo + 1 + mid_len, hi);
        let delta = q.0[axis as usize] - point.0[axis as usize];
        let (first, second) = if delta < 0.0 { (left, right) } else { (right, left) };
        self.search(first.0, first.1, q, best);
        if delta * delta < best.1 {
            self.search(second.0, second.1, q, best);
        }
    }
}

/// Optimal rigid transform aligning `src` onto `dst` (paired points) via
/// the SVD of the cross-covariance.
fn kabsch(src: &[Vec3<f64>], dst: &[Vec3<f64>]) -> Result<SE3Pose, IcpError> {
    let n = src.len() as f64;
    let mut cs = Vec3::zero();
    let mut cd = Vec3::zero();
    for (a, b) in src.iter().zip(dst.iter()) {
        cs = cs + *a;
        cd = cd + *b;
    }
    cs = cs.scale(1.0 / n);
    cd = cd.scale(1.0 / n);
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in src.iter().zip(dst.iter()) {
        let p = Vector3::new(a.x() - cs.x(), a.y() - cs.y(), a.z() - cs.z());
        let q = Vector3::new(b.x() - cd.x(), b.y() - cd.y(), b.z() - cd.z());
        h += p * q.transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] < 1e-12 * sv[0].max(1e-300) {
        return Err(IcpError::DegenerateGeometry);
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    let det = (vt.transpose() * u.transpose()).determinant();
    if det < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let mut rot = Mat3::identity();
    for i in 0..3 {
        for j in 0..3 {
            rot.0[i][j] = r[(i, j)];
        }
    }
    let t = Vec3::new(
        cd.x() - (rot.0[0][0] * cs.x() + rot.0[0][1] * cs.y() + rot.0[0][2] * cs.z()),
        cd.y() - (rot.0[1][0] * cs.x() + rot.0[1][1] * cs.y() + rot.0[1][2] * cs.z()),
        cd.z() - (rot.0[2][0] * cs.x() + rot.0[2][1] * cs.y() + rot.0[2][2] * cs.z()),
    );
    Ok(SE3Pose::new(rot, t))
}

/// Point-to-point ICP from `source` to `target`, warm-started at `init`.
/// Returns the refined source→target transform and the final RMS.
pub fn icp_align(
    source: &PointCloud,
    target: &PointCloud,
    init: &SE3Pose,
    max_iters: usize,
    tol: f64,
) -> Result<(SE3Pose, f64), IcpError> {
    if source.points.len() < 10 || target.points.len() < 10 {
        return Err(IcpError::TooFewPoints(source.points.len(), target.points.len()));
    }
    let tree = KdTree::build(&target.points);
    let mut transform = *init;
    let mut prev_rms = f64::INFINITY;
    for _ in 0..max_iters {
        // correspondences under the current transform
        let moved: Vec<Vec3<f64>> = source.points.iter().map(|p| transform.apply(p)).collect();
        let pairs: Vec<(usize, usize)> = moved
            .iter()
            .enumerate()
            .map(|(i, p)| (i, tree.nearest(p).0))
            .collect();
        let dst: Vec<Vec3<f64>> = pairs.iter().map(|(_, j)| target.points[*j]).collect();
        // absolute re-fit on the original source points
        transform = kabsch(&source.points, &dst)?;
        let mut sq = 0.0;
        for ((i, _), d) in pairs.iter().zip(dst.iter()) {
            sq += (transform.apply(&source.points[*i]) - *d).norm_sq();
        }
        let rms = (sq / pairs.len() as f64).sqrt();
        if prev_rms - rms < tol {
            return Ok((transform, rms));
        }
        prev_rms = rms;
    }
    Ok((transform, prev_rms))
}

/// Chains pairwise alignments: pose of every cloud in the frame of the
/// first one.
pub fn icp_align_chain(
    clouds: &[PointCloud],
    max_iters: usize,
    tol: f64,
) -> Result<Vec<SE3Pose>, IcpError> {
    let mut poses = vec![SE3Pose::identity()];
    for w in clouds.windows(2) {
        let (rel, _) = icp_align(&w[1], &w[0], &SE3Pose::identity(), max_iters, tol)?;
        let prev = *poses.last().unwrap();
        poses.push(crate::lie::compose(&prev, &rel));
    }
    Ok(poses)
}
