//! Rigid-body math: SE(3)/SE(2) exponential maps, pose composition and
//! inversion, continuous-time pose interpolation, and the unbounded-space
//! contraction.
//!
//! All public types carry `f64` entries; the generic internals accept dual
//! numbers so residual chains can be differentiated exactly.

use crate::dual::Dual;
use crate::geom::{Mat3, Quat, Scalar, Vec3};
use serde::{Deserialize, Serialize};

/// Angle below which the Rodrigues coefficients switch to their Taylor
/// expansions to avoid cancellation.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rigid transform: `x_out = rotation * x_in + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE3Pose {
    pub rotation: Mat3<f64>,
    pub translation: Vec3<f64>,
}

/// Element of se(3): translational part `rho`, rotational part `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE3Tangent {
    pub rho: Vec3<f64>,
    pub phi: Vec3<f64>,
}

/// Element of se(2): in-plane translation and yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE2Tangent {
    pub rho_xy: [f64; 2],
    pub theta: f64,
}

/// Oriented box: `pose` maps box-local coordinates to the parent frame,
/// `size` holds the full extents along the box axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox3D {
    pub pose: SE3Pose,
    pub size: Vec3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        SE3Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn new(rotation: Mat3<f64>, translation: Vec3<f64>) -> Self {
        SE3Pose { rotation, translation }
    }

    pub fn apply(&self, x: &Vec3<f64>) -> Vec3<f64> {
        self.rotation.mul_vec(x) + self.translation
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.orthonormality_defect() < tol
            && (self.rotation.det() - 1.0).abs() < tol
            && self
                .translation
                .0
                .iter()
                .chain(self.rotation.0.iter().flatten())
                .all(|v| v.is_finite())
    }

    /// Rotation angle in radians between the two poses' orientations.
    pub fn rotation_angle_to(&self, other: &SE3Pose) -> f64 {
        let rel = self.rotation.transpose().mul_mat(&other.rotation);
        let tr = rel.0[0][0] + rel.0[1][1] + rel.0[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl SE3Tangent {
    pub fn zero() -> Self {
        SE3Tangent {
            rho: Vec3::zero(),
            phi: Vec3::zero(),
        }
    }

    pub fn new(rho: Vec3<f64>, phi: Vec3<f64>) -> Self {
        SE3Tangent { rho, phi }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        SE3Tangent {
            rho: Vec3::new(v[0], v[1], v[2]),
            phi: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rho.x(),
            self.rho.y(),
            self.rho.z(),
            self.phi.x(),
            self.phi.y(),
            self.phi.z(),
        ]
    }

    pub fn neg(&self) -> Self {
        SE3Tangent {
            rho: -self.rho,
            phi: -self.phi,
        }
    }
}

impl SE2Tangent {
    pub fn zero() -> Self {
        SE2Tangent {
            rho_xy: [0.0, 0.0],
            theta: 0.0,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.rho_xy[0], self.rho_xy[1], self.theta]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        SE2Tangent {
            rho_xy: [v[0], v[1]],
            theta: v[2],
        }
    }
}

/// Generic pose used by the dual-number chains.
#[derive(Clone, Copy, Debug)]
pub struct PoseG<S: Scalar> {
    pub rotation: Mat3<S>,
    pub translation: Vec3<S>,
}

impl<S: Scalar> PoseG<S> {
    pub fn identity() -> Self {
        PoseG {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn compose(&self, other: &PoseG<S>) -> PoseG<S> {
        PoseG {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseG<S> {
        let rt = self.rotation.transpose();
        PoseG {
            rotation: rt,
            translation: -rt.mul_vec(&self.translation),
        }
    }
}

impl SE3Pose {
    pub fn lift<S: Scalar>(&self) -> PoseG<S> {
        PoseG {
            rotation: self.rotation.lift(),
            translation: self.translation.lift(),
        }
    }
}

impl<S: Scalar> PoseG<S> {
    pub fn map_f64(&self) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation.map_f64(),
            translation: self.translation.map_f64(),
        }
    }
}

/// Rodrigues coefficients `A = sinθ/θ`, `B = (1−cosθ)/θ²`, `C = (θ−sinθ)/θ³`
/// with 2nd-order Taylor fallbacks below [`SMALL_ANGLE`].
fn rodrigues_coeffs<S: Scalar>(theta_sq: S) -> (S, S, S) {
    if theta_sq.value().sqrt() < SMALL_ANGLE {
        let c1 = S::from_f64(1.0 / 6.0);
        let c2 = S::from_f64(1.0 / 24.0);
        let c3 = S::from_f64(1.0 / 120.0);
        (
            S::from_f64(1.0) - theta_sq * c1,
            S::from_f64(0.5) - theta_sq * c2,
            c1 - theta_sq * c3,
        )
    } else {
        let theta = theta_sq.sqrt();
        let one = S::from_f64(1.0);
        let a = theta.sin() / theta;
        let b = (one - theta.cos()) / theta_sq;
        let c = (one - a) / theta_sq;
        (a, b, c)
    }
}

/// SE(3) exponential map, generic over the scalar.
pub fn se3_expmap_generic<S: Scalar>(rho: Vec3<S>, phi: Vec3<S>) -> PoseG<S> {
    let theta_sq = phi.norm_sq();
    let (a, b, c) = rodrigues_coeffs(theta_sq);
    let k = Mat3::skew(&phi);
    let k2 = k.mul_mat(&k);
    let rotation = Mat3::identity().add_mat(&k.scale(a)).add_mat(&k2.scale(b));
    let v = Mat3::identity().add_mat(&k.scale(b)).add_mat(&k2.scale(c));
    PoseG {
        rotation,
        translation: v.mul_vec(&rho),
    }
}

/// Closed-form SE(3) exponential: Rodrigues rotation plus V-matrix
/// translation.
pub fn se3_expmap(tau: &SE3Tangent) -> SE3Pose {
    se3_expmap_generic(tau.rho.lift::<f64>(), tau.phi.lift::<f64>()).map_f64()
}

/// SE(2) exponential in the ground plane, embedded into SE(3): yaw about
/// the z axis, zero z translation, zero roll and pitch.
pub fn se2_expmap_lifted_generic<S: Scalar>(rho_x: S, rho_y: S, theta: S) -> PoseG<S> {
    let zero = S::from_f64(0.0);
    let one = S::from_f64(1.0);
    let (st, ct) = (theta.sin(), theta.cos());
    // V2 = [[sinθ/θ, -(1-cosθ)/θ], [(1-cosθ)/θ, sinθ/θ]]
    let (a, b) = if theta.value().abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            one - t2 * S::from_f64(1.0 / 6.0),
            theta * S::from_f64(0.5) - theta * t2 * S::from_f64(1.0 / 24.0),
        )
    } else {
        (st / theta, (one - ct) / theta)
    };
    let tx = a * rho_x - b * rho_y;
    let ty = b * rho_x + a * rho_y;
    PoseG {
        rotation: Mat3([[ct, -st, zero], [st, ct, zero], [zero, zero, one]]),
        translation: Vec3::new(tx, ty, zero),
    }
}

pub fn se2_expmap_lifted(tau: &SE2Tangent) -> SE3Pose {
    se2_expmap_lifted_generic(tau.rho_xy[0], tau.rho_xy[1], tau.theta).map_f64()
}

pub fn compose(a: &SE3Pose, b: &SE3Pose) -> SE3Pose {
    SE3Pose {
        rotation: a.rotation.mul_mat(&b.rotation),
        translation: a.rotation.mul_vec(&b.translation) + a.translation,
    }
}

pub fn inverse(a: &SE3Pose) -> SE3Pose {
    let rt = a.rotation.transpose();
    SE3Pose {
        rotation: rt,
        translation: -rt.mul_vec(&a.translation),
    }
}

/// Pose interpolation generic over the scalar: linear translation, slerp
/// rotation. `alpha` is the normalized interpolation weight in `[0, 1]`.
pub fn interpolate_pose_generic<S: Scalar>(a: &PoseG<S>, b: &PoseG<S>, alpha: S) -> PoseG<S> {
    let qa = Quat::from_matrix(&a.rotation);
    let qb = Quat::from_matrix(&b.rotation);
    let q = qa.slerp(&qb, alpha).normalized();
    let one = S::from_f64(1.0);
    PoseG {
        rotation: q.to_matrix(),
        translation: a.translation.scale(one - alpha) + b.translation.scale(alpha),
    }
}

/// Interpolates between `a` (at `t_a`) and `b` (at `t_b`) at time `t`.
/// Times outside `[t_a, t_b]` clamp to the nearest endpoint pose.
pub fn interpolate_pose(a: &SE3Pose, b: &SE3Pose, t_a: f64, t_b: f64, t: f64) -> SE3Pose {
    if t <= t_a || t_a >= t_b {
        return *a;
    }
    if t >= t_b {
        return *b;
    }
    let alpha = (t - t_a) / (t_b - t_a);
    interpolate_pose_generic(&a.lift::<f64>(), &b.lift::<f64>(), alpha).map_f64()
}

/// ∞-norm space contraction: identity on the closed unit ball, compresses
/// everything else into the open ball of radius 2.
pub fn contract_generic<S: Scalar>(x: Vec3<S>) -> Vec3<S> {
    let n = x.norm_inf_value();
    if n <= 1.0 {
        return x;
    }
    // n > 1, recompute the norm on the scalar type so derivatives flow.
    let mut norm = x.0[0];
    let mut best = x.0[0].value().abs();
    for i in 0..3 {
        let a = x.0[i].value().abs();
        if a >= best {
            best = a;
            norm = x.0[i];
        }
    }
    if norm.value() < 0.0 {
        norm = -norm;
    }
    let two = S::from_f64(2.0);
    let one = S::from_f64(1.0);
    let scale = (two - one / norm) / norm;
    x.scale(scale)
}

pub fn contract(x: Vec3<f64>) -> Vec3<f64> {
    contract_generic(x)
}

/// Jacobian of [`contract`] at `x` (row-major), via dual numbers.
pub fn contract_jacobian(x: Vec3<f64>) -> [[f64; 3]; 3] {
    let xd = Vec3::<Dual<3>>::new(
        Dual::var(x.x(), 0),
        Dual::var(x.y(), 1),
        Dual::var(x.z(), 2),
    );
    let y = contract_generic(xd);
    let mut j = [[0.0; 3]; 3];
    for r in 0..3 {
        j[r] = y.0[r].dx;
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn rot_z(angle: f64) -> Mat3<f64> {
        let (s, c) = angle.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    #[test]
    fn expmap_zero_is_identity() {
        let p = se3_expmap(&SE3Tangent::zero());
        assert_eq!(p.rotation, Mat3::identity());
        assert_eq!(p.translation, Vec3::zero());
    }

    #[test]
    fn expmap_pure_translation() {
        let p = se3_expmap(&SE3Tangent::new(Vec3::new(1.0, 2.0, 3.0), Vec3::zero()));
        assert_eq!(p.rotation, Mat3::identity());
        assert_eq!(p.translation, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn expmap_quarter_turn_about_z() {
        // Oracle: Rodrigues formula for phi = (0,0,pi/2) evaluated exactly:
        // R = [[0,-1,0],[1,0,0],[0,0,1]].
        let p = se3_expmap(&SE3Tangent::new(
            Vec3::zero(),
            Vec3::new(0.0, 0.0, PI / 2.0),
        ));
        let expect = rot_z(PI / 2.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.rotation.0[i][j] - expect.0[i][j]).abs() < 1e-15);
            }
        }
        assert!(p.translation.norm() < 1e-15);
    }

    #[test]
    fn se2_lift_zero_and_pure_translation() {
        let p = se2_expmap_lifted(&SE2Tangent::zero());
        assert_eq!(p.rotation, Mat3::identity());
        let p = se2_expmap_lifted(&SE2Tangent {
            rho_xy: [1.0, 0.0],
            theta: 0.0,
        });
        assert_eq!(p.translation, Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn se2_lift_half_turn_matches_closed_form() {
        // Closed-form SE(2) exp for rho=(1,0), theta=pi:
        // t = (sin(pi)/pi, (1-cos(pi))/pi) = (0, 2/pi).
        let p = se2_expmap_lifted(&SE2Tangent {
            rho_xy: [1.0, 0.0],
            theta: PI,
        });
        assert!((p.translation.x() - 0.0).abs() < 1e-12);
        assert!((p.translation.y() - 2.0 / PI).abs() < 1e-12);
        assert!(p.translation.z() == 0.0);
        // rotation fixes z
        assert_eq!(p.rotation.0[2], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn compose_identity_and_inverse() {
        let p = se3_expmap(&SE3Tangent::new(
            Vec3::new(0.3, -0.7, 1.1),
            Vec3::new(0.2, 0.4, -0.1),
        ));
        let id = SE3Pose::identity();
        assert_eq!(compose(&id, &p), p);
        assert_eq!(inverse(&id), id);
        let r = compose(&p, &inverse(&p));
        assert!(r.rotation.orthonormality_defect() < 1e-12);
        assert!((r.rotation.0[0][0] - 1.0).abs() < 1e-12);
        assert!(r.translation.norm() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = SE3Pose::identity();
        let b = SE3Pose::new(rot_z(PI / 2.0), Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(interpolate_pose(&a, &b, 0.0, 1.0, 0.0), a);
        assert_eq!(interpolate_pose(&a, &a, 1.0, 1.0, 1.0), a);
        let mid = interpolate_pose(&a, &b, 0.0, 1.0, 0.5);
        let expect = rot_z(PI / 4.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((mid.rotation.0[i][j] - expect.0[i][j]).abs() < 1e-12);
            }
        }
        assert!((mid.translation.x() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_clamps_outside_span() {
        let a = SE3Pose::identity();
        let b = SE3Pose::new(rot_z(1.0), Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(interpolate_pose(&a, &b, 1.0, 2.0, 0.5), a);
        assert_eq!(interpolate_pose(&a, &b, 1.0, 2.0, 3.5), b);
    }

    #[test]
    fn contract_cases() {
        let inside = contract(Vec3::new(0.5, -0.2, 0.0));
        assert_eq!(inside, Vec3::new(0.5, -0.2, 0.0));
        let far = contract(Vec3::new(4.0, 0.0, 0.0));
        assert!((far.x() - 1.75).abs() < 1e-12);
        let huge = contract(Vec3::new(1e6, 0.0, 0.0));
        assert!((huge.x() - 2.0).abs() < 1e-5);
        // continuity across the unit boundary
        let a = contract(Vec3::new(1.0 - 1e-9, 0.3, 0.0));
        let b = contract(Vec3::new(1.0 + 1e-9, 0.3, 0.0));
        assert!((a - b).norm() < 1e-6);
    }

    #[test]
    fn contract_jacobian_matches_finite_differences() {
        for x in [
            Vec3::new(0.3, 0.2, -0.5),
            Vec3::new(1.8, -0.4, 0.9),
            Vec3::new(-3.0, 2.0, 0.1),
        ] {
            let j = contract_jacobian(x);
            let h = 1e-6;
            for c in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp.0[c] += h;
                xm.0[c] -= h;
                let fp = contract(xp);
                let fm = contract(xm);
                for r in 0..3 {
                    let fd = (fp.0[r] - fm.0[r]) / (2.0 * h);
                    assert!(
                        (j[r][c] - fd).abs() < 1e-6,
                        "jacobian mismatch at {:?} [{r},{c}]: {} vs {}",
                        x,
                        j[r][c],
                        fd
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn expmap_negation_is_inverse(v in proptest::collection::vec(-1.5f64..1.5, 6)) {
            let tau = SE3Tangent::from_slice(&v);
            let p = se3_expmap(&tau);
            let q = se3_expmap(&tau.neg());
            let r = compose(&p, &q);
            prop_assert!(r.rotation.orthonormality_defect() < 1e-9);
            prop_assert!((r.rotation.det() - 1.0).abs() < 1e-9);
            prop_assert!(r.translation.norm() < 1e-9);
            let inv = inverse(&p);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((q.rotation.0[i][j] - inv.rotation.0[i][j]).abs() < 1e-6);
                }
                prop_assert!((q.translation.0[i] - inv.translation.0[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn interpolation_stays_orthonormal(v in proptest::collection::vec(-2.0f64..2.0, 12), t in 0.0f64..1.0) {
            let a = se3_expmap(&SE3Tangent::from_slice(&v[..6]));
            let b = se3_expmap(&SE3Tangent::from_slice(&v[6..]));
            let p = interpolate_pose(&a, &b, 0.0, 1.0, t);
            prop_assert!(p.rotation.orthonormality_defect() < 1e-6);
        }

        #[test]
        fn contract_identity_inside_and_bounded(v in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let x = Vec3::new(v[0], v[1], v[2]);
            let y = contract(x);
            if x.norm_inf_value() <= 1.0 {
                prop_assert_eq!(x, y);
            }
            prop_assert!(y.norm_inf_value() < 2.0);
        }

        #[test]
        fn se2_lift_is_planar(v in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let p = se2_expmap_lifted(&SE2Tangent { rho_xy: [v[0], v[1]], theta: v[2] });
            prop_assert_eq!(p.translation.z(), 0.0);
            // rotation fixes the z axis
            let z = p.rotation.mul_vec(&Vec3::new(0.0, 0.0, 1.0));
            prop_assert!((z - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn contract_injective_outside_unit_ball() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3<f64>> = (0..1000)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                )
            })
            .filter(|p| p.norm_inf_value() > 1.0)
            .collect();
        let images: Vec<Vec3<f64>> = pts.iter().map(|p| contract(*p)).collect();
        for i in 0..images.len() {
            for j in (i + 1)..images.len() {
                let dp = (pts[i] - pts[j]).norm();
                let di = (images[i] - images[j]).norm();
                assert!(
                    !(dp > 1e-6 && di < 1e-12),
                    "distinct points collapsed: {:?} {:?}",
                    pts[i],
                    pts[j]
                );
            }
        }
    }
}
