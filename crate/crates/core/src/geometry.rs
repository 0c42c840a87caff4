//! Rotations, homogeneous transforms and rigid point-set registration.
//!
//! Euler angles follow the roll/pitch/yaw convention about the fixed x, y and
//! z axes, composed as `Rz(yaw) * Ry(pitch) * Rx(roll)`. The tag written to
//! calibration files for this convention is [`EULER_CONVENTION`].

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

pub const EULER_CONVENTION: &str = "ZYX-extrinsic-rzryrx";

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`, all angles in radians.
pub fn euler_to_rotation(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    rot_z(yaw) * rot_y(pitch) * rot_x(roll)
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Largest absolute deviation of `mᵀm` from the identity.
pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).abs().max()
}

/// A proper rigid motion: orthonormal rotation with det +1 and a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor; rejects non-orthonormal or reflecting rotations.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "rigid transform has non-finite entries".into(),
            ));
        }
        let ortho = orthonormality_error(&rotation);
        if ortho > ORTHONORMAL_TOL {
            return Err(Error::InvalidParameter(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {ortho:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidParameter(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Caller guarantees `rotation` is a proper rotation.
    pub fn new_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new_unchecked(Matrix3::identity(), t)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new_unchecked(r, Vector3::zeros())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new_unchecked(rt, -(rt * self.translation))
    }

    /// `self * other`: apply `other` first.
    pub fn then_after(&self, other: &RigidTransform) -> Self {
        Self::new_unchecked(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn to_homogeneous(&self) -> Homogeneous4 {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        Homogeneous4(m)
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// 4×4 affine matrix whose bottom row is exactly `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homogeneous4(Matrix4<f64>);

impl Homogeneous4 {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.fixed_view::<1, 4>(3, 0) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
            return Err(Error::InvalidParameter(
                "homogeneous matrix bottom row must be (0, 0, 0, 1)".into(),
            ));
        }
        Ok(Self(m))
    }

    /// Builds from a linear block and a translation column.
    pub fn from_parts(linear: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
        Self(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_parts(&Matrix3::identity(), &Vector3::new(x, y, z))
    }

    pub fn uniform_scale(s: f64) -> Self {
        Self::from_parts(&(Matrix3::identity() * s), &Vector3::zeros())
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Inverse of the affine map; `None` if the linear block is singular.
    pub fn inverse(&self) -> Option<Self> {
        let inv = self.linear().try_inverse()?;
        Some(Self::from_parts(&inv, &(-(inv * self.translation_part()))))
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.linear() * p.coords + self.translation_part())
    }
}

/// Matrix product `a * b`; the bottom row stays exact.
pub fn compose(a: &Homogeneous4, b: &Homogeneous4) -> Homogeneous4 {
    let linear = a.linear() * b.linear();
    let translation = a.linear() * b.translation_part() + a.translation_part();
    Homogeneous4::from_parts(&linear, &translation)
}

pub fn apply(t: &Homogeneous4, p: &Point3) -> Point3 {
    t.apply(p)
}

fn centroid(points: &[Point3]) -> Vector3<f64> {
    points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / points.len() as f64
}

/// Closed-form least-squares rigid alignment of index-paired point sets.
///
/// Returns the transform minimizing `Σ |R·sᵢ + t − tᵢ|²`. Reflections are
/// never returned: when `det(V·Uᵀ) < 0` the singular vector paired with the
/// smallest singular value is negated.
pub fn kabsch_align(source: &[Point3], target: &[Point3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::DegenerateGeometry(format!(
            "point sets differ in length ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let sc = centroid(source);
    let tc = centroid(target);
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s.coords - sc) * (t.coords - tc).transpose();
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateGeometry("non-finite points".into()));
    }

    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD failed".into())),
    };
    let sv = svd.singular_values;
    let (mut order, largest) = ([0usize, 1, 2], sv.max());
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if largest <= 0.0 || sv[order[1]] <= 1e-10 * largest {
        return Err(Error::DegenerateGeometry(
            "centered covariance has rank < 2 (points collinear or coincident)".into(),
        ));
    }

    let v = v_t.transpose();
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (v * u.transpose()).determinant() < 0.0 {
        d[order[2]] = -1.0;
    }
    let rotation = v * Matrix3::from_diagonal(&d) * u.transpose();
    let translation = tc - rotation * sc;
    Ok(RigidTransform::new_unchecked(rotation, translation))
}

/// Mean squared distance between `t(sourceᵢ)` and `targetᵢ`.
pub fn mean_squared_residual(t: &RigidTransform, source: &[Point3], target: &[Point3]) -> f64 {
    let n = source.len().max(1) as f64;
    source
        .iter()
        .zip(target)
        .map(|(s, q)| (t.apply(s) - q).norm_squared())
        .sum::<f64>()
        / n
}

fn nearest(p: &Point3, cloud: &[Point3]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, q) in cloud.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Point-to-point ICP for unlabeled point sets.
///
/// Alternates nearest-neighbour matching with [`kabsch_align`] until the mean
/// residual distance changes by less than `tol` mm or `max_iters` is reached.
pub fn icp_align(
    source: &[Point3],
    target: &[Point3],
    max_iters: usize,
    tol: f64,
) -> Result<RigidTransform> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::DegenerateGeometry(
            "ICP needs non-empty point sets".into(),
        ));
    }
    let mut current = RigidTransform::identity();
    let mut previous = f64::INFINITY;
    let mut matched = Vec::with_capacity(source.len());
    for _ in 0..max_iters.max(1) {
        matched.clear();
        matched.extend(
            source
                .iter()
                .map(|s| target[nearest(&current.apply(s), target)]),
        );
        current = kabsch_align(source, &matched)?;
        let residual = source
            .iter()
            .zip(&matched)
            .map(|(s, q)| (current.apply(s) - q).norm())
            .sum::<f64>()
            / source.len() as f64;
        if (previous - residual).abs() < tol {
            break;
        }
        previous = residual;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn assert_close(a: &Point3, b: &Point3, tol: f64) {
        assert!((a - b).norm() <= tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(euler_to_rotation(0.0, 0.0, 0.0), Matrix3::identity());
    }

    #[test]
    fn yaw_quarter_turn_maps_x_to_y() {
        let r = euler_to_rotation(0.0, 0.0, FRAC_PI_2);
        let p = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() <= 1e-12);
    }

    #[test]
    fn roll_half_turn_flips_y() {
        let r = euler_to_rotation(PI, 0.0, 0.0);
        let p = r * Vector3::new(0.0, 1.0, 0.0);
        assert!((p - Vector3::new(0.0, -1.0, 0.0)).norm() <= 1e-12);
    }

    #[test]
    fn composition_order_is_yaw_pitch_roll() {
        let (r, p, y) = (0.3, -0.2, 1.1);
        let expected = rot_z(y) * rot_y(p) * rot_x(r);
        assert_eq!(euler_to_rotation(r, p, y), expected);
    }

    #[test]
    fn compose_identities_and_translations() {
        let x = Homogeneous4::from_parts(
            &euler_to_rotation(0.1, 0.2, 0.3),
            &Vector3::new(4.0, -1.0, 2.0),
        );
        assert_eq!(compose(&Homogeneous4::identity(), &x), x);

        let back = compose(&x, &x.inverse().unwrap());
        assert!((back.matrix() - Matrix4::identity()).abs().max() <= 1e-12);

        let t = compose(
            &Homogeneous4::translation(1.0, 0.0, 0.0),
            &Homogeneous4::translation(0.0, 2.0, 0.0),
        );
        assert_eq!(t, Homogeneous4::translation(1.0, 2.0, 0.0));
        assert_eq!(
            t.matrix().row(3),
            Vector4::new(0.0, 0.0, 0.0, 1.0).transpose()
        );
    }

    #[test]
    fn apply_examples() {
        assert_eq!(
            apply(&Homogeneous4::identity(), &Point3::new(3.0, 4.0, 5.0)),
            Point3::new(3.0, 4.0, 5.0)
        );
        assert_eq!(
            apply(&Homogeneous4::translation(1.0, 1.0, 1.0), &Point3::origin()),
            Point3::new(1.0, 1.0, 1.0)
        );
        assert_eq!(
            apply(
                &Homogeneous4::uniform_scale(2.0),
                &Point3::new(1.0, 2.0, 3.0)
            ),
            Point3::new(2.0, 4.0, 6.0)
        );
    }

    #[test]
    fn homogeneous_rejects_bad_bottom_row() {
        let mut m = Matrix4::identity();
        m[(3, 0)] = 1e-3;
        assert!(Homogeneous4::from_matrix(m).is_err());
    }

    #[test]
    fn rigid_rejects_reflection() {
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(refl, Vector3::zeros()).is_err());
    }

    fn tetra() -> Vec<Point3> {
        vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(0.0, 7.0, 0.0),
            Point3::new(1.0, 2.0, 5.0),
        ]
    }

    #[test]
    fn kabsch_identity_on_equal_sets() {
        let pts = tetra();
        let t = kabsch_align(&pts, &pts).unwrap();
        assert!((t.rotation() - Matrix3::identity()).abs().max() <= 1e-12);
        assert!(t.translation().norm() <= 1e-12);
        assert!(mean_squared_residual(&t, &pts, &pts) <= 1e-18);
    }

    #[test]
    fn kabsch_recovers_rz30_plus_shift() {
        let truth =
            RigidTransform::new_unchecked(rot_z(30f64.to_radians()), Vector3::new(5.0, 0.0, 0.0));
        let src = tetra();
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let t = kabsch_align(&src, &dst).unwrap();
        assert!((t.rotation() - truth.rotation()).norm() <= 1e-9);
        assert!((t.translation() - truth.translation()).norm() <= 1e-9);
        assert!(mean_squared_residual(&t, &src, &dst) <= 1e-18);
    }

    #[test]
    fn kabsch_coplanar_set_has_no_reflection() {
        // Planar input: the smallest singular value is zero and the sign
        // of that axis must be chosen to keep det = +1.
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
            Point3::new(0.0, 4.0, 0.0),
            Point3::new(2.0, 2.0, 0.0),
        ];
        let truth = RigidTransform::new_unchecked(
            euler_to_rotation(0.7, -1.2, 2.5),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let t = kabsch_align(&src, &dst).unwrap();
        assert!((t.rotation().determinant() - 1.0).abs() <= 1e-9);
        assert!((t.rotation() - truth.rotation()).norm() <= 1e-9);
    }

    #[test]
    fn kabsch_rejects_degenerate_input() {
        let two = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            kabsch_align(&two, &two),
            Err(Error::DegenerateGeometry(_))
        ));
        let line: Vec<_> = (0..5)
            .map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.0))
            .collect();
        assert!(matches!(
            kabsch_align(&line, &line),
            Err(Error::DegenerateGeometry(_))
        ));
        let same = vec![Point3::new(1.0, 1.0, 1.0); 4];
        assert!(matches!(
            kabsch_align(&same, &same),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn icp_identity_on_equal_sets() {
        let pts = tetra();
        let t = icp_align(&pts, &pts, 50, 1e-12).unwrap();
        assert!((t.rotation() - Matrix3::identity()).abs().max() <= 1e-12);
        assert!(t.translation().norm() <= 1e-12);
    }

    #[test]
    fn icp_recovers_small_displacement_without_labels() {
        let target = tetra();
        // Minimum spacing is ~5.5 mm; a 1 mm shift keeps every point
        // closest to its own partner.
        let shift = RigidTransform::from_translation(Vector3::new(0.6, -0.5, 0.4));
        let mut source: Vec<_> = target.iter().map(|p| shift.inverse().apply(p)).collect();
        source.reverse();
        let t = icp_align(&source, &target, 50, 1e-12).unwrap();
        assert!((t.translation() - shift.translation()).norm() <= 1e-6);
        assert!((t.rotation() - Matrix3::identity()).norm() <= 1e-6);
    }

    #[test]
    fn icp_rejects_empty() {
        assert!(icp_align(&[], &tetra(), 10, 1e-9).is_err());
    }

    #[test]
    fn rigid_compose_matches_homogeneous() {
        let a = RigidTransform::new_unchecked(
            euler_to_rotation(0.1, 0.5, -0.3),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let b = RigidTransform::new_unchecked(
            euler_to_rotation(-0.4, 0.2, 0.9),
            Vector3::new(-3.0, 0.5, 8.0),
        );
        let p = Point3::new(2.0, -7.0, 4.0);
        let via_rigid = a.then_after(&b).apply(&p);
        let via_h = compose(&a.to_homogeneous(), &b.to_homogeneous()).apply(&p);
        assert_close(&via_rigid, &via_h, 1e-12);
        assert_close(&a.inverse().apply(&a.apply(&p)), &p, 1e-12);
    }
}
