//! Viewpoint sampling, rotation and similarity-transform algebra, and the
//! chain that turns an out-of-plane rotation plus a 2D similarity into a
//! full object pose.
//!
//! Conventions: matrices are row-major when flattened, 2D points are
//! homogeneous column vectors, image axes are x right / y down and the
//! camera looks along +z.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{invalid, Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(alpha: f64) -> f64 {
    let a = alpha.sin().atan2(alpha.cos());
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Proper rotation matrix (orthonormal, det = +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and handedness within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let err = (m * m.transpose() - Matrix3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(invalid(format!("matrix is not orthonormal (error {err:e})")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(invalid(format!("rotation determinant {det} != 1")));
        }
        Ok(Self(m))
    }

    /// Like [`Rotation3::from_matrix`] but re-orthonormalizes small drift
    /// (e.g. after parsing text with limited precision).
    pub fn from_matrix_lenient(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        let err = (m * m.transpose() - Matrix3::identity()).abs().max();
        if !(err <= tol) || m.determinant() <= 0.0 {
            return Err(invalid(format!("matrix is not a rotation (error {err:e})")));
        }
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        Self::from_matrix(u * vt)
    }

    pub fn from_row_slice(values: &[f64]) -> Result<Self> {
        if values.len() != 9 {
            return Err(invalid(format!("rotation needs 9 values, got {}", values.len())));
        }
        Self::from_matrix(Matrix3::from_row_slice(values))
    }

    /// Rotation about the camera optical axis.
    pub fn about_z(alpha: f64) -> Self {
        let (s, c) = alpha.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation about an arbitrary unit axis (Rodrigues).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let m = Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos());
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation3) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle between two rotations, in [0, pi].
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        let rel = self.0.transpose() * other.0;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        // acos loses precision near 0; use the skew part for small angles
        let skew = Vector3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        );
        (skew.norm() / 2.0).atan2(c)
    }
}

/// 2D similarity transform `[s R(alpha) | t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    scale: f64,
    alpha: f64,
    translation: Vector2<f64>,
}

impl Affine2 {
    pub fn new(scale: f64, alpha: f64, translation: Vector2<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateTransform(format!("scale {scale} is not positive")));
        }
        if !alpha.is_finite() || !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite similarity parameters"));
        }
        Ok(Self {
            scale,
            alpha: normalize_angle(alpha),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            alpha: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.translation
    }

    pub fn linear(&self) -> Matrix2<f64> {
        let (s, c) = self.alpha.sin_cos();
        Matrix2::new(c, -s, s, c) * self.scale
    }

    /// Homogeneous 3x3 form.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let l = self.linear();
        let t = self.translation;
        Matrix3::new(
            l[(0, 0)],
            l[(0, 1)],
            t.x,
            l[(1, 0)],
            l[(1, 1)],
            t.y,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Recovers (s, alpha, t) from a homogeneous similarity matrix. The
    /// scale is the norm of the first column.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let scale = m[(0, 0)].hypot(m[(1, 0)]);
        let alpha = m[(1, 0)].atan2(m[(0, 0)]);
        let candidate = Self::new(scale, alpha, Vector2::new(m[(0, 2)], m[(1, 2)]))?;
        let err = (candidate.to_matrix() - m).abs().max();
        if err > 1e-9 * (1.0 + m.abs().max()) {
            return Err(Error::DegenerateTransform(format!(
                "matrix is not a similarity (residual {err:e})"
            )));
        }
        Ok(candidate)
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.linear() * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let (s, c) = (-self.alpha).sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        Self {
            scale: inv_scale,
            alpha: normalize_angle(-self.alpha),
            translation: -(rot * self.translation) * inv_scale,
        }
    }

    /// `self * other` as matrices: applies `other` first.
    pub fn then_after(&self, other: &Affine2) -> Self {
        let linear = self.linear();
        Self {
            scale: self.scale * other.scale,
            alpha: normalize_angle(self.alpha + other.alpha),
            translation: linear * other.translation + self.translation,
        }
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(invalid(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(self.cx, self.cy)
    }

    /// Projects a camera-frame point. Caller guarantees z > 0.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// `K^-1 [u, v, 1]^T`.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        self.unproject(pixel) * depth
    }
}

/// Object-to-camera rigid transform, translation in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose6D {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl Pose6D {
    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt.rotate(&self.translation)),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose6D) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }
}

/// A sampled camera direction and its look-at rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    /// Unit vector from the object origin towards the camera.
    pub direction: Vector3<f64>,
    pub rotation: Rotation3,
}

/// Icosphere vertices in canonical order, plus the triangle list.
#[derive(Clone, Debug)]
pub struct ViewpointSet {
    pub subdivisions: u32,
    pub viewpoints: Vec<Viewpoint>,
    pub faces: Vec<[usize; 3]>,
}

impl ViewpointSet {
    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Index of the viewpoint whose direction is closest to `dir`.
    pub fn nearest(&self, dir: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, v) in self.viewpoints.iter().enumerate() {
            let d = v.direction.dot(dir);
            if d > best_dot {
                best_dot = d;
                best = i;
            }
        }
        best
    }
}

pub const MAX_SUBDIVISIONS: u32 = 4;

/// Number of vertices of an icosphere subdivided `n` times.
pub fn icosphere_vertex_count(n: u32) -> usize {
    10 * 4usize.pow(n) + 2
}

/// Samples viewpoints on an icosphere subdivided `subdivisions` times.
pub fn icosphere_viewpoints(subdivisions: u32) -> Result<ViewpointSet> {
    if subdivisions > MAX_SUBDIVISIONS {
        return Err(invalid(format!(
            "subdivisions must be in 0..={MAX_SUBDIVISIONS}, got {subdivisions}"
        )));
    }
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }

    // canonical order: lexicographic on coordinates rounded to 1e-9
    let key = |v: &Vector3<f64>| -> [i64; 3] {
        [
            (v.x * 1e9).round() as i64,
            (v.y * 1e9).round() as i64,
            (v.z * 1e9).round() as i64,
        ]
    };
    let mut order: Vec<usize> = (0..verts.len()).collect();
    order.sort_by_key(|&i| key(&verts[i]));
    let mut remap = vec![0usize; verts.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let viewpoints = order
        .iter()
        .map(|&i| {
            let direction = verts[i];
            Ok(Viewpoint {
                direction,
                rotation: viewpoint_to_rotation(&direction)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let faces = faces
        .into_iter()
        .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
        .collect();

    Ok(ViewpointSet {
        subdivisions,
        viewpoints,
        faces,
    })
}

/// Look-at rotation (object to camera) for a camera placed along
/// `direction` and looking at the origin. Up is world +z, or world +x when
/// the direction is within ~2.6 degrees of the z axis.
pub fn viewpoint_to_rotation(direction: &Vector3<f64>) -> Result<Rotation3> {
    let n = direction.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(invalid("viewpoint direction must be non-zero"));
    }
    if (n - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("viewpoint direction must be unit, norm {n}")));
    }
    let d = direction / n;
    let up = if d.z.abs() > 0.999 {
        Vector3::x()
    } else {
        Vector3::z()
    };
    let z_cam = -d;
    let x_cam = z_cam.cross(&up).normalize();
    let y_cam = z_cam.cross(&x_cam);
    let m = Matrix3::from_rows(&[x_cam.transpose(), y_cam.transpose(), z_cam.transpose()]);
    Rotation3::from_matrix(m)
}

/// `R = R_z(alpha) * R_ae`.
pub fn compose_rotation(alpha: f64, r_ae: &Rotation3) -> Rotation3 {
    Rotation3::about_z(alpha).compose(r_ae)
}

/// Maps original-template pixels to original-query pixels: crop the
/// template (`m_t`), apply the processed-space transform (`m_tq`), then undo
/// the query crop (`m_q`). As a product of column-vector matrices this is
/// `M_Q^-1 * M_tq * M_T`.
pub fn compose_template_to_query(m_t: &Affine2, m_tq: &Affine2, m_q: &Affine2) -> Affine2 {
    m_q.inverse().then_after(&m_tq.then_after(m_t))
}

/// Depth of the query object from the template depth, the 2D scale between
/// the original images and the focal ratio.
pub fn recover_translation_z(tz_template: f64, m_tq: &Affine2, f_t: f64, f_q: f64) -> Result<f64> {
    let scale = m_tq.to_matrix().fixed_view::<2, 1>(0, 0).norm();
    if !(scale > 0.0) {
        return Err(Error::DegenerateTransform(format!("scale {scale} is not positive")));
    }
    if !(tz_template > 0.0) {
        return Err(invalid(format!("template depth {tz_template} must be positive")));
    }
    if !(f_t > 0.0 && f_q > 0.0) {
        return Err(invalid("focal lengths must be positive"));
    }
    Ok(tz_template / scale * (f_q / f_t))
}

/// Full pose from the template's out-of-plane rotation, the in-plane angle
/// and the original-image template-to-query similarity.
pub fn recover_pose(
    r_ae: &Rotation3,
    alpha: f64,
    m_template_to_query: &Affine2,
    template_center: &Vector2<f64>,
    tz_template: f64,
    k_template: &CameraIntrinsics,
    k_query: &CameraIntrinsics,
) -> Result<Pose6D> {
    let rotation = compose_rotation(alpha, r_ae);
    let center_q = m_template_to_query.apply(template_center);
    let tz = recover_translation_z(tz_template, m_template_to_query, k_template.fx, k_query.fx)?;
    let translation = k_query.unproject(&center_q) * tz;
    Ok(Pose6D::new(rotation, translation))
}

/// Similarity mapping two template points onto two query points.
pub fn kabsch2d(
    p_t1: &Vector2<f64>,
    p_t2: &Vector2<f64>,
    p_q1: &Vector2<f64>,
    p_q2: &Vector2<f64>,
) -> Result<Affine2> {
    let dt = p_t2 - p_t1;
    let dq = p_q2 - p_q1;
    let (nt, nq) = (dt.norm(), dq.norm());
    if !(nt > 1e-12) || !(nq > 1e-12) {
        return Err(Error::DegenerateCorrespondence(
            "coincident points in a correspondence pair".into(),
        ));
    }
    let scale = nq / nt;
    let cos = dt.dot(&dq) / (nt * nq);
    let sin = (dt.x * dq.y - dt.y * dq.x) / (nt * nq);
    let alpha = sin.atan2(cos);
    let rot = Matrix2::new(alpha.cos(), -alpha.sin(), alpha.sin(), alpha.cos());
    let t = ((p_q1 - rot * p_t1 * scale) + (p_q2 - rot * p_t2 * scale)) / 2.0;
    Affine2::new(scale, alpha, t)
}
