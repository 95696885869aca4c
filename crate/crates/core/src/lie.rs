//! Rotation and rigid-motion groups with the geodesic interpolation used by the
//! exposure-trajectory model.
//!
//! Rotations are unit quaternions stored scalar-first. Tangent vectors of SE(3)
//! are ordered `(omega, nu)`: rotation first, translation second. All
//! perturbations are *left* perturbations, `T' = exp(delta) * T`.
//!
//! Every product of two rotations is renormalized, so the quaternion norm stays
//! at 1 to within a few ulps regardless of how many compositions are chained.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;
use std::ops::Mul;
use thiserror::Error;

/// Below this angle exp/log/Jacobian coefficients switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A value produced by a logarithm, tagged when the rotation angle sat on the
/// cut locus (angle of exactly pi) and the axis choice was arbitrary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub degenerate: bool,
}

impl<T> Flagged<T> {
    fn new(value: T, degenerate: bool) -> Self {
        Flagged { value, degenerate }
    }
}

/// How two endpoint poses are blended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    /// Full SE(3) geodesic; rotation and translation are coupled through V.
    #[default]
    Coupled,
    /// SO(3) geodesic for rotation, straight line for translation.
    Decoupled,
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Gradient of `tr(B * skew(d))` with respect to `d`.
pub fn skew_trace_grad(b: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        b[(1, 2)] - b[(2, 1)],
        b[(2, 0)] - b[(0, 2)],
        b[(0, 1)] - b[(1, 0)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl Rotation {
    pub const fn identity() -> Self {
        Rotation {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a rotation from any non-zero quaternion, normalizing it.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, LieError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(LieError::InvalidArgument(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Rotation::normalized(w / n, x / n, y / n, z / n))
    }

    /// Normalizes and picks the `w >= 0` representative.
    fn normalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let r = Rotation {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        };
        let [w, x, y, z] = r.canonical_quaternion();
        Rotation { w, x, y, z }
    }

    /// `[w, x, y, z]` as stored.
    pub fn quaternion(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// `[w, x, y, z]` with the sign chosen so that `w >= 0`.
    pub fn canonical_quaternion(&self) -> [f64; 4] {
        if self.w < 0.0 || (self.w == 0.0 && self.first_nonzero_negative()) {
            [-self.w, -self.x, -self.y, -self.z]
        } else {
            [self.w, self.x, self.y, self.z]
        }
    }

    fn first_nonzero_negative(&self) -> bool {
        [self.x, self.y, self.z]
            .into_iter()
            .find(|c| *c != 0.0)
            .is_some_and(|c| c < 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn inverse(&self) -> Self {
        Rotation {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let q = Vector3::new(self.x, self.y, self.z);
        let t = 2.0 * q.cross(v);
        v + self.w * t + q.cross(&t)
    }

    /// Rodrigues exponential. Non-finite input yields NaN components; use
    /// [`so3_exp`] for a checked version.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (c, s_over_theta) = if theta < SMALL_ANGLE {
            (
                1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0,
                0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0,
            )
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        Rotation::normalized(
            c,
            s_over_theta * omega.x,
            s_over_theta * omega.y,
            s_over_theta * omega.z,
        )
    }

    /// Principal logarithm with angle in `[0, pi]`.
    pub fn log(&self) -> Flagged<Vector3<f64>> {
        let [w, x, y, z] = self.canonical_quaternion();
        let v = Vector3::new(x, y, z);
        let vn2 = v.norm_squared();
        let vn = vn2.sqrt();
        if vn < SMALL_ANGLE {
            // theta / |v| = 2 atan(|v| / w) / |v|
            let r = vn2 / (w * w);
            let k = (2.0 / w) * (1.0 - r / 3.0 + r * r / 5.0);
            return Flagged::new(v * k, false);
        }
        let theta = 2.0 * vn.atan2(w);
        Flagged::new(v * (theta / vn), w.abs() < 1e-12)
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, b: Rotation) -> Rotation {
        let a = self;
        Rotation::normalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Serialize for Rotation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.canonical_quaternion().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        let r = Rotation { w, x, y, z };
        // already-unit input is kept verbatim so save/load is bit-exact
        if (r.norm() - 1.0).abs() < 1e-12 {
            let [w, x, y, z] = r.canonical_quaternion();
            return Ok(Rotation { w, x, y, z });
        }
        Rotation::from_quaternion(w, x, y, z).map_err(serde::de::Error::custom)
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseSE3 {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3::default()
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        PoseSE3::new(Rotation::identity(), t)
    }

    /// Camera at `eye` looking at `target`, image y axis pointing along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let m = Matrix3::from_columns(&[right, down, fwd]);
        PoseSE3::new(rotation_from_matrix(&m), eye)
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        PoseSE3::new(r, -r.rotate(&self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn exp(xi: &TangentSE3) -> Self {
        let r = Rotation::exp(&xi.omega);
        PoseSE3::new(r, so3_left_jacobian(&xi.omega) * xi.nu)
    }

    pub fn log(&self) -> Flagged<TangentSE3> {
        let w = self.rotation.log();
        let nu = so3_left_jacobian_inv(&w.value) * self.translation;
        Flagged::new(TangentSE3::new(w.value, nu), w.degenerate)
    }

    /// `exp(delta) * self`.
    pub fn retract_left(&self, delta: &TangentSE3) -> Self {
        PoseSE3::exp(delta) * *self
    }

    /// 6x6 adjoint in `(omega, nu)` ordering.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let tr = skew(&self.translation) * r;
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        m
    }

    pub fn matrix4(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, b: PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * b.rotation,
            self.rotation.rotate(&b.translation) + self.translation,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseJson {
    q: Rotation,
    t: [f64; 3],
}

impl Serialize for PoseSE3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseJson {
            q: self.rotation,
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseSE3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let p = PoseJson::deserialize(d)?;
        if !p.t.iter().all(|v| v.is_finite()) {
            return Err(serde::de::Error::custom("non-finite translation"));
        }
        Ok(PoseSE3::new(p.q, Vector3::from(p.t)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TangentSE3 {
    pub omega: Vector3<f64>,
    pub nu: Vector3<f64>,
}

impl TangentSE3 {
    pub fn new(omega: Vector3<f64>, nu: Vector3<f64>) -> Self {
        TangentSE3 { omega, nu }
    }

    pub fn zero() -> Self {
        TangentSE3::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        TangentSE3::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.nu.x,
            self.nu.y,
            self.nu.z,
        )
    }

    pub fn scale(&self, k: f64) -> Self {
        TangentSE3::new(self.omega * k, self.nu * k)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for TangentSE3 {
    type Output = TangentSE3;
    fn add(self, b: TangentSE3) -> TangentSE3 {
        TangentSE3::new(self.omega + b.omega, self.nu + b.nu)
    }
}

impl std::ops::AddAssign for TangentSE3 {
    fn add_assign(&mut self, b: TangentSE3) {
        self.omega += b.omega;
        self.nu += b.nu;
    }
}

fn check_finite(v: &Vector3<f64>, what: &str) -> Result<(), LieError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(LieError::InvalidArgument(format!("non-finite {what}: {v:?}")))
    }
}

pub fn so3_exp(omega: &Vector3<f64>) -> Result<Rotation, LieError> {
    check_finite(omega, "rotation vector")?;
    Ok(Rotation::exp(omega))
}

pub fn so3_log(r: &Rotation) -> Flagged<Vector3<f64>> {
    r.log()
}

pub fn se3_exp(xi: &TangentSE3) -> Result<PoseSE3, LieError> {
    check_finite(&xi.omega, "rotation tangent")?;
    check_finite(&xi.nu, "translation tangent")?;
    Ok(PoseSE3::exp(xi))
}

pub fn se3_log(t: &PoseSE3) -> Flagged<TangentSE3> {
    t.log()
}

/// `T_start * exp(u * log(T_start^-1 * T_end))`.
pub fn interpolate_pose(start: &PoseSE3, end: &PoseSE3, u: f64) -> Flagged<PoseSE3> {
    interpolate_pose_with(start, end, u, InterpolationMode::Coupled)
}

pub fn interpolate_pose_with(
    start: &PoseSE3,
    end: &PoseSE3,
    u: f64,
    mode: InterpolationMode,
) -> Flagged<PoseSE3> {
    match mode {
        InterpolationMode::Coupled => {
            let rel = (start.inverse() * *end).log();
            Flagged::new(
                *start * PoseSE3::exp(&rel.value.scale(u)),
                rel.degenerate,
            )
        }
        InterpolationMode::Decoupled => {
            let rel = (start.rotation.inverse() * end.rotation).log();
            let r = start.rotation * Rotation::exp(&(rel.value * u));
            let t = start.translation * (1.0 - u) + end.translation * u;
            Flagged::new(PoseSE3::new(r, t), rel.degenerate)
        }
    }
}

/// Length of the geodesic between two poses (rotation and translation mixed
/// in one 6-vector norm).
pub fn geodesic_distance(a: &PoseSE3, b: &PoseSE3) -> f64 {
    (a.inverse() * *b).log().value.norm()
}

/// Angle below which the Jacobian coefficients use their power series. The
/// closed forms lose digits to cancellation well above `SMALL_ANGLE`.
const SERIES_ANGLE: f64 = 0.5;

/// `sum_k (-1)^k theta^(2k) * coef(k)` over enough terms for `theta < SERIES_ANGLE`.
fn alternating_series(theta2: f64, coef: impl Fn(u32) -> f64) -> f64 {
    let mut acc = 0.0;
    let mut p = 1.0;
    for k in 0..9 {
        let term = p * coef(k);
        acc += if k % 2 == 0 { term } else { -term };
        p *= theta2;
    }
    acc
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// `(1 - cos t) / t^2` and `(t - sin t) / t^3`.
fn rodrigues_coeffs(theta2: f64) -> (f64, f64) {
    let t = theta2.sqrt();
    let a = if t < SMALL_ANGLE {
        0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    } else {
        let s = (0.5 * t).sin();
        2.0 * s * s / theta2
    };
    let b = if t < SERIES_ANGLE {
        alternating_series(theta2, |k| 1.0 / factorial(2 * k + 3))
    } else {
        (t - t.sin()) / (theta2 * t)
    };
    (a, b)
}

/// Left Jacobian of SO(3); also the V matrix of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = rodrigues_coeffs(omega.norm_squared());
    let k = skew(omega);
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let t = theta2.sqrt();
    let c = if t < SERIES_ANGLE {
        // (1 - x cot x) / theta^2 with x = theta / 2
        const COEF: [f64; 7] = [
            1.0 / 12.0,
            1.0 / 720.0,
            1.0 / 30240.0,
            1.0 / 1209600.0,
            1.0 / 47900160.0,
            691.0 / 1307674368000.0,
            1.0 / 74724249600.0,
        ];
        COEF.iter().rev().fold(0.0, |acc, c| acc * theta2 + c)
    } else {
        let x = 0.5 * t;
        (1.0 - x / x.tan()) / theta2
    };
    let k = skew(omega);
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q_block(omega: &Vector3<f64>, nu: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let t = theta2.sqrt();
    let (c1, c2, c3) = if t < SERIES_ANGLE {
        (
            alternating_series(theta2, |k| 1.0 / factorial(2 * k + 3)),
            alternating_series(theta2, |k| 1.0 / factorial(2 * k + 4)),
            alternating_series(theta2, |k| f64::from(k + 1) / factorial(2 * k + 5)),
        )
    } else {
        let (s, c) = t.sin_cos();
        (
            (t - s) / (theta2 * t),
            (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
            (2.0 * t - 3.0 * s + t * c) / (2.0 * theta2 * theta2 * t),
        )
    };
    let w = skew(omega);
    let v = skew(nu);
    let wv = w * v;
    let vw = v * w;
    let wvw = wv * w;
    v * 0.5 + (wv + vw + wvw) * c1 + (w * wv + vw * w - wvw * 3.0) * c2 + (wvw * w + w * wvw) * c3
}

/// Left Jacobian of SE(3): `exp(xi + d) ~= exp(J(xi) d) * exp(xi)`.
pub fn se3_left_jacobian(xi: &TangentSE3) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.omega);
    let q = se3_q_block(&xi.omega, &xi.nu);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

pub fn se3_left_jacobian_inv(xi: &TangentSE3) -> Matrix6<f64> {
    let ji = so3_left_jacobian_inv(&xi.omega);
    let q = se3_q_block(&xi.omega, &xi.nu);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ji * q * ji));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    m
}

/// Jacobians of the interpolated pose with respect to left perturbations of
/// the two endpoints, expressed as left perturbations of the result:
/// `T(u; exp(a) Ts, exp(b) Te) ~= exp(Js a + Je b) T(u)`.
pub fn interpolation_jacobians(
    start: &PoseSE3,
    end: &PoseSE3,
    u: f64,
    mode: InterpolationMode,
) -> (Matrix6<f64>, Matrix6<f64>) {
    match mode {
        InterpolationMode::Coupled => {
            let rel = (start.inverse() * *end).log().value;
            let inner = se3_left_jacobian(&rel.scale(u)) * se3_left_jacobian_inv(&rel) * u;
            let je = start.adjoint() * inner * start.inverse().adjoint();
            (Matrix6::identity() - je, je)
        }
        InterpolationMode::Decoupled => {
            let rs = start.rotation.matrix();
            let phi = (start.rotation.inverse() * end.rotation).log().value;
            let jr_e = rs * so3_left_jacobian(&(phi * u)) * so3_left_jacobian_inv(&phi) * u * rs.transpose();
            let jr_s = Matrix3::identity() - jr_e;
            let t_u = start.translation * (1.0 - u) + end.translation * u;
            let mut js = Matrix6::zeros();
            let mut je = Matrix6::zeros();
            js.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_s);
            je.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_e);
            js.fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&(-skew(&start.translation) * (1.0 - u) + skew(&t_u) * jr_s));
            je.fixed_view_mut::<3, 3>(3, 0)
                .copy_from(&(-skew(&end.translation) * u + skew(&t_u) * jr_e));
            js.fixed_view_mut::<3, 3>(3, 3)
                .copy_from(&(Matrix3::identity() * (1.0 - u)));
            je.fixed_view_mut::<3, 3>(3, 3)
                .copy_from(&(Matrix3::identity() * u));
            (js, je)
        }
    }
}

/// Closest rotation to a matrix assumed orthonormal (Shepperd's method).
pub fn rotation_from_matrix(m: &Matrix3<f64>) -> Rotation {
    let tr = m.trace();
    let (w, x, y, z) = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        (
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        (
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        (
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        (
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    Rotation::normalized(w, x, y, z)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}
