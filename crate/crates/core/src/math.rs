//! Rotation helpers: exponential/log maps with derivatives, geodesic angles
//! and weighted Procrustes.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
#[allow(unused_imports)] // inherent float methods exist only with std
use num_traits::Float;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SERIES_ANGLE: f64 = 1e-2;

pub fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

pub fn arr3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Frobenius inner product.
pub fn frob(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

struct Rodrigues {
    a: f64,
    b: f64,
    da: f64,
    db: f64,
}

// R = I + a K + b K^2 with a = sin t / t, b = (1 - cos t) / t^2;
// da, db are (d/dt a) / t and (d/dt b) / t so that d a / d w_k = da * w_k.
fn rodrigues_coefficients(theta_sq: f64) -> Rodrigues {
    let t = theta_sq.sqrt();
    if t < SERIES_ANGLE {
        let t2 = theta_sq;
        let t4 = t2 * t2;
        Rodrigues {
            a: 1.0 - t2 / 6.0 + t4 / 120.0,
            b: 0.5 - t2 / 24.0 + t4 / 720.0,
            da: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            db: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        }
    } else {
        let (s, c) = t.sin_cos();
        Rodrigues {
            a: s / t,
            b: (1.0 - c) / theta_sq,
            da: (t * c - s) / (theta_sq * t),
            db: (t * s - 2.0 * (1.0 - c)) / (theta_sq * theta_sq),
        }
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let k = skew(w);
    let c = rodrigues_coefficients(w.norm_squared());
    Mat3::identity() + k * c.a + k * k * c.b
}

/// Rotation matrix together with its partial derivatives w.r.t. each
/// axis-angle component.
pub fn exp_so3_with_jacobian(w: &Vec3) -> (Mat3, [Mat3; 3]) {
    let k = skew(w);
    let k2 = k * k;
    let c = rodrigues_coefficients(w.norm_squared());
    let r = Mat3::identity() + k * c.a + k2 * c.b;
    let mut jac = [Mat3::zeros(); 3];
    for (i, d) in jac.iter_mut().enumerate() {
        let e = skew(&Vec3::ith(i, 1.0));
        *d = k * (c.da * w[i]) + e * c.a + k2 * (c.db * w[i]) + (e * k + k * e) * c.b;
    }
    (r, jac)
}

/// Axis-angle vector of a rotation matrix (angle in [0, pi]).
pub fn log_so3(r: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < 1e-150 {
        return v * 2.0;
    }
    v * (2.0 * n.atan2(w) / n)
}

/// Projects an arbitrary 3x3 matrix onto the nearest proper rotation.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut diag = Vec3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        // flip the direction of least singular value
        diag[svd.singular_values.imin()] = -1.0;
    }
    u * Mat3::from_diagonal(&diag) * vt
}

/// Unit quaternion (w, v) of an axis-angle vector with the Jacobians of its
/// scalar and vector parts.
fn quat_with_jacobian(w: &Vec3) -> (f64, Vec3, Vec3, Mat3) {
    let t2 = w.norm_squared();
    let t = t2.sqrt();
    // s = sin(t/2)/t, ds = (d/dt s)/t
    let (s, ds, c) = if t < SERIES_ANGLE {
        (
            0.5 - t2 / 48.0 + t2 * t2 / 3840.0,
            -1.0 / 24.0 + t2 / 960.0,
            1.0 - t2 / 8.0 + t2 * t2 / 384.0,
        )
    } else {
        let (sh, ch) = (0.5 * t).sin_cos();
        (sh / t, (0.5 * t * ch - sh) / (t2 * t), ch)
    };
    let dw = -0.5 * s * w;
    let dv = Mat3::identity() * s + w * w.transpose() * ds;
    (c, w * s, dw, dv)
}

/// Squared geodesic angle between the rotations of two axis-angle vectors and
/// its gradient with respect to the first.
pub fn geodesic_sq_with_grad(phi: &Vec3, prev: &Vec3) -> (f64, Vec3) {
    let (qw, qv, dqw, dqv) = quat_with_jacobian(phi);
    let (pw, pv, _, _) = quat_with_jacobian(prev);
    // r = conj(p) * q
    let rw = pw * qw + pv.dot(&qv);
    let rv = qv * pw - pv * qw - pv.cross(&qv);
    let n = rv.norm();
    let a = rw.abs();
    let f = n.atan2(a);
    let value = 4.0 * f * f;
    let den = n * n + a * a;
    let f_over_n = if n < 1e-12 { 1.0 / a } else { f / n };
    let g_rv = rv * (8.0 * f_over_n * a / den);
    let sign = if rw < 0.0 { -1.0 } else { 1.0 };
    let g_rw = -8.0 * f * n / den * sign;
    // back through the quaternion product
    let g_qw = g_rw * pw - pv.dot(&g_rv);
    let g_qv = pv * g_rw + g_rv * pw + pv.cross(&g_rv);
    let grad = dqw * g_qw + dqv.transpose() * g_qv;
    (value, grad)
}

/// Geodesic angle in radians between two rotations.
pub fn geodesic_angle(phi: &Vec3, prev: &Vec3) -> f64 {
    geodesic_sq_with_grad(phi, prev).0.sqrt()
}

/// Weighted orthogonal Procrustes: the proper rotation `R` minimising
/// `sum w_i |R (src_i - cs) - (dst_i - cd)|^2` where `cs`, `cd` are either the
/// weighted centroids or the supplied pivots. Returns `None` when the total
/// weight is not positive.
pub fn weighted_kabsch(
    src: &[Vec3],
    dst: &[Vec3],
    weights: &[f64],
    pivots: Option<(Vec3, Vec3)>,
) -> Option<Mat3> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let (cs, cd) = match pivots {
        Some(p) => p,
        None => {
            let mut cs = Vec3::zeros();
            let mut cd = Vec3::zeros();
            for ((s, d), w) in src.iter().zip(dst).zip(weights) {
                cs += s * *w;
                cd += d * *w;
            }
            (cs / total, cd / total)
        }
    };
    let mut h = Mat3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (d - cd) * (s - cs).transpose() * *w;
    }
    Some(orthonormalize(&h))
}
