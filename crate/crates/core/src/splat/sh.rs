//! Real spherical harmonics up to degree 3, in the sign and ordering
//! convention used by common Gaussian-splatting code.

use nalgebra::Vector3;

use crate::scalar::Real;

pub const C0: f64 = 0.282_094_791_773_878_14;
pub const C1: f64 = 0.488_602_511_902_919_9;
pub const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the SH sum so that zero coefficients give mid-gray.
pub const COLOR_OFFSET: f64 = 0.5;

/// Basis values at unit direction `d` for `k` coefficients (1, 4, 9 or 16).
pub fn basis<T: Real>(d: &Vector3<T>, k: usize, out: &mut [T; 16]) {
    let l = T::lit;
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = l(C0);
    if k > 1 {
        out[1] = -l(C1) * y;
        out[2] = l(C1) * z;
        out[3] = -l(C1) * x;
    }
    if k > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = l(C2[0]) * x * y;
        out[5] = l(C2[1]) * y * z;
        out[6] = l(C2[2]) * (l(2.0) * zz - xx - yy);
        out[7] = l(C2[3]) * x * z;
        out[8] = l(C2[4]) * (xx - yy);
        if k > 9 {
            out[9] = l(C3[0]) * y * (l(3.0) * xx - yy);
            out[10] = l(C3[1]) * x * y * z;
            out[11] = l(C3[2]) * y * (l(4.0) * zz - xx - yy);
            out[12] = l(C3[3]) * z * (l(2.0) * zz - l(3.0) * xx - l(3.0) * yy);
            out[13] = l(C3[4]) * x * (l(4.0) * zz - xx - yy);
            out[14] = l(C3[5]) * z * (xx - yy);
            out[15] = l(C3[6]) * x * (xx - l(3.0) * yy);
        }
    }
}

/// Gradient of each basis function with respect to the (unnormalized
/// treatment of the) direction components.
pub fn basis_gradient<T: Real>(d: &Vector3<T>, k: usize, out: &mut [Vector3<T>; 16]) {
    let l = T::lit;
    let (x, y, z) = (d.x, d.y, d.z);
    let o = T::zero();
    out[0] = Vector3::zeros();
    if k > 1 {
        out[1] = Vector3::new(o, -l(C1), o);
        out[2] = Vector3::new(o, o, l(C1));
        out[3] = Vector3::new(-l(C1), o, o);
    }
    if k > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = Vector3::new(y, x, o) * l(C2[0]);
        out[5] = Vector3::new(o, z, y) * l(C2[1]);
        out[6] = Vector3::new(-l(2.0) * x, -l(2.0) * y, l(4.0) * z) * l(C2[2]);
        out[7] = Vector3::new(z, o, x) * l(C2[3]);
        out[8] = Vector3::new(l(2.0) * x, -l(2.0) * y, o) * l(C2[4]);
        if k > 9 {
            out[9] = Vector3::new(l(6.0) * x * y, l(3.0) * (xx - yy), o) * l(C3[0]);
            out[10] = Vector3::new(y * z, x * z, x * y) * l(C3[1]);
            out[11] = Vector3::new(
                -l(2.0) * x * y,
                l(4.0) * zz - xx - l(3.0) * yy,
                l(8.0) * y * z,
            ) * l(C3[2]);
            out[12] = Vector3::new(
                -l(6.0) * x * z,
                -l(6.0) * y * z,
                l(6.0) * zz - l(3.0) * xx - l(3.0) * yy,
            ) * l(C3[3]);
            out[13] = Vector3::new(
                l(4.0) * zz - l(3.0) * xx - yy,
                -l(2.0) * x * y,
                l(8.0) * x * z,
            ) * l(C3[4]);
            out[14] = Vector3::new(l(2.0) * x * z, -l(2.0) * y * z, xx - yy) * l(C3[5]);
            out[15] = Vector3::new(l(3.0) * (xx - yy), -l(6.0) * x * y, o) * l(C3[6]);
        }
    }
}

/// Zeroth-order coefficient that reproduces `rgb` under the color offset.
pub fn rgb_to_sh0<T: Real>(rgb: &Vector3<T>) -> Vector3<T> {
    rgb.map(|c| (c - T::lit(COLOR_OFFSET)) / T::lit(C0))
}

pub fn sh0_to_rgb<T: Real>(sh0: &Vector3<T>) -> Vector3<T> {
    sh0.map(|c| c * T::lit(C0) + T::lit(COLOR_OFFSET))
}
