//! Real spherical-harmonic basis up to degree 4 and view-dependent color.
//!
//! Basis ordering and signs follow the usual Gaussian-splatting layout
//! (index `l*l + l + m`), so coefficients exported to PLY interoperate with
//! other splatting tools.

use std::ops::{Add, Mul, Sub};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];
const SH_C4: [f64; 9] = [
    2.503_342_941_796_704_6,
    -1.770_130_769_779_930_4,
    0.946_174_695_757_560_1,
    -0.669_046_543_557_289_2,
    0.105_785_546_915_204_31,
    -0.669_046_543_557_289_2,
    0.473_087_347_878_780_04,
    -1.770_130_769_779_930_4,
    0.625_835_735_449_176_1,
];

pub const MAX_SH_DEGREE: usize = 4;
pub const MAX_SH_COEFFS: usize = (MAX_SH_DEGREE + 1) * (MAX_SH_DEGREE + 1);

pub const fn coeffs_for_degree(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Inverse of [`coeffs_for_degree`]; `None` when `count` is not a perfect square.
pub fn degree_for_coeffs(count: usize) -> Option<usize> {
    (0..=MAX_SH_DEGREE).find(|&d| coeffs_for_degree(d) == count)
}

/// Scalar arithmetic needed to evaluate the basis polynomials.
pub(crate) trait ShScalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
}

impl ShScalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
}

/// Forward-mode dual number carrying a gradient with respect to a direction.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    pub fn variable(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}

impl Mul<f64> for Dual3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self {
            v: self.v * s,
            d: [self.d[0] * s, self.d[1] * s, self.d[2] * s],
        }
    }
}

impl ShScalar for Dual3 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }
}

/// Writes the first `(degree+1)^2` basis values for direction `(x, y, z)` into `out`.
pub(crate) fn basis_generic<T: ShScalar>(degree: usize, x: T, y: T, z: T, out: &mut [T]) {
    out[0] = T::constant(SH_C0);
    if degree == 0 {
        return;
    }
    out[1] = y * -SH_C1;
    out[2] = z * SH_C1;
    out[3] = x * -SH_C1;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let one = T::constant(1.0);
    out[4] = xy * SH_C2[0];
    out[5] = yz * SH_C2[1];
    out[6] = (zz * 2.0 - xx - yy) * SH_C2[2];
    out[7] = xz * SH_C2[3];
    out[8] = (xx - yy) * SH_C2[4];
    if degree == 2 {
        return;
    }
    out[9] = y * (xx * 3.0 - yy) * SH_C3[0];
    out[10] = xy * z * SH_C3[1];
    out[11] = y * (zz * 4.0 - xx - yy) * SH_C3[2];
    out[12] = z * (zz * 2.0 - xx * 3.0 - yy * 3.0) * SH_C3[3];
    out[13] = x * (zz * 4.0 - xx - yy) * SH_C3[4];
    out[14] = z * (xx - yy) * SH_C3[5];
    out[15] = x * (xx - yy * 3.0) * SH_C3[6];
    if degree == 3 {
        return;
    }
    out[16] = xy * (xx - yy) * SH_C4[0];
    out[17] = yz * (xx * 3.0 - yy) * SH_C4[1];
    out[18] = xy * (zz * 7.0 - one) * SH_C4[2];
    out[19] = yz * (zz * 7.0 - one * 3.0) * SH_C4[3];
    out[20] = (zz * (zz * 35.0 - one * 30.0) + one * 3.0) * SH_C4[4];
    out[21] = xz * (zz * 7.0 - one * 3.0) * SH_C4[5];
    out[22] = (xx - yy) * (zz * 7.0 - one) * SH_C4[6];
    out[23] = xz * (xx - yy * 3.0) * SH_C4[7];
    out[24] = (xx * (xx - yy * 3.0) - yy * (xx * 3.0 - yy)) * SH_C4[8];
}

/// Basis values for a unit direction at the given degree.
#[derive(Debug, Clone, PartialEq)]
pub struct ShBasis {
    pub degree: usize,
    pub values: Vec<f64>,
}

impl ShBasis {
    pub fn evaluate(degree: usize, dir: [f64; 3]) -> Self {
        assert!(degree <= MAX_SH_DEGREE, "sh degree {degree} > {MAX_SH_DEGREE}");
        let mut values = vec![0.0; coeffs_for_degree(degree)];
        basis_generic(degree, dir[0], dir[1], dir[2], &mut values);
        Self { degree, values }
    }
}

/// View-dependent color: `0.5 + sum_k basis_k(dir) * coeff_k`, clamped below at 0.
///
/// Only the first `(degree+1)^2` entries of `coeffs` are read.
pub fn eval_sh_color(coeffs: &[[f64; 3]], dir: [f64; 3], degree: usize) -> [f64; 3] {
    let (rgb, _) = eval_sh_color_raw(coeffs, dir, degree);
    rgb
}

/// Returns the clamped color and the pre-clamp value.
pub(crate) fn eval_sh_color_raw(coeffs: &[[f64; 3]], dir: [f64; 3], degree: usize) -> ([f64; 3], [f64; 3]) {
    let n = coeffs_for_degree(degree);
    debug_assert!(coeffs.len() >= n);
    let mut basis = [0.0; MAX_SH_COEFFS];
    basis_generic(degree, dir[0], dir[1], dir[2], &mut basis);
    let mut raw = [0.5; 3];
    for (b, c) in basis[..n].iter().zip(coeffs) {
        for ch in 0..3 {
            raw[ch] += b * c[ch];
        }
    }
    (raw.map(|v| v.max(0.0)), raw)
}

/// Gradient of the color with respect to the direction and SH coefficients.
///
/// `grad_rgb` is dL/d(clamped rgb). Returns dL/d(direction) and accumulates
/// dL/d(coeffs) into `grad_coeffs`.
pub(crate) fn eval_sh_color_backward(
    coeffs: &[[f64; 3]],
    dir: [f64; 3],
    degree: usize,
    grad_rgb: [f64; 3],
    grad_coeffs: &mut [[f64; 3]],
) -> [f64; 3] {
    let n = coeffs_for_degree(degree);
    let mut basis = [Dual3::constant(0.0); MAX_SH_COEFFS];
    basis_generic(
        degree,
        Dual3::variable(dir[0], 0),
        Dual3::variable(dir[1], 1),
        Dual3::variable(dir[2], 2),
        &mut basis,
    );
    let mut raw = [0.5; 3];
    for (b, c) in basis[..n].iter().zip(coeffs) {
        for ch in 0..3 {
            raw[ch] += b.v * c[ch];
        }
    }
    let g = [0, 1, 2].map(|ch| if raw[ch] > 0.0 { grad_rgb[ch] } else { 0.0 });
    let mut grad_dir = [0.0; 3];
    for (k, b) in basis[..n].iter().enumerate() {
        let mut s = 0.0;
        for ch in 0..3 {
            grad_coeffs[k][ch] += b.v * g[ch];
            s += coeffs[k][ch] * g[ch];
        }
        for a in 0..3 {
            grad_dir[a] += s * b.d[a];
        }
    }
    grad_dir
}
