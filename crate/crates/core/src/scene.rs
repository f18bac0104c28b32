//! The optimizable Gaussian radiance field and the pure math on it.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sh::{self, coeffs_for_degree, MAX_SH_DEGREE};

/// Quaternion stored as `[w, x, y, z]`; not required to be unit length.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Column-oriented set of anisotropic 3D Gaussians.
///
/// Every per-Gaussian array has the same length; SH coefficients are stored
/// as `len * coeffs_per_gaussian` RGB triples, Gaussian-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<[f64; 3]>,
    max_sh_degree: usize,
    active_sh_degree: usize,
}

/// Parameters of a single Gaussian, used when seeding or densifying.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub position: [f64; 3],
    pub rotation: Quat,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn new(max_sh_degree: usize) -> Self {
        assert!(max_sh_degree <= MAX_SH_DEGREE);
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            max_sh_degree,
            active_sh_degree: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn max_sh_degree(&self) -> usize {
        self.max_sh_degree
    }

    pub fn active_sh_degree(&self) -> usize {
        self.active_sh_degree
    }

    pub fn set_active_sh_degree(&mut self, degree: usize) {
        self.active_sh_degree = degree.min(self.max_sh_degree);
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        coeffs_for_degree(self.max_sh_degree)
    }

    pub fn sh(&self, i: usize) -> &[[f64; 3]] {
        let k = self.coeffs_per_gaussian();
        &self.sh_coeffs[i * k..(i + 1) * k]
    }

    pub fn sh_mut(&mut self, i: usize) -> &mut [[f64; 3]] {
        let k = self.coeffs_per_gaussian();
        &mut self.sh_coeffs[i * k..(i + 1) * k]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    /// Appends one Gaussian. Missing SH entries are zero-filled, extras dropped.
    pub fn push(&mut self, g: &GaussianParams) {
        let k = self.coeffs_per_gaussian();
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        for j in 0..k {
            self.sh_coeffs.push(g.sh.get(j).copied().unwrap_or([0.0; 3]));
        }
    }

    pub fn get(&self, i: usize) -> GaussianParams {
        GaussianParams {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh(i).to_vec(),
        }
    }

    /// Keeps the Gaussians for which `keep[i]` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let k = self.coeffs_per_gaussian();
        retain_by(&mut self.positions, keep);
        retain_by(&mut self.rotations, keep);
        retain_by(&mut self.log_scales, keep);
        retain_by(&mut self.opacity_logits, keep);
        let mut out = Vec::with_capacity(self.sh_coeffs.len());
        for (i, &kp) in keep.iter().enumerate() {
            if kp {
                out.extend_from_slice(&self.sh_coeffs[i * k..(i + 1) * k]);
            }
        }
        self.sh_coeffs = out;
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh_coeffs.len() != n * self.coeffs_per_gaussian()
        {
            return Err(Error::ShapeMismatch(
                "gaussian attribute arrays differ in length".into(),
            ));
        }
        if self.active_sh_degree > self.max_sh_degree {
            return Err(Error::InvalidArgument(format!(
                "active sh degree {} exceeds max {}",
                self.active_sh_degree, self.max_sh_degree
            )));
        }
        Ok(())
    }

    /// Per-Gaussian view-dependent color as seen from `eye`.
    pub fn color_from(&self, i: usize, eye: [f64; 3]) -> [f64; 3] {
        let p = self.positions[i];
        let d = Vector3::new(p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]);
        let n = d.norm();
        let dir = if n > 0.0 {
            [d.x / n, d.y / n, d.z / n]
        } else {
            [0.0, 0.0, 1.0]
        };
        sh::eval_sh_color(self.sh(i), dir, self.active_sh_degree)
    }
}

fn retain_by<T>(v: &mut Vec<T>, keep: &[bool]) {
    let mut i = 0;
    v.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

/// Normalizes a quaternion, rejecting zero norm.
pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok(q.map(|v| v / n))
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
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

/// `Sigma = R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn build_covariance(log_scale: &[f64; 3], rotation: &Quat) -> Result<Matrix3<f64>> {
    let q = normalize_quat(rotation)?;
    let r = quat_to_matrix(&q);
    let s = Matrix3::from_diagonal(&Vector3::new(
        log_scale[0].exp(),
        log_scale[1].exp(),
        log_scale[2].exp(),
    ));
    let m = r * s;
    Ok(m * m.transpose())
}

/// Backpropagates dL/dSigma (full-matrix convention) to the log-scale and the
/// unnormalized quaternion.
pub(crate) fn build_covariance_backward(
    log_scale: &[f64; 3],
    rotation: &Quat,
    grad_cov: &Matrix3<f64>,
) -> ([f64; 3], Quat) {
    let norm = (rotation.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let q = rotation.map(|v| v / norm);
    let r = quat_to_matrix(&q);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    // Sigma = M M^T
    let gm = (grad_cov + grad_cov.transpose()) * m;
    let mut g_log_scale = [0.0; 3];
    let mut gr = Matrix3::zeros();
    for k in 0..3 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += gm[(i, k)] * r[(i, k)];
            gr[(i, k)] = gm[(i, k)] * s[k];
        }
        g_log_scale[k] = acc * s[k];
    }
    let [w, x, y, z] = q;
    // dR/dq for R as in quat_to_matrix
    let gw =
        2.0 * (-z * gr[(0, 1)] + y * gr[(0, 2)] + z * gr[(1, 0)] - x * gr[(1, 2)] - y * gr[(2, 0)] + x * gr[(2, 1)]);
    let gx = 2.0
        * (y * gr[(0, 1)] + z * gr[(0, 2)] + y * gr[(1, 0)] - 2.0 * x * gr[(1, 1)] - w * gr[(1, 2)]
            + z * gr[(2, 0)]
            + w * gr[(2, 1)]
            - 2.0 * x * gr[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * gr[(0, 0)] + x * gr[(0, 1)] + w * gr[(0, 2)] + x * gr[(1, 0)] + z * gr[(1, 2)] - w * gr[(2, 0)]
            + z * gr[(2, 1)]
            - 2.0 * y * gr[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * gr[(0, 0)] - w * gr[(0, 1)] + x * gr[(0, 2)] + w * gr[(1, 0)] - 2.0 * z * gr[(1, 1)]
            + y * gr[(1, 2)]
            + x * gr[(2, 0)]
            + y * gr[(2, 1)]);
    let gq = [gw, gx, gy, gz];
    // through q = raw / |raw|
    let dot: f64 = gq.iter().zip(&q).map(|(a, b)| a * b).sum();
    let g_raw = [0, 1, 2, 3].map(|i| (gq[i] - dot * q[i]) / norm);
    (g_log_scale, g_raw)
}
