//! Analytic gradients of the compositing outputs with respect to every
//! Gaussian parameter.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::{prepare, tile_pixels, Prepared, RenderSettings};
use crate::camera::{projection_jacobian, Camera, COV2D_FLOOR};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{build_covariance, build_covariance_backward, GaussianCloud};
use crate::sh::eval_sh_color_backward;

/// dL/d{color, depth, track} per pixel.
#[derive(Debug, Clone)]
pub struct RasterGrads {
    pub color: Image,
    pub depth: Image,
    pub track: Image,
}

impl RasterGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image::new(width, height, 3),
            depth: Image::new(width, height, 1),
            track: Image::new(width, height, 1),
        }
    }

    fn check(&self, camera: &Camera) -> Result<()> {
        let ok =
            |img: &Image, c: usize| img.width() == camera.width && img.height() == camera.height && img.channels() == c;
        if ok(&self.color, 3) && ok(&self.depth, 1) && ok(&self.track, 1) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                "output gradients do not match the camera image size".into(),
            ))
        }
    }
}

/// Parameter gradients, one entry per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<[f64; 3]>,
    /// `dL/d mean2d` in pixel units.
    pub mean2d_grad: Vec<[f64; 2]>,
    /// Whether the Gaussian was binned into any tile.
    pub visible: Vec<bool>,
    pub order_hash: u64,
}

impl CloudGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh_coeffs: vec![[0.0; 3]; cloud.sh_coeffs.len()],
            mean2d_grad: vec![[0.0; 2]; n],
            visible: vec![false; n],
            order_hash: 0,
        }
    }

    /// `self += other`, elementwise on parameter gradients.
    pub fn accumulate(&mut self, other: &CloudGrads) {
        fn add<const D: usize>(a: &mut [[f64; D]], b: &[[f64; D]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..D {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.positions, &other.positions);
        add(&mut self.rotations, &other.rotations);
        add(&mut self.log_scales, &other.log_scales);
        add(&mut self.sh_coeffs, &other.sh_coeffs);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += y;
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.positions.iter().flatten().all(|v| *v == 0.0)
            && self.rotations.iter().flatten().all(|v| *v == 0.0)
            && self.log_scales.iter().flatten().all(|v| *v == 0.0)
            && self.opacity_logits.iter().all(|v| *v == 0.0)
            && self.sh_coeffs.iter().flatten().all(|v| *v == 0.0)
    }
}

/// Screen-space gradient of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

struct Contribution {
    local: usize,
    alpha: f64,
    clamped: bool,
    t_before: f64,
}

/// Rasterization gradients for arbitrary per-pixel output gradients.
pub fn rasterize_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    output_grads: &RasterGrads,
) -> Result<CloudGrads> {
    let prepared = prepare(cloud, camera, settings)?;
    backward(cloud, camera, settings, &prepared, output_grads)
}

pub(crate) fn backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    prepared: &Prepared,
    grads: &RasterGrads,
) -> Result<CloudGrads> {
    grads.check(camera)?;
    let (w, h) = (camera.width, camera.height);
    let ts = settings.tile_size;
    let splats = &prepared.splats;

    let per_tile: Vec<Vec<SplatGrad>> = (0..prepared.tile_lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &prepared.tile_lists[t];
            let mut acc = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (x0, y0, x1, y1) = tile_pixels(t, prepared.tiles_x, ts, w, h);
            let mut contrib: Vec<Contribution> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let gc = [
                        grads.color.get(x, y, 0),
                        grads.color.get(x, y, 1),
                        grads.color.get(x, y, 2),
                    ];
                    let mut gd = grads.depth.get(x, y, 0);
                    let mut gs = grads.track.get(x, y, 0);
                    if gc == [0.0; 3] && gd == 0.0 && gs == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);

                    contrib.clear();
                    let mut t_run = 1.0;
                    let mut depth_sum = 0.0;
                    let mut track_sum = 0.0;
                    for (local, &k) in list.iter().enumerate() {
                        let s = &splats[k as usize];
                        let (alpha, _, clamped) = s.alpha_at(px, py);
                        if alpha < settings.alpha_min {
                            continue;
                        }
                        contrib.push(Contribution {
                            local,
                            alpha,
                            clamped,
                            t_before: t_run,
                        });
                        depth_sum += s.depth * alpha * t_run;
                        track_sum += alpha * t_run;
                        t_run *= 1.0 - alpha;
                        if t_run < settings.transmittance_stop {
                            break;
                        }
                    }
                    if settings.normalize_depth {
                        if track_sum > 0.0 {
                            gs -= gd * depth_sum / (track_sum * track_sum);
                            gd /= track_sum;
                        } else {
                            gd = 0.0;
                        }
                    }

                    // Suffix sums of f_j * w_j behind the current splat, plus background.
                    let mut suf_c = [0, 1, 2].map(|c| settings.background[c] * t_run);
                    let mut suf_d = 0.0;
                    let mut suf_s = 0.0;
                    for cb in contrib.iter().rev() {
                        let s = &splats[list[cb.local] as usize];
                        let weight = cb.alpha * cb.t_before;
                        let inv = 1.0 / (1.0 - cb.alpha);
                        let mut g_alpha = 0.0;
                        for c in 0..3 {
                            g_alpha += gc[c] * (s.color[c] * cb.t_before - suf_c[c] * inv);
                        }
                        g_alpha += gd * (s.depth * cb.t_before - suf_d * inv);
                        g_alpha += gs * (cb.t_before - suf_s * inv);

                        let g = &mut acc[cb.local];
                        for c in 0..3 {
                            g.color[c] += gc[c] * weight;
                            suf_c[c] += s.color[c] * weight;
                        }
                        g.depth += gd * weight;
                        suf_d += s.depth * weight;
                        suf_s += weight;

                        if cb.clamped {
                            continue;
                        }
                        // alpha = opacity * exp(power)
                        let g_power = g_alpha * cb.alpha;
                        g.opacity += g_alpha * cb.alpha / s.opacity;
                        let dx = px - s.mean[0];
                        let dy = py - s.mean[1];
                        let [a, b, c] = s.conic;
                        g.mean[0] += g_power * (a * dx + b * dy);
                        g.mean[1] += g_power * (b * dx + c * dy);
                        g.conic[0] += g_power * (-0.5 * dx * dx);
                        g.conic[1] += g_power * (-dx * dy);
                        g.conic[2] += g_power * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();

    // Ordered reduction keeps results independent of thread scheduling.
    let mut screen = vec![SplatGrad::default(); splats.len()];
    let mut listed = vec![false; splats.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (local, g) in acc.iter().enumerate() {
            let k = prepared.tile_lists[t][local] as usize;
            screen[k].add(g);
            listed[k] = true;
        }
    }

    let center = camera.center();
    let degree = cloud.active_sh_degree();
    let kcoef = cloud.coeffs_per_gaussian();
    let per_gaussian: Vec<(usize, GaussianGrad)> = splats
        .par_iter()
        .enumerate()
        .filter(|(k, _)| listed[*k])
        .map(|(k, s)| {
            (
                s.id,
                gaussian_backward(cloud, camera, &center, degree, s.id, &screen[k]),
            )
        })
        .collect();

    let mut out = CloudGrads::zeros(cloud);
    out.order_hash = prepared.order_hash;
    for (i, g) in per_gaussian {
        out.positions[i] = g.position;
        out.rotations[i] = g.rotation;
        out.log_scales[i] = g.log_scale;
        out.opacity_logits[i] = g.opacity_logit;
        out.sh_coeffs[i * kcoef..(i + 1) * kcoef].copy_from_slice(&g.sh);
        out.mean2d_grad[i] = g.mean2d;
        out.visible[i] = true;
    }
    Ok(out)
}

struct GaussianGrad {
    position: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh: Vec<[f64; 3]>,
    mean2d: [f64; 2],
}

fn gaussian_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    center: &Vector3<f64>,
    degree: usize,
    i: usize,
    sg: &SplatGrad,
) -> GaussianGrad {
    let mu = Vector3::from(cloud.positions[i]);
    let opacity = cloud.opacity(i);
    let mut g_mu = Vector3::zeros();

    // color and depth through the viewing direction
    let d = mu - center;
    let r = d.norm();
    let dir = d / r;
    let mut sh = vec![[0.0; 3]; cloud.coeffs_per_gaussian()];
    let g_dir = eval_sh_color_backward(cloud.sh(i), [dir.x, dir.y, dir.z], degree, sg.color, &mut sh);
    let g_dir = Vector3::from(g_dir);
    g_mu += (g_dir - dir * dir.dot(&g_dir)) / r;
    g_mu += dir * sg.depth;

    // mean2d through the pinhole map
    let t = camera.world_to_camera(&mu);
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let mut g_t = Vector3::new(
        sg.mean[0] * fx * iz,
        sg.mean[1] * fy * iz,
        -(sg.mean[0] * fx * t.x + sg.mean[1] * fy * t.y) * iz * iz,
    );

    // conic -> 2D covariance -> (J, Sigma)
    let cov = build_covariance(&cloud.log_scales[i], &cloud.rotations[i]).expect("validated in prepare");
    let j = projection_jacobian(camera, &t);
    let tm: Matrix2x3<f64> = j * camera.rotation;
    let mut cov2d = tm * cov * tm.transpose();
    cov2d[(0, 0)] += COV2D_FLOOR;
    cov2d[(1, 1)] += COV2D_FLOOR;
    let q = cov2d.try_inverse().unwrap_or_else(Matrix2::zeros);
    let gq = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2d = -(q * gq * q);
    let g_cov: Matrix3<f64> = tm.transpose() * g_cov2d * tm;
    let g_tm: Matrix2x3<f64> = 2.0 * g_cov2d * tm * cov;
    let g_j: Matrix2x3<f64> = g_tm * camera.rotation.transpose();
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    g_mu += camera.rotation.transpose() * g_t;

    let (log_scale, rotation) = build_covariance_backward(&cloud.log_scales[i], &cloud.rotations[i], &g_cov);

    GaussianGrad {
        position: [g_mu.x, g_mu.y, g_mu.z],
        rotation,
        log_scale,
        opacity_logit: sg.opacity * opacity * (1.0 - opacity),
        sh,
        mean2d: sg.mean,
    }
}
