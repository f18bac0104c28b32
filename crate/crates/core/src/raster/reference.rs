//! Brute-force per-pixel renderer used as a test oracle.
//!
//! No tiling or culling: every projected Gaussian is evaluated at every pixel
//! in one global front-to-back order, with its 2D footprint evaluated through
//! a general matrix inverse. `alpha_min` and `transmittance_stop` keep their
//! per-pixel meaning, so with both set to 0 this is the plain compositing sum.

use nalgebra::{Vector2, Vector3};

use super::{RasterOutput, RenderSettings, ALPHA_CLAMP};
use crate::camera::{project_gaussian, Camera};
use crate::error::Result;
use crate::scene::{build_covariance, GaussianCloud};

struct Entry {
    id: usize,
    cam_z: f64,
    mean: Vector2<f64>,
    inv_cov: nalgebra::Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

pub fn rasterize_reference(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<RasterOutput> {
    settings.validate()?;
    cloud.validate()?;
    let eye = camera.center();
    let mut entries = Vec::new();
    for i in 0..cloud.len() {
        let cov = build_covariance(&cloud.log_scales[i], &cloud.rotations[i])?;
        let mu = Vector3::from(cloud.positions[i]);
        let Some(p) = project_gaussian(&mu, &cov, camera, settings.near) else {
            continue;
        };
        let Some(inv_cov) = p.cov2d.try_inverse() else {
            continue;
        };
        entries.push(Entry {
            id: i,
            cam_z: p.cam_z,
            mean: p.mean2d,
            inv_cov,
            opacity: cloud.opacity(i),
            color: cloud.color_from(i, [eye.x, eye.y, eye.z]),
            depth: p.euclid_depth,
        });
    }
    entries.sort_by(|a, b| a.cam_z.total_cmp(&b.cam_z).then(a.id.cmp(&b.id)));

    let mut out = RasterOutput::blank(camera.width, camera.height, settings.background);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut color = [0.0; 3];
            let mut depth = 0.0;
            let mut track = 0.0;
            let mut transmittance = 1.0;
            for e in &entries {
                let d = p - e.mean;
                let m = (d.transpose() * e.inv_cov * d)[(0, 0)];
                let alpha = (e.opacity * (-0.5 * m).exp()).min(ALPHA_CLAMP);
                if alpha < settings.alpha_min {
                    continue;
                }
                let weight = alpha * transmittance;
                for c in 0..3 {
                    color[c] += e.color[c] * weight;
                }
                depth += e.depth * weight;
                track += weight;
                transmittance *= 1.0 - alpha;
                if transmittance < settings.transmittance_stop {
                    break;
                }
            }
            for c in 0..3 {
                out.color
                    .set(x, y, c, color[c] + settings.background[c] * transmittance);
            }
            let depth = match (settings.normalize_depth, track > 0.0) {
                (false, _) => depth,
                (true, true) => depth / track,
                (true, false) => 0.0,
            };
            out.depth.set(x, y, 0, depth);
            out.track.set(x, y, 0, track);
            out.transmittance.set(x, y, 0, transmittance);
        }
    }
    Ok(out)
}
