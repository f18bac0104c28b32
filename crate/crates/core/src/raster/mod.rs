//! Tile-based front-to-back rasterization of color, depth and track.
//!
//! Per pixel, splats sorted by camera-space z are composited as
//! `w_i = a_i * prod_{j<i} (1 - a_j)` with `a_i = min(0.99, opacity_i * G_i(p))`
//! evaluated at the pixel center. Color, Euclidean depth and track are the
//! `w`-weighted sums of the per-splat color, distance to the camera center
//! and 1 respectively.

mod backward;
mod reference;

pub use backward::{rasterize_backward, CloudGrads, RasterGrads};
pub use reference::rasterize_reference;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{max_eigenvalue_2x2, project_gaussian, Camera, DEFAULT_NEAR};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::fnv1a;
use crate::scene::{build_covariance, GaussianCloud};
use crate::sh::eval_sh_color;

pub const ALPHA_CLAMP: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    pub background: [f64; 3],
    /// Splats whose effective opacity at a pixel falls below this are skipped.
    pub alpha_min: f64,
    /// Compositing at a pixel stops once transmittance drops below this.
    pub transmittance_stop: f64,
    pub near: f64,
    /// Divide composited depth by track (0 where track is 0).
    pub normalize_depth: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: [0.0; 3],
            alpha_min: 1.0 / 255.0,
            transmittance_stop: 1e-4,
            near: DEFAULT_NEAR,
            normalize_depth: false,
        }
    }
}

impl RenderSettings {
    /// Same settings with skipping and early termination disabled.
    pub fn without_thresholds(&self) -> Self {
        Self {
            alpha_min: 0.0,
            transmittance_stop: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::InvalidArgument("tile_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_min) || !(0.0..1.0).contains(&self.transmittance_stop) {
            return Err(Error::InvalidArgument("render thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    /// 3 channels.
    pub color: Image,
    pub depth: Image,
    pub track: Image,
    pub transmittance: Image,
    /// Hash of the per-tile sorted splat lists used to composite.
    pub order_hash: u64,
}

impl RasterOutput {
    pub(crate) fn blank(w: usize, h: usize, bg: [f64; 3]) -> Self {
        let mut color = Image::new(w, h, 3);
        for px in color.data_mut().chunks_mut(3) {
            px.copy_from_slice(&bg);
        }
        Self {
            color,
            depth: Image::new(w, h, 1),
            track: Image::new(w, h, 1),
            transmittance: Image::filled(w, h, 1, 1.0),
            order_hash: 0,
        }
    }
}

/// Screen-space state of one visible Gaussian.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub id: usize,
    pub mean: [f64; 2],
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    pub cam_z: f64,
    /// Pixel distance beyond which the splat cannot reach `alpha_min`.
    pub extent: f64,
}

impl Splat {
    /// Effective opacity at `(px, py)`: `(alpha, opacity * G, clamped)`.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> (f64, f64, bool) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let power = -0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) - self.conic[1] * dx * dy;
        let raw = self.opacity * power.exp();
        if raw > ALPHA_CLAMP {
            (ALPHA_CLAMP, raw, true)
        } else {
            (raw, raw, false)
        }
    }
}

/// Projected, sorted and binned splats for one camera.
pub(crate) struct Prepared {
    pub splats: Vec<Splat>,
    pub tiles_x: usize,
    /// Indices into `splats`, front to back, per tile.
    pub tile_lists: Vec<Vec<u32>>,
    pub order_hash: u64,
}

pub(crate) fn prepare(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<Prepared> {
    settings.validate()?;
    cloud.validate()?;
    let center = camera.center();
    let degree = cloud.active_sh_degree();
    let projected: Vec<Option<Splat>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| -> Result<Option<Splat>> {
            let cov = build_covariance(&cloud.log_scales[i], &cloud.rotations[i])?;
            let mu = Vector3::from(cloud.positions[i]);
            let Some(p) = project_gaussian(&mu, &cov, camera, settings.near) else {
                return Ok(None);
            };
            let c = p.cov2d;
            let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
            if !(det > 0.0) || !det.is_finite() {
                return Ok(None);
            }
            let conic = [c[(1, 1)] / det, -c[(0, 1)] / det, c[(0, 0)] / det];
            let opacity = cloud.opacity(i);
            let extent = if settings.alpha_min > 0.0 {
                if opacity < settings.alpha_min {
                    return Ok(None);
                }
                let lmax = max_eigenvalue_2x2(&c);
                (2.0 * lmax * (opacity / settings.alpha_min).ln()).sqrt() + 1.0
            } else {
                f64::INFINITY
            };
            let d = mu - center;
            let dir = d / p.euclid_depth;
            let color = eval_sh_color(cloud.sh(i), [dir.x, dir.y, dir.z], degree);
            Ok(Some(Splat {
                id: i,
                mean: [p.mean2d.x, p.mean2d.y],
                conic,
                opacity,
                color,
                depth: p.euclid_depth,
                cam_z: p.cam_z,
                extent,
            }))
        })
        .collect::<Result<_>>()?;
    let mut splats: Vec<Splat> = projected.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.cam_z.total_cmp(&b.cam_z).then(a.id.cmp(&b.id)));

    let ts = settings.tile_size;
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = tile_range(s, ts, tiles_x, tiles_y) else {
            continue;
        };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_lists[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    let mut bytes = Vec::new();
    for (t, list) in tile_lists.iter().enumerate() {
        bytes.extend_from_slice(&(t as u32).to_le_bytes());
        for &k in list {
            bytes.extend_from_slice(&(splats[k as usize].id as u32).to_le_bytes());
        }
    }
    let order_hash = fnv1a(&bytes);
    Ok(Prepared {
        splats,
        tiles_x,
        tile_lists,
        order_hash,
    })
}

/// Inclusive tile range whose pixel centers may lie within the splat extent.
fn tile_range(s: &Splat, ts: usize, tiles_x: usize, tiles_y: usize) -> Option<(usize, usize, usize, usize)> {
    if !s.extent.is_finite() {
        return Some((0, tiles_x - 1, 0, tiles_y - 1));
    }
    let w = (tiles_x * ts) as f64;
    let h = (tiles_y * ts) as f64;
    // pixel x has center x + 0.5
    let lo_x = s.mean[0] - s.extent - 0.5;
    let hi_x = s.mean[0] + s.extent - 0.5;
    let lo_y = s.mean[1] - s.extent - 0.5;
    let hi_y = s.mean[1] + s.extent - 0.5;
    if hi_x < 0.0 || hi_y < 0.0 || lo_x >= w || lo_y >= h {
        return None;
    }
    let to_tile = |v: f64, n: usize| ((v.max(0.0) / ts as f64).floor() as usize).min(n - 1);
    Some((
        to_tile(lo_x, tiles_x),
        to_tile(hi_x, tiles_x),
        to_tile(lo_y, tiles_y),
        to_tile(hi_y, tiles_y),
    ))
}

/// Pixel rectangle `(x0, y0, x1, y1)` (exclusive upper bounds) of a tile.
pub(crate) fn tile_pixels(t: usize, tiles_x: usize, ts: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let tx = t % tiles_x;
    let ty = t / tiles_x;
    (tx * ts, ty * ts, ((tx + 1) * ts).min(w), ((ty + 1) * ts).min(h))
}

/// Accumulated compositing result for one pixel.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PixelSums {
    pub color: [f64; 3],
    pub depth: f64,
    pub track: f64,
    pub transmittance: f64,
}

#[inline]
pub(crate) fn composite_pixel(
    splats: &[Splat],
    list: &[u32],
    px: f64,
    py: f64,
    settings: &RenderSettings,
) -> PixelSums {
    let mut out = PixelSums {
        transmittance: 1.0,
        ..Default::default()
    };
    let mut t = 1.0;
    for &k in list {
        let s = &splats[k as usize];
        let (alpha, _, _) = s.alpha_at(px, py);
        if alpha < settings.alpha_min {
            continue;
        }
        let w = alpha * t;
        for c in 0..3 {
            out.color[c] += s.color[c] * w;
        }
        out.depth += s.depth * w;
        out.track += w;
        t *= 1.0 - alpha;
        if t < settings.transmittance_stop {
            break;
        }
    }
    out.transmittance = t;
    out
}

pub(crate) fn finish_pixel(sums: &PixelSums, settings: &RenderSettings) -> ([f64; 3], f64) {
    let mut color = sums.color;
    for c in 0..3 {
        color[c] += settings.background[c] * sums.transmittance;
    }
    let depth = if settings.normalize_depth {
        if sums.track > 0.0 {
            sums.depth / sums.track
        } else {
            0.0
        }
    } else {
        sums.depth
    };
    (color, depth)
}

impl Prepared {
    pub fn forward(&self, camera: &Camera, settings: &RenderSettings) -> RasterOutput {
        let (w, h) = (camera.width, camera.height);
        let ts = settings.tile_size;
        let tiles: Vec<(usize, Vec<PixelSums>)> = (0..self.tile_lists.len())
            .into_par_iter()
            .map(|t| {
                let (x0, y0, x1, y1) = tile_pixels(t, self.tiles_x, ts, w, h);
                let list = &self.tile_lists[t];
                let mut sums = Vec::with_capacity((x1 - x0) * (y1 - y0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        sums.push(composite_pixel(
                            &self.splats,
                            list,
                            x as f64 + 0.5,
                            y as f64 + 0.5,
                            settings,
                        ));
                    }
                }
                (t, sums)
            })
            .collect();
        let mut out = RasterOutput::blank(w, h, settings.background);
        for (t, sums) in tiles {
            let (x0, y0, x1, _) = tile_pixels(t, self.tiles_x, ts, w, h);
            let tw = x1 - x0;
            for (k, s) in sums.iter().enumerate() {
                let (x, y) = (x0 + k % tw, y0 + k / tw);
                let (color, depth) = finish_pixel(s, settings);
                for (c, v) in color.iter().enumerate() {
                    out.color.set(x, y, c, *v);
                }
                out.depth.set(x, y, 0, depth);
                out.track.set(x, y, 0, s.track);
                out.transmittance.set(x, y, 0, s.transmittance);
            }
        }
        out.order_hash = self.order_hash;
        out
    }
}

/// Renders color, depth, track and residual transmittance for one view.
pub fn rasterize(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<RasterOutput> {
    let prepared = prepare(cloud, camera, settings)?;
    Ok(prepared.forward(camera, settings))
}

/// A prepared view that can run forward and backward without re-projecting.
pub struct RenderPass<'a> {
    cloud: &'a GaussianCloud,
    camera: &'a Camera,
    settings: &'a RenderSettings,
    prepared: Prepared,
}

impl<'a> RenderPass<'a> {
    pub fn new(cloud: &'a GaussianCloud, camera: &'a Camera, settings: &'a RenderSettings) -> Result<Self> {
        Ok(Self {
            prepared: prepare(cloud, camera, settings)?,
            cloud,
            camera,
            settings,
        })
    }

    pub fn forward(&self) -> RasterOutput {
        self.prepared.forward(self.camera, self.settings)
    }

    pub fn backward(&self, grads: &RasterGrads) -> Result<CloudGrads> {
        backward::backward(self.cloud, self.camera, self.settings, &self.prepared, grads)
    }
}

#[cfg(test)]
mod tests;
