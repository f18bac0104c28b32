//! Ingestion of externally produced priors (point maps with confidence,
//! depth maps, refined pseudo-view images) and redundancy-free incremental
//! initialization of the Gaussian cloud from point maps.
//!
//! Every asset is a JSON sidecar naming `.f32raster` (or `.png` for color)
//! payload files relative to the sidecar's directory.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRecord};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::io::{load_f32raster, load_rgb, read_json, save_f32raster, write_json_atomic};
use crate::raster::{rasterize, RasterOutput, RenderSettings};
use crate::scene::{logit, GaussianCloud, GaussianParams, IDENTITY_QUAT};
use crate::sh::{MAX_SH_DEGREE, SH_C0};

/// Threshold on rendered track below which a pixel counts as uncovered.
pub const TRACK_THRESHOLD: f64 = 0.5;
/// Depth-error outlier factor, in multiples of the median depth error.
pub const MDE_FACTOR: f64 = 50.0;

/// Per-pixel world points with confidence, color and the implied distance map.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMapAsset {
    pub camera: Camera,
    /// 3 channels, world coordinates.
    pub points: Image,
    pub confidence: Image,
    /// 3 channels in [0, 1].
    pub rgb: Image,
    /// `||X_p - o||` per pixel.
    pub gt_depth: Image,
}

impl PointMapAsset {
    /// Builds the asset, checking shapes and finiteness and deriving `gt_depth`.
    pub fn new(camera: Camera, points: Image, confidence: Image, rgb: Image, origin: &Path) -> Result<Self> {
        let (w, h) = (camera.width, camera.height);
        let payload = |reason: String| Error::Payload {
            path: origin.to_path_buf(),
            reason,
        };
        for (name, img, c) in [("points", &points, 3), ("confidence", &confidence, 1), ("rgb", &rgb, 3)] {
            if img.width() != w || img.height() != h || img.channels() != c {
                return Err(payload(format!(
                    "{name} is {}x{}x{}, camera `{}` expects {w}x{h}x{c}",
                    img.width(),
                    img.height(),
                    img.channels(),
                    camera.id
                )));
            }
        }
        if !confidence.is_finite() || confidence.data().iter().any(|v| *v < 0.0) {
            return Err(payload("confidence must be finite and non-negative".into()));
        }
        if !rgb.is_finite() {
            return Err(payload("rgb contains non-finite values".into()));
        }
        let center = camera.center();
        let mut gt_depth = Image::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                if confidence.get(x, y, 0) <= 0.0 {
                    continue;
                }
                let p = points.pixel(x, y);
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(payload(format!("non-finite point at confident pixel ({x}, {y})")));
                }
                let d = (Vector3::new(p[0], p[1], p[2]) - center).norm();
                gt_depth.set(x, y, 0, d);
            }
        }
        Ok(Self {
            camera,
            points,
            confidence,
            rgb,
            gt_depth,
        })
    }

    /// Pixels with positive confidence and a positive distance.
    pub fn validity(&self) -> Mask {
        let data = self
            .confidence
            .data()
            .iter()
            .zip(self.gt_depth.data())
            .map(|(c, d)| *c > 0.0 && *d > 0.0)
            .collect();
        Mask::from_vec(self.camera.width, self.camera.height, data).expect("shape checked")
    }

    pub fn confident(&self, threshold: f64) -> Mask {
        let valid = self.validity();
        let data = self
            .confidence
            .data()
            .iter()
            .zip(valid.data())
            .map(|(c, v)| *v && *c >= threshold)
            .collect();
        Mask::from_vec(self.camera.width, self.camera.height, data).expect("shape checked")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointMapSidecar {
    pub camera: CameraRecord,
    pub points: String,
    pub confidence: String,
    pub rgb: String,
}

fn sibling(sidecar: &Path, name: &str) -> PathBuf {
    sidecar.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn load_point_map(path: &Path) -> Result<PointMapAsset> {
    let side: PointMapSidecar = read_json(path)?;
    let camera = Camera::try_from(side.camera)?;
    let points = load_f32raster(&sibling(path, &side.points))?;
    let confidence = load_f32raster(&sibling(path, &side.confidence))?;
    let rgb = load_rgb(&sibling(path, &side.rgb))?;
    PointMapAsset::new(camera, points, confidence, rgb, path)
}

/// Writes `<stem>.json` plus `<stem>_points/_conf/_rgb.f32raster` into `dir`.
pub fn save_point_map(dir: &Path, stem: &str, asset: &PointMapAsset) -> Result<PathBuf> {
    let names = [
        format!("{stem}_points.f32raster"),
        format!("{stem}_conf.f32raster"),
        format!("{stem}_rgb.f32raster"),
    ];
    save_f32raster(&dir.join(&names[0]), &asset.points)?;
    save_f32raster(&dir.join(&names[1]), &asset.confidence)?;
    save_f32raster(&dir.join(&names[2]), &asset.rgb)?;
    let [points, confidence, rgb] = names;
    let side = PointMapSidecar {
        camera: (&asset.camera).into(),
        points,
        confidence,
        rgb,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json_atomic(&path, &side)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    /// Multi-view stereo prior for a training view.
    TrainingStereo,
    /// Monocular estimate for a pseudo view.
    PseudoMonocular,
}

/// A depth raster of arbitrary scale with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthAsset {
    pub depth: Image,
    pub valid: Mask,
    pub source: DepthSource,
}

impl DepthAsset {
    /// Valid wherever the depth is strictly positive (and `mask` allows).
    pub fn new(depth: Image, mask: Option<Mask>, source: DepthSource, origin: &Path) -> Result<Self> {
        let payload = |reason: String| Error::Payload {
            path: origin.to_path_buf(),
            reason,
        };
        if depth.channels() != 1 {
            return Err(payload("depth must have one channel".into()));
        }
        if !depth.is_finite() {
            return Err(payload("depth contains non-finite values".into()));
        }
        let valid = match mask {
            Some(m) => {
                if m.width() != depth.width() || m.height() != depth.height() {
                    return Err(payload("mask size differs from depth".into()));
                }
                if m.data().iter().zip(depth.data()).any(|(v, d)| *v && *d <= 0.0) {
                    return Err(payload("non-positive depth inside the validity mask".into()));
                }
                m
            }
            None => Mask::from_vec(
                depth.width(),
                depth.height(),
                depth.data().iter().map(|d| *d > 0.0).collect(),
            )?,
        };
        Ok(Self { depth, valid, source })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub depth: String,
    pub source: DepthSource,
    /// Optional `.f32raster`; pixels > 0.5 are valid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

pub fn load_depth(path: &Path) -> Result<DepthAsset> {
    let side: DepthSidecar = read_json(path)?;
    let depth = load_f32raster(&sibling(path, &side.depth))?;
    let mask = match &side.mask {
        Some(m) => {
            let raw = load_f32raster(&sibling(path, m))?;
            Some(Mask::from_vec(
                raw.width(),
                raw.height(),
                raw.data().iter().map(|v| *v > 0.5).collect(),
            )?)
        }
        None => None,
    };
    DepthAsset::new(depth, mask, side.source, path)
}

pub fn save_depth(dir: &Path, stem: &str, asset: &DepthAsset) -> Result<PathBuf> {
    let depth_name = format!("{stem}_depth.f32raster");
    let mask_name = format!("{stem}_mask.f32raster");
    save_f32raster(&dir.join(&depth_name), &asset.depth)?;
    let m = asset.valid.data().iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
    save_f32raster(
        &dir.join(&mask_name),
        &Image::from_vec(asset.depth.width(), asset.depth.height(), 1, m)?,
    )?;
    let side = DepthSidecar {
        depth: depth_name,
        source: asset.source,
        mask: Some(mask_name),
    };
    let path = dir.join(format!("{stem}.json"));
    write_json_atomic(&path, &side)?;
    Ok(path)
}

/// An externally refined pseudo-view image.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedViewAsset {
    pub camera_id: String,
    pub image: Image,
}

pub fn load_refined(path: &Path, camera_id: &str) -> Result<RefinedViewAsset> {
    let image = load_rgb(path)?;
    if !image.is_finite() {
        return Err(Error::Payload {
            path: path.to_path_buf(),
            reason: "refined image contains non-finite values".into(),
        });
    }
    Ok(RefinedViewAsset {
        camera_id: camera_id.to_string(),
        image,
    })
}

/// Ordered list of point-map sidecars in an asset directory (`manifest.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssetManifest {
    pub views: Vec<String>,
}

pub fn load_asset_dir(dir: &Path) -> Result<Vec<PointMapAsset>> {
    let manifest: AssetManifest = read_json(&dir.join("manifest.json"))?;
    manifest.views.iter().map(|v| load_point_map(&dir.join(v))).collect()
}

/// Pixels that should receive new Gaussians:
/// `(track < 0.5) OR (gt < rendered AND |rendered - gt| > 50 * MDE)`,
/// with MDE the median of `|rendered - gt|` over valid pixels.
pub fn compute_rf_mask(track: &Image, rendered_depth: &Image, gt_depth: &Image, validity: &Mask) -> Result<Mask> {
    track.ensure_same_shape(rendered_depth, "track vs rendered depth")?;
    track.ensure_same_shape(gt_depth, "track vs gt depth")?;
    if validity.width() != track.width() || validity.height() != track.height() {
        return Err(Error::ShapeMismatch("validity mask vs track".into()));
    }
    let mut errors: Vec<f64> = rendered_depth
        .data()
        .iter()
        .zip(gt_depth.data())
        .zip(validity.data())
        .filter(|(_, v)| **v)
        .map(|((r, g), _)| (r - g).abs())
        .collect();
    if errors.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mde = median(&mut errors);
    let data = (0..track.pixel_count())
        .map(|i| {
            if !validity.data()[i] {
                return false;
            }
            let s = track.data()[i];
            let r = rendered_depth.data()[i];
            let g = gt_depth.data()[i];
            s < TRACK_THRESHOLD || (g < r && (r - g).abs() > MDE_FACTOR * mde)
        })
        .collect();
    Mask::from_vec(track.width(), track.height(), data)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Initial parameters of a Gaussian seeded from one pixel.
///
/// Isotropic with a one-pixel footprint (`depth / mean focal`), identity
/// rotation, and the pixel color in the SH DC term.
pub fn seed_gaussian_from_pixel(
    point: [f64; 3],
    rgb: [f64; 3],
    depth: f64,
    camera: &Camera,
    opacity: f64,
    max_sh_degree: usize,
) -> GaussianParams {
    debug_assert!(depth > 0.0);
    let scale = depth / (0.5 * (camera.fx + camera.fy));
    let k = (max_sh_degree + 1) * (max_sh_degree + 1);
    let mut sh = vec![[0.0; 3]; k];
    sh[0] = rgb.map(|c| (c - 0.5) / SH_C0);
    GaussianParams {
        position: point,
        rotation: IDENTITY_QUAT,
        log_scale: [scale.ln(); 3],
        opacity_logit: logit(opacity),
        sh,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryView {
    First,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfConfig {
    pub confidence_threshold: f64,
    pub primary: PrimaryView,
    pub max_sh_degree: usize,
    /// Opacity of newly seeded Gaussians.
    pub seed_opacity: f64,
    /// Settings used when rendering the current cloud into the next view.
    pub render: RenderSettings,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.5,
            primary: PrimaryView::First,
            max_sh_degree: MAX_SH_DEGREE,
            seed_opacity: 0.2,
            render: RenderSettings {
                normalize_depth: true,
                ..RenderSettings::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RfReport {
    pub cloud: GaussianCloud,
    /// Asset indices in processing order.
    pub order: Vec<usize>,
    /// Gaussians added per processed view, aligned with `order`.
    pub added: Vec<usize>,
}

fn seed_masked(cloud: &mut GaussianCloud, asset: &PointMapAsset, mask: &Mask, cfg: &RfConfig) -> usize {
    let mut added = 0;
    for y in 0..asset.camera.height {
        for x in 0..asset.camera.width {
            if !mask.get(x, y) {
                continue;
            }
            let p = asset.points.pixel(x, y);
            let c = asset.rgb.pixel(x, y);
            let g = seed_gaussian_from_pixel(
                [p[0], p[1], p[2]],
                [c[0], c[1], c[2]],
                asset.gt_depth.get(x, y, 0),
                &asset.camera,
                cfg.seed_opacity,
                cfg.max_sh_degree,
            );
            cloud.push(&g);
            added += 1;
        }
    }
    added
}

/// Adds Gaussians from `asset` where the current cloud under-represents it.
pub fn rf_extend_view(
    cloud: &mut GaussianCloud,
    asset: &PointMapAsset,
    cfg: &RfConfig,
    render: &mut dyn FnMut(&GaussianCloud, &Camera) -> Result<RasterOutput>,
) -> Result<usize> {
    let out = render(cloud, &asset.camera)?;
    let mask = compute_rf_mask(&out.track, &out.depth, &asset.gt_depth, &asset.validity())?;
    let gate = mask.and(&asset.confident(cfg.confidence_threshold));
    Ok(seed_masked(cloud, asset, &gate, cfg))
}

/// Incremental initialization: the primary view seeds every confident pixel;
/// each later view seeds only confident pixels selected by [`compute_rf_mask`]
/// against a render of the cloud built so far.
pub fn rf_initialize(
    assets: &[PointMapAsset],
    cfg: &RfConfig,
    render: &mut dyn FnMut(&GaussianCloud, &Camera) -> Result<RasterOutput>,
) -> Result<RfReport> {
    if assets.is_empty() {
        return Err(Error::Initialization("no point-map assets".into()));
    }
    let mut order: Vec<usize> = (0..assets.len()).collect();
    if let PrimaryView::Random { seed } = cfg.primary {
        let k = ChaCha8Rng::seed_from_u64(seed).random_range(0..assets.len());
        order.remove(k);
        order.insert(0, k);
    }
    let mut cloud = GaussianCloud::new(cfg.max_sh_degree);
    let first = &assets[order[0]];
    let n0 = seed_masked(&mut cloud, first, &first.confident(cfg.confidence_threshold), cfg);
    if n0 == 0 {
        return Err(Error::Initialization(format!(
            "primary view `{}` has no pixel with confidence >= {}",
            first.camera.id, cfg.confidence_threshold
        )));
    }
    let mut added = vec![n0];
    for &i in &order[1..] {
        added.push(rf_extend_view(&mut cloud, &assets[i], cfg, render)?);
    }
    Ok(RfReport { cloud, order, added })
}

/// [`rf_initialize`] with the built-in rasterizer.
pub fn rf_initialize_default(assets: &[PointMapAsset], cfg: &RfConfig) -> Result<RfReport> {
    let settings = cfg.render.clone();
    rf_initialize(assets, cfg, &mut |c, cam| rasterize(c, cam, &settings))
}
