//! Synthetic scenes with exact priors, used by tests, demos and the `synth`
//! subcommand. Every prior is derived from a ground-truth cloud through the
//! rasterizer, so downstream stages can be checked against known answers.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{make_pseudo_views, save_cameras, Camera, PerturbAxis};
use crate::error::Result;
use crate::image::{Image, Mask};
use crate::io::{save_f32raster, write_json_atomic};
use crate::ply::save_ply;
use crate::priors::{save_depth, save_point_map, AssetManifest, DepthAsset, DepthSource, PointMapAsset};
use crate::raster::{rasterize, RenderSettings};
use crate::scene::{logit, GaussianCloud, GaussianParams};
use crate::sh::{coeffs_for_degree, SH_C0};

/// Distribution of [`random_cloud`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomCloudSpec {
    pub center: [f64; 3],
    /// Positions are uniform in the axis-aligned cube `center ± half_extent`.
    pub half_extent: f64,
    /// Per-axis standard deviations are log-uniform in this range.
    pub scale: (f64, f64),
    pub opacity: (f64, f64),
    /// Base color, uniform per channel.
    pub color: (f64, f64),
    /// Standard deviation of higher-order SH coefficients.
    pub sh_rest_std: f64,
    pub max_sh_degree: usize,
    pub active_sh_degree: usize,
}

impl Default for RandomCloudSpec {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 4.0],
            half_extent: 1.0,
            scale: (0.04, 0.3),
            opacity: (0.1, 0.95),
            color: (0.1, 0.9),
            sh_rest_std: 0.05,
            max_sh_degree: 2,
            active_sh_degree: 2,
        }
    }
}

pub fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-3 {
            return q.map(|v| v / n);
        }
    }
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, spec: &RandomCloudSpec) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(spec.max_sh_degree);
    let k = coeffs_for_degree(spec.max_sh_degree);
    let (ls0, ls1) = (spec.scale.0.ln(), spec.scale.1.ln());
    for _ in 0..n {
        let position = std::array::from_fn(|a| spec.center[a] + rng.random_range(-spec.half_extent..=spec.half_extent));
        let log_scale = std::array::from_fn(|_| rng.random_range(ls0..=ls1));
        let opacity = rng.random_range(spec.opacity.0..=spec.opacity.1);
        let mut sh = vec![[0.0; 3]; k];
        sh[0] = std::array::from_fn(|_| (rng.random_range(spec.color.0..=spec.color.1) - 0.5) / SH_C0);
        for c in sh.iter_mut().skip(1) {
            *c = std::array::from_fn(|_| spec.sh_rest_std * rng.sample::<f64, _>(StandardNormal));
        }
        cloud.push(&GaussianParams {
            position,
            rotation: random_unit_quat(rng),
            log_scale,
            opacity_logit: logit(opacity),
            sh,
        });
    }
    cloud.set_active_sh_degree(spec.active_sh_degree);
    cloud
}

/// Builds a point-map asset from a render: points sit at the normalized
/// rendered depth along each pixel ray, confidence is the rendered track.
pub fn point_map_from_render(cloud: &GaussianCloud, camera: &Camera, min_track: f64) -> Result<PointMapAsset> {
    let settings = RenderSettings {
        normalize_depth: true,
        ..RenderSettings::default()
    };
    let out = rasterize(cloud, camera, &settings)?;
    let (w, h) = (camera.width, camera.height);
    let o = camera.center();
    let mut points = Image::new(w, h, 3);
    let mut conf = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let s = out.track.get(x, y, 0);
            let d = out.depth.get(x, y, 0);
            if s < min_track || d <= 0.0 {
                continue;
            }
            let p = o + camera.pixel_ray(x, y) * d;
            for c in 0..3 {
                points.set(x, y, c, p[c]);
            }
            conf.set(x, y, 0, s);
        }
    }
    PointMapAsset::new(camera.clone(), points, conf, out.color, Path::new("<render>"))
}

/// Point map of the plane `z = depth` seen by `camera`, fully confident,
/// colored by a smooth function of the world position.
pub fn plane_point_map(camera: &Camera, depth: f64) -> Result<PointMapAsset> {
    let (w, h) = (camera.width, camera.height);
    let o = camera.center();
    let mut points = Image::new(w, h, 3);
    let mut rgb = Image::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let r = camera.pixel_ray(x, y);
            let p = o + r * ((depth - o.z) / r.z);
            for c in 0..3 {
                points.set(x, y, c, p[c]);
                rgb.set(x, y, c, 0.5 + 0.3 * (p[c] * 2.0 + c as f64).sin());
            }
        }
    }
    PointMapAsset::new(
        camera.clone(),
        points,
        Image::filled(w, h, 1, 1.0),
        rgb,
        Path::new("<plane>"),
    )
}

/// Layout of a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Distance from the cameras to the scene center.
    pub radius: f64,
    /// Azimuths (degrees) of the training cameras.
    pub train_azimuths: Vec<f64>,
    /// Azimuth/elevation pairs (degrees) of held-out cameras.
    pub test_views: Vec<(f64, f64)>,
    /// Index of the training camera the pseudo views perturb.
    pub pseudo_source: usize,
    pub pseudo_angle: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussians: 100,
            width: 48,
            height: 48,
            focal: 50.0,
            radius: 4.0,
            train_azimuths: vec![-25.0, 0.0, 25.0],
            test_views: vec![(-15.0, 0.0), (-8.0, 6.0), (8.0, -6.0), (15.0, 0.0), (4.0, 4.0)],
            pseudo_source: 1,
            pseudo_angle: 5.0,
        }
    }
}

/// Ground truth plus every prior the pipeline consumes.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub gt: GaussianCloud,
    pub train: Vec<Camera>,
    pub pseudo: Vec<Camera>,
    pub test: Vec<Camera>,
}

fn orbit_camera(id: String, spec: &SceneSpec, azimuth: f64, elevation: f64) -> Result<Camera> {
    let (a, e) = (azimuth.to_radians(), elevation.to_radians());
    // world +y points down; elevation raises the camera (negative y)
    let eye = Vector3::new(
        spec.radius * e.cos() * a.sin(),
        -spec.radius * e.sin(),
        -spec.radius * e.cos() * a.cos(),
    );
    Camera::look_at(
        id,
        [
            spec.focal,
            spec.focal,
            spec.width as f64 / 2.0,
            spec.height as f64 / 2.0,
        ],
        (spec.width, spec.height),
        eye,
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
    )
}

impl SyntheticScene {
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let cloud_spec = RandomCloudSpec {
            center: [0.0; 3],
            half_extent: 0.7,
            scale: (0.03, 0.15),
            opacity: (0.5, 0.95),
            ..RandomCloudSpec::default()
        };
        let gt = random_cloud(&mut rng, spec.gaussians, &cloud_spec);
        let train = spec
            .train_azimuths
            .iter()
            .enumerate()
            .map(|(i, a)| orbit_camera(format!("train{i}"), spec, *a, 0.0))
            .collect::<Result<Vec<_>>>()?;
        let test = spec
            .test_views
            .iter()
            .enumerate()
            .map(|(i, (a, e))| orbit_camera(format!("test{i}"), spec, *a, *e))
            .collect::<Result<Vec<_>>>()?;
        let pseudo = make_pseudo_views(
            std::slice::from_ref(&train[spec.pseudo_source]),
            spec.pseudo_angle,
            &[PerturbAxis::Up],
        )?;
        Ok(Self {
            gt,
            train,
            pseudo,
            test,
        })
    }

    pub fn render_gt(&self, camera: &Camera) -> Result<Image> {
        Ok(rasterize(&self.gt, camera, &RenderSettings::default())?.color)
    }

    /// Oracle depth prior for `camera`: normalized GT depth, valid where covered.
    pub fn depth_prior(&self, camera: &Camera, source: DepthSource) -> Result<DepthAsset> {
        let settings = RenderSettings {
            normalize_depth: true,
            ..RenderSettings::default()
        };
        let out = rasterize(&self.gt, camera, &settings)?;
        let valid = Mask::from_vec(
            camera.width,
            camera.height,
            out.track
                .data()
                .iter()
                .zip(out.depth.data())
                .map(|(s, d)| *s > 0.5 && *d > 0.0)
                .collect(),
        )?;
        let depth = Image::from_vec(
            camera.width,
            camera.height,
            1,
            out.depth
                .data()
                .iter()
                .zip(valid.data())
                .map(|(d, v)| if *v { *d } else { 0.0 })
                .collect(),
        )?;
        DepthAsset::new(depth, Some(valid), source, Path::new("<render>"))
    }

    pub fn point_maps(&self) -> Result<Vec<PointMapAsset>> {
        self.train
            .iter()
            .map(|c| point_map_from_render(&self.gt, c, 0.05))
            .collect()
    }

    /// Writes the scene in the directory layout the CLI consumes:
    /// `assets/` (point maps whose colors are the training images, depth
    /// priors, manifest), `pseudo/` (cameras, depth priors, refined images),
    /// `test/` (cameras, reference images) and `gt.ply`. Depth priors are
    /// named `<camera>_prior.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| crate::error::Error::io(p, e));
        let assets = dir.join("assets");
        let pseudo = dir.join("pseudo");
        let test = dir.join("test");
        for d in [&assets, &pseudo, &test] {
            mk(d)?;
        }
        let mut views = Vec::new();
        for (cam, pm) in self.train.iter().zip(self.point_maps()?) {
            let side = save_point_map(&assets, &sanitize(&cam.id), &pm)?;
            views.push(side.file_name().unwrap().to_string_lossy().into_owned());
            save_depth(
                &assets,
                &format!("{}_prior", sanitize(&cam.id)),
                &self.depth_prior(cam, DepthSource::TrainingStereo)?,
            )?;
        }
        write_json_atomic(&assets.join("manifest.json"), &AssetManifest { views })?;
        save_cameras(&assets.join("cameras.json"), &self.train)?;

        save_cameras(&pseudo.join("cameras.json"), &self.pseudo)?;
        let mut refined = std::collections::BTreeMap::new();
        for cam in &self.pseudo {
            let name = format!("{}.f32raster", sanitize(&cam.id));
            save_f32raster(&pseudo.join(&name), &self.render_gt(cam)?)?;
            refined.insert(cam.id.clone(), name);
            save_depth(
                &pseudo,
                &format!("{}_prior", sanitize(&cam.id)),
                &self.depth_prior(cam, DepthSource::PseudoMonocular)?,
            )?;
        }
        write_json_atomic(
            &pseudo.join("refined.json"),
            &crate::diffusion::RefinedManifest { images: refined },
        )?;

        save_cameras(&test.join("cameras.json"), &self.test)?;
        for cam in &self.test {
            save_f32raster(
                &test.join(format!("{}.f32raster", sanitize(&cam.id))),
                &self.render_gt(cam)?,
            )?;
        }
        save_ply(&dir.join("gt.ply"), &self.gt)
    }
}

/// File-name-safe form of a camera id.
pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_cloud_is_valid_and_seeded() {
        let a = random_cloud(&mut ChaCha8Rng::seed_from_u64(3), 20, &RandomCloudSpec::default());
        let b = random_cloud(&mut ChaCha8Rng::seed_from_u64(3), 20, &RandomCloudSpec::default());
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        a.validate().unwrap();
    }

    #[test]
    fn plane_points_lie_on_plane() {
        let cam = orbit_camera("c".into(), &SceneSpec::default(), 10.0, 0.0).unwrap();
        let pm = plane_point_map(&cam, 1.0).unwrap();
        for y in 0..cam.height {
            for x in 0..cam.width {
                assert!((pm.points.get(x, y, 2) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scene_views_see_the_object() {
        let scene = SyntheticScene::generate(&SceneSpec::default()).unwrap();
        assert_eq!(scene.train.len(), 3);
        assert_eq!(scene.pseudo.len(), 2);
        assert_eq!(scene.test.len(), 5);
        for cam in scene.train.iter().chain(&scene.test).chain(&scene.pseudo) {
            let out = rasterize(&scene.gt, cam, &RenderSettings::default()).unwrap();
            let covered = out.track.data().iter().filter(|s| **s > 0.5).count();
            assert!(covered > cam.pixel_count() / 10, "{}: {covered}", cam.id);
        }
    }
}
