use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{logit, GaussianParams, IDENTITY_QUAT};
use crate::sh::SH_C0;
use crate::synthetic::{random_cloud, RandomCloudSpec};

fn axis_camera(w: usize, h: usize) -> Camera {
    Camera::new(
        "cam",
        [40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0],
        (w, h),
        Matrix3::identity(),
        Vector3::zeros(),
    )
    .unwrap()
}

/// SH DC coefficient giving `rgb` at degree 0.
fn dc(rgb: [f64; 3]) -> Vec<[f64; 3]> {
    vec![rgb.map(|v| (v - 0.5) / SH_C0)]
}

/// A tiny isotropic Gaussian on the optical axis, centred on pixel (8, 8) of a 16x16 view.
fn point_splat(z: f64, opacity: f64, rgb: [f64; 3]) -> GaussianParams {
    GaussianParams {
        position: [0.0, 0.0, z],
        rotation: IDENTITY_QUAT,
        log_scale: [(1e-4f64).ln(); 3],
        opacity_logit: logit(opacity),
        sh: dc(rgb),
    }
}

fn centered_camera() -> Camera {
    // principal point at the centre of pixel (8, 8)
    Camera::new(
        "c",
        [40.0, 40.0, 8.5, 8.5],
        (16, 16),
        Matrix3::identity(),
        Vector3::zeros(),
    )
    .unwrap()
}

#[test]
fn empty_cloud_renders_background() {
    let cam = axis_camera(8, 6);
    let settings = RenderSettings {
        background: [0.2, 0.4, 0.6],
        ..Default::default()
    };
    let out = rasterize(&GaussianCloud::new(0), &cam, &settings).unwrap();
    for y in 0..6 {
        for x in 0..8 {
            assert_eq!(out.color.pixel(x, y), &[0.2, 0.4, 0.6]);
            assert_eq!(out.track.get(x, y, 0), 0.0);
            assert_eq!(out.transmittance.get(x, y, 0), 1.0);
            assert_eq!(out.depth.get(x, y, 0), 0.0);
        }
    }
}

#[test]
fn single_splat_weights() {
    let mut cloud = GaussianCloud::new(0);
    let c = [0.8, 0.4, 0.2];
    cloud.push(&point_splat(2.0, 0.5, c));
    let out = rasterize(&cloud, &centered_camera(), &RenderSettings::default()).unwrap();
    let px = out.color.pixel(8, 8);
    for k in 0..3 {
        assert!((px[k] - 0.5 * c[k]).abs() < 1e-12);
    }
    assert!((out.track.get(8, 8, 0) - 0.5).abs() < 1e-12);
    assert!((out.depth.get(8, 8, 0) - 1.0).abs() < 1e-12);
    // the footprint is far below a pixel: the neighbour only sees the floor blur
    assert!(out.track.get(9, 8, 0) < 0.5);
}

#[test]
fn two_coincident_splats_telescope() {
    let mut cloud = GaussianCloud::new(0);
    let c1 = [1.0, 0.0, 0.0];
    let c2 = [0.0, 1.0, 0.5];
    cloud.push(&point_splat(3.0, 0.5, c2));
    cloud.push(&point_splat(2.0, 0.5, c1));
    let out = rasterize(&cloud, &centered_camera(), &RenderSettings::default()).unwrap();
    let px = out.color.pixel(8, 8);
    for k in 0..3 {
        assert!((px[k] - (0.5 * c1[k] + 0.25 * c2[k])).abs() < 1e-12);
    }
    assert!((out.track.get(8, 8, 0) - 0.75).abs() < 1e-12);
    assert!((out.depth.get(8, 8, 0) - (0.5 * 2.0 + 0.25 * 3.0)).abs() < 1e-12);
}

#[test]
fn normalized_depth_divides_by_track() {
    let mut cloud = GaussianCloud::new(0);
    cloud.push(&point_splat(2.0, 0.5, [0.5; 3]));
    let settings = RenderSettings {
        normalize_depth: true,
        ..Default::default()
    };
    let out = rasterize(&cloud, &centered_camera(), &settings).unwrap();
    assert!((out.depth.get(8, 8, 0) - 2.0).abs() < 1e-12);
    assert_eq!(out.depth.get(0, 0, 0), 0.0);
}

fn random_scene(rng: &mut ChaCha8Rng, max_n: usize) -> GaussianCloud {
    let n = rng.random_range(1..=max_n);
    random_cloud(rng, n, &RandomCloudSpec::default())
}

#[test]
fn tiled_matches_reference_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cam = axis_camera(40, 36);
    for _ in 0..6 {
        let cloud = random_scene(&mut rng, 60);
        for settings in [
            RenderSettings::default(),
            RenderSettings {
                tile_size: 7,
                ..Default::default()
            },
        ] {
            let a = rasterize(&cloud, &cam, &settings).unwrap();
            let b = rasterize_reference(&cloud, &cam, &settings).unwrap();
            assert!(a.color.max_abs_diff(&b.color) < 1e-6);
            assert!(a.depth.max_abs_diff(&b.depth) < 1e-6);
            assert!(a.track.max_abs_diff(&b.track) < 1e-6);
            let z = settings.without_thresholds();
            let a = rasterize(&cloud, &cam, &z).unwrap();
            let b = rasterize_reference(&cloud, &cam, &z).unwrap();
            assert!(a.color.max_abs_diff(&b.color) < 1e-12);
            assert!(a.depth.max_abs_diff(&b.depth) < 1e-12);
            assert!(a.track.max_abs_diff(&b.track) < 1e-12);
        }
    }
}

#[test]
fn storage_order_does_not_change_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cam = axis_camera(32, 32);
    let cloud = random_scene(&mut rng, 40);
    let mut perm: Vec<usize> = (0..cloud.len()).collect();
    perm.reverse();
    perm.rotate_left(cloud.len() / 3);
    let mut shuffled = GaussianCloud::new(cloud.max_sh_degree());
    shuffled.set_active_sh_degree(cloud.active_sh_degree());
    for &i in &perm {
        shuffled.push(&cloud.get(i));
    }
    let s = RenderSettings::default();
    let a = rasterize(&cloud, &cam, &s).unwrap();
    let b = rasterize(&shuffled, &cam, &s).unwrap();
    assert_eq!(a.color, b.color);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.track, b.track);
}

#[test]
fn track_plus_transmittance_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = axis_camera(32, 24);
    for _ in 0..4 {
        let cloud = random_scene(&mut rng, 80);
        let out = rasterize(&cloud, &cam, &RenderSettings::default()).unwrap();
        for (s, t) in out.track.data().iter().zip(out.transmittance.data()) {
            assert!((s + t - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(s));
        }
        assert!(out.color.is_finite());
    }
}

#[test]
fn track_grows_with_opacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = axis_camera(24, 24);
    let cloud = random_scene(&mut rng, 30);
    let s = RenderSettings::default().without_thresholds();
    let base = rasterize(&cloud, &cam, &s).unwrap();
    let mut more = cloud.clone();
    more.opacity_logits[0] += 1.0;
    let up = rasterize(&more, &cam, &s).unwrap();
    for (a, b) in base.track.data().iter().zip(up.track.data()) {
        assert!(b + 1e-15 >= *a);
    }
}

#[test]
fn zero_output_gradients_give_zero_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cam = axis_camera(16, 16);
    let cloud = random_scene(&mut rng, 10);
    let g = rasterize_backward(&cloud, &cam, &RenderSettings::default(), &RasterGrads::zeros(16, 16)).unwrap();
    assert!(g.is_all_zero());
}

#[test]
fn occluded_splat_gets_no_gradient() {
    // front splat: large and saturating; back splat hidden behind it
    let mut cloud = GaussianCloud::new(0);
    cloud.push(&GaussianParams {
        position: [0.0, 0.0, 2.0],
        rotation: IDENTITY_QUAT,
        log_scale: [(2.0f64).ln(); 3],
        opacity_logit: logit(0.999),
        sh: dc([0.9, 0.1, 0.1]),
    });
    cloud.push(&GaussianParams {
        position: [0.0, 0.0, 4.0],
        rotation: IDENTITY_QUAT,
        log_scale: [(0.05f64).ln(); 3],
        opacity_logit: logit(0.8),
        sh: dc([0.1, 0.9, 0.1]),
    });
    let cam = centered_camera();
    let settings = RenderSettings {
        transmittance_stop: 0.02,
        ..Default::default()
    };
    let mut grads = RasterGrads::zeros(16, 16);
    grads.color.data_mut().iter_mut().for_each(|v| *v = 1.0);
    grads.depth.data_mut().iter_mut().for_each(|v| *v = 1.0);
    let g = rasterize_backward(&cloud, &cam, &settings, &grads).unwrap();
    let mag: f64 = g.positions[1]
        .iter()
        .chain(&g.log_scales[1])
        .map(|v| v.abs())
        .sum::<f64>()
        + g.opacity_logits[1].abs()
        + g.sh(1, 1).iter().flatten().map(|v| v.abs()).sum::<f64>();
    assert!(mag < 1e-12, "occluded gradient magnitude {mag}");
    assert!(g.opacity_logits[0].abs() > 0.0 || g.positions[0].iter().any(|v| *v != 0.0));
}

#[test]
fn backward_reuses_forward_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cam = axis_camera(32, 32);
    let cloud = random_scene(&mut rng, 25);
    let s = RenderSettings::default();
    let out = rasterize(&cloud, &cam, &s).unwrap();
    let g = rasterize_backward(&cloud, &cam, &s, &RasterGrads::zeros(32, 32)).unwrap();
    assert_eq!(out.order_hash, g.order_hash);
    assert_ne!(out.order_hash, 0);
}

/// Finite-difference check of every parameter on one small random scene.
pub(crate) fn gradient_check(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = axis_camera(20, 20);
    let spec = RandomCloudSpec {
        opacity: (0.2, 0.85),
        ..RandomCloudSpec::default()
    };
    let n = rng.random_range(1..=6);
    let cloud = random_cloud(&mut rng, n, &spec);
    let settings = RenderSettings::default().without_thresholds();
    let mut grads = RasterGrads::zeros(20, 20);
    for img in [&mut grads.color, &mut grads.depth, &mut grads.track] {
        img.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let loss = |c: &GaussianCloud| -> f64 {
        let o = rasterize(c, &cam, &settings).unwrap();
        let dot = |a: &Image, b: &Image| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        dot(&o.color, &grads.color) + dot(&o.depth, &grads.depth) + dot(&o.track, &grads.track)
    };
    let g = rasterize_backward(&cloud, &cam, &settings, &grads).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut check = |analytic: f64, perturb: &dyn Fn(&mut GaussianCloud, f64)| {
        let mut p = cloud.clone();
        perturb(&mut p, h);
        let mut m = cloud.clone();
        perturb(&mut m, -h);
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        let err = (fd - analytic).abs();
        let rel = if err < 1e-6 {
            0.0
        } else {
            err / fd.abs().max(analytic.abs())
        };
        worst = worst.max(rel);
        checked += 1;
    };
    for i in 0..cloud.len() {
        for a in 0..3 {
            check(g.positions[i][a], &|c, d| c.positions[i][a] += d);
            check(g.log_scales[i][a], &|c, d| c.log_scales[i][a] += d);
        }
        for a in 0..4 {
            check(g.rotations[i][a], &|c, d| c.rotations[i][a] += d);
        }
        check(g.opacity_logits[i], &|c, d| c.opacity_logits[i] += d);
        let k = cloud.coeffs_per_gaussian();
        for j in 0..k {
            for ch in 0..3 {
                check(g.sh_coeffs[i * k + j][ch], &|c, d| c.sh_mut(i)[j][ch] += d);
            }
        }
    }
    (worst, checked)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (worst, n) = gradient_check(100 + seed);
        assert!(
            worst < 1e-3,
            "seed {seed}: worst relative error {worst} over {n} params"
        );
    }
}

impl CloudGrads {
    fn sh(&self, i: usize, k: usize) -> &[[f64; 3]] {
        &self.sh_coeffs[i * k..(i + 1) * k]
    }
}
