//! Noise-level sampling, forward noising and the iterative reverse sampler
//! over a pluggable denoiser.
//!
//! Noise is additive with standard deviation sigma: `I_t = I_0 + sigma_t * eps`.
//! One reverse step is
//! `I_{t-1} = (I_t - U(I_t; sigma_t)) / sigma_t * (sigma_{t-1} - sigma_t) + I_t`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::read_json;
use crate::priors::{load_refined, RefinedViewAsset};

pub const SIGMA_MAX: f64 = 80.0;
pub const SIGMA_MIN: f64 = 0.002;
pub const P_MEAN: f64 = 1.5;
pub const P_STD: f64 = 2.0;

/// `sigmas[t]` for `t = 0..=T`; `sigmas[0] = 0` and strictly increasing in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` geometrically spaced levels from `sigma_max` down to `sigma_min`,
    /// plus the terminal zero. `T = 1` yields the single level `sigma_max`.
    pub fn geometric(steps: usize, sigma_max: f64, sigma_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("at least one step is required".into()));
        }
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::Schedule(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        let mut sigmas = vec![0.0];
        let ratio = (sigma_max / sigma_min).ln();
        for t in 1..=steps {
            let f = if steps == 1 {
                1.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            sigmas.push(sigma_min * (ratio * f).exp());
        }
        sigmas[steps] = sigma_max;
        Self::from_sigmas(sigmas)
    }

    pub fn default_with_steps(steps: usize) -> Result<Self> {
        Self::geometric(steps, SIGMA_MAX, SIGMA_MIN)
    }

    /// Explicit levels indexed by `t`; must start at 0 and strictly increase.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::Schedule("need sigma_0 and at least one positive level".into()));
        }
        if sigmas[0] != 0.0 {
            return Err(Error::Schedule("sigma_0 must be exactly 0".into()));
        }
        if let Some(t) = (1..sigmas.len()).find(|&t| !(sigmas[t] > sigmas[t - 1]) || !sigmas[t].is_finite()) {
            return Err(Error::Schedule(format!(
                "sigma_{t} = {} does not exceed sigma_{}",
                sigmas[t],
                t - 1
            )));
        }
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Opaque conditioning payload forwarded to the denoiser unread.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conditioning(pub Vec<u8>);

/// A denoiser estimates the clean image from a noisy one at level `sigma`.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, noisy: &Image, sigma: f64, conditioning: &Conditioning) -> Result<Image>;
}

/// Always answers with a fixed clean image.
#[derive(Debug, Clone)]
pub struct CleanTargetDenoiser {
    pub target: Image,
}

impl Denoiser for CleanTargetDenoiser {
    fn denoise(&self, noisy: &Image, _sigma: f64, _c: &Conditioning) -> Result<Image> {
        noisy.ensure_same_shape(&self.target, "denoiser target")?;
        Ok(self.target.clone())
    }
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, noisy: &Image, _sigma: f64, _c: &Conditioning) -> Result<Image> {
        Ok(noisy.clone())
    }
}

/// Draws `exp(g)` with `g ~ N(p_mean, p_std^2)`.
pub fn sample_training_sigma(rng: &mut impl Rng, p_mean: f64, p_std: f64) -> Result<f64> {
    if !(p_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "p_std must be non-negative, got {p_std}"
        )));
    }
    if p_std == 0.0 {
        return Ok(p_mean.exp());
    }
    let n = Normal::new(p_mean, p_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(n.sample(rng).exp())
}

/// `I_0 + sigma * eps` for a given noise image.
pub fn add_noise_with(clean: &Image, sigma: f64, eps: &Image) -> Result<Image> {
    clean.ensure_same_shape(eps, "noise")?;
    let data = clean
        .data()
        .iter()
        .zip(eps.data())
        .map(|(i, e)| i + sigma * e)
        .collect();
    Image::from_vec(clean.width(), clean.height(), clean.channels(), data)
}

pub fn standard_noise(rng: &mut impl Rng, width: usize, height: usize, channels: usize) -> Image {
    let data = (0..width * height * channels)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Image::from_vec(width, height, channels, data).expect("sized")
}

pub fn add_noise(clean: &Image, sigma: f64, rng: &mut impl Rng) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let eps = standard_noise(rng, clean.width(), clean.height(), clean.channels());
    add_noise_with(clean, sigma, &eps)
}

/// One reverse step from level `t` to `t - 1` given the denoiser output `u`.
pub fn reverse_step(current: &Image, u: &Image, sigma_t: f64, sigma_prev: f64) -> Result<Image> {
    if sigma_t <= 0.0 {
        return Err(Error::Schedule("reverse step from a zero noise level".into()));
    }
    current.ensure_same_shape(u, "denoiser output")?;
    let k = (sigma_prev - sigma_t) / sigma_t;
    let data = current
        .data()
        .iter()
        .zip(u.data())
        .map(|(i, u)| (i - u) * k + i)
        .collect();
    Image::from_vec(current.width(), current.height(), current.channels(), data)
}

/// Runs the reverse chain from `initial` at level `T` down to level 0.
pub fn sample_from(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    conditioning: &Conditioning,
    initial: Image,
) -> Result<Image> {
    let mut current = initial;
    for t in (1..=schedule.steps()).rev() {
        let u = denoiser.denoise(&current, schedule.sigma(t), conditioning)?;
        current = reverse_step(&current, &u, schedule.sigma(t), schedule.sigma(t - 1))?;
    }
    Ok(current)
}

/// Draws `I_T ~ N(0, sigma_T^2 I)` and runs the reverse chain.
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    conditioning: &Conditioning,
    shape: (usize, usize, usize),
    rng: &mut impl Rng,
) -> Result<Image> {
    let noise = standard_noise(rng, shape.0, shape.1, shape.2);
    let initial = noise.map(|e| e * schedule.sigma(schedule.steps()));
    sample_from(denoiser, schedule, conditioning, initial)
}

/// `refined.json`: pseudo-camera id to image file, relative to the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinedManifest {
    pub images: BTreeMap<String, String>,
}

/// Loads one refined image per pseudo camera from `dir/refined.json`.
pub fn refine_external(dir: &Path, cameras: &[Camera]) -> Result<Vec<RefinedViewAsset>> {
    let manifest: RefinedManifest = read_json(&dir.join("refined.json"))?;
    cameras
        .iter()
        .map(|cam| {
            let name = manifest
                .images
                .get(&cam.id)
                .ok_or_else(|| Error::MissingRefined(cam.id.clone()))?;
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::MissingRefined(cam.id.clone()));
            }
            let asset = load_refined(&path, &cam.id)?;
            if asset.image.width() != cam.width || asset.image.height() != cam.height {
                return Err(Error::Payload {
                    path,
                    reason: format!(
                        "refined image is {}x{}, camera `{}` is {}x{}",
                        asset.image.width(),
                        asset.image.height(),
                        cam.id,
                        cam.width,
                        cam.height
                    ),
                });
            }
            Ok(asset)
        })
        .collect()
}

/// Builds the denoiser for one camera from its rendered image.
pub type DenoiserFactory<'a> = dyn Fn(&Camera, &Image) -> Result<Box<dyn Denoiser>> + 'a;

/// Samples one image per camera with a per-camera denoiser; the rendered
/// image travels as conditioning. Camera `i` uses seed `seed + i`.
pub fn refine_oracle(
    rendered: &[(Camera, Image)],
    make_denoiser: &DenoiserFactory,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<RefinedViewAsset>> {
    rendered
        .iter()
        .enumerate()
        .map(|(i, (cam, img))| {
            let denoiser = make_denoiser(cam, img)?;
            let cond = Conditioning(crate::io::encode_f32raster(img));
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let image = sample(
                denoiser.as_ref(),
                schedule,
                &cond,
                (img.width(), img.height(), img.channels()),
                &mut rng,
            )?;
            Ok(RefinedViewAsset {
                camera_id: cam.id.clone(),
                image,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> Image {
        Image::from_vec(3, 2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap()
    }

    #[test]
    fn schedule_shape() {
        for t in [1, 2, 10, 50] {
            let s = NoiseSchedule::default_with_steps(t).unwrap();
            assert_eq!(s.steps(), t);
            assert_eq!(s.sigma(0), 0.0);
            assert_eq!(s.sigma(t), SIGMA_MAX);
            assert!(s.sigmas().windows(2).all(|w| w[1] > w[0]));
            if t > 1 {
                assert!((s.sigma(1) - SIGMA_MIN).abs() < 1e-15);
            }
        }
        assert!(NoiseSchedule::default_with_steps(0).is_err());
        assert!(NoiseSchedule::from_sigmas(vec![0.0, 1.0, 1.0]).is_err());
        assert!(NoiseSchedule::from_sigmas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn clean_target_telescopes() {
        let j = target();
        let d = CleanTargetDenoiser { target: j.clone() };
        for t in [1, 10, 50] {
            let s = NoiseSchedule::default_with_steps(t).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
            let out = sample(&d, &s, &Conditioning::default(), (3, 2, 3), &mut rng).unwrap();
            assert!(out.max_abs_diff(&j) < 1e-6);
        }
    }

    #[test]
    fn identity_denoiser_keeps_initial_draw() {
        let s = NoiseSchedule::default_with_steps(7).unwrap();
        let out = sample(
            &IdentityDenoiser,
            &s,
            &Conditioning::default(),
            (2, 2, 1),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let init = standard_noise(&mut ChaCha8Rng::seed_from_u64(9), 2, 2, 1).map(|e| e * SIGMA_MAX);
        assert_eq!(out, init);
    }

    #[test]
    fn single_step_hand_value() {
        // I_1 = 0.8, U = 0.3, sigma_1 = 1, sigma_0 = 0: (0.8 - 0.3) / 1 * (0 - 1) + 0.8 = 0.3
        let s = NoiseSchedule::from_sigmas(vec![0.0, 1.0]).unwrap();
        let d = CleanTargetDenoiser {
            target: Image::filled(1, 1, 1, 0.3),
        };
        let out = sample_from(&d, &s, &Conditioning::default(), Image::filled(1, 1, 1, 0.8)).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-15);
        // sigma_0 = 0.5 instead: (0.8 - 0.3) * (0.5 - 1) + 0.8 = 0.55
        let step = reverse_step(&Image::filled(1, 1, 1, 0.8), &Image::filled(1, 1, 1, 0.3), 1.0, 0.5).unwrap();
        assert!((step.data()[0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_seeded() {
        let s = NoiseSchedule::default_with_steps(5).unwrap();
        let run = |seed| {
            sample(
                &IdentityDenoiser,
                &s,
                &Conditioning::default(),
                (4, 4, 3),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn noise_injection() {
        let j = target();
        assert_eq!(add_noise(&j, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), j);
        let ones = Image::filled(3, 2, 3, 1.0);
        let n = add_noise_with(&j, 2.0, &ones).unwrap();
        assert!(n.data().iter().zip(j.data()).all(|(a, b)| (a - b - 2.0).abs() < 1e-15));
    }

    #[test]
    fn noise_variance_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean = Image::filled(1, 1, 1, 0.25);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| add_noise(&clean, 0.7, &mut rng).unwrap().data()[0] - 0.25)
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((0.47..=0.51).contains(&var), "{var}");
    }

    #[test]
    fn training_sigma_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut logs: Vec<f64> = (0..100_000)
            .map(|_| sample_training_sigma(&mut rng, P_MEAN, P_STD).unwrap().ln())
            .collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let std = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        logs.sort_by(f64::total_cmp);
        let median = logs[logs.len() / 2];
        assert!((1.45..=1.55).contains(&median), "{median}");
        assert!((1.96..=2.04).contains(&std), "{std}");
        let fixed = sample_training_sigma(&mut rng, P_MEAN, 0.0).unwrap();
        assert!((fixed - 4.481_689_070_338_065).abs() < 1e-12);
    }

    #[test]
    fn external_mode_names_missing_camera() {
        let dir = tempfile::tempdir().unwrap();
        let cam = |id: &str| {
            Camera::new(
                id,
                [3.0, 3.0, 1.5, 1.0],
                (3, 2),
                nalgebra::Matrix3::identity(),
                nalgebra::Vector3::zeros(),
            )
            .unwrap()
        };
        crate::io::save_f32raster(&dir.path().join("a.f32raster"), &target()).unwrap();
        let mut m = RefinedManifest::default();
        m.images.insert("a".into(), "a.f32raster".into());
        m.images.insert("b".into(), "b.f32raster".into());
        crate::io::write_json_atomic(&dir.path().join("refined.json"), &m).unwrap();
        let ok = refine_external(dir.path(), &[cam("a")]).unwrap();
        assert_eq!(ok.len(), 1);
        assert_eq!(ok[0].image, target().map(|v| v as f32 as f64));
        match refine_external(dir.path(), &[cam("a"), cam("b")]) {
            Err(Error::MissingRefined(id)) => assert_eq!(id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oracle_mode_recovers_target() {
        let cam = Camera::new(
            "p",
            [3.0, 3.0, 1.5, 1.0],
            (3, 2),
            nalgebra::Matrix3::identity(),
            nalgebra::Vector3::zeros(),
        )
        .unwrap();
        let j = target();
        let noisy = j.map(|v| 1.0 - v);
        let s = NoiseSchedule::default_with_steps(10).unwrap();
        let tj = j.clone();
        let out = refine_oracle(
            &[(cam, noisy)],
            &move |_, _| Ok(Box::new(CleanTargetDenoiser { target: tj.clone() }) as Box<dyn Denoiser>),
            &s,
            3,
        )
        .unwrap();
        assert!(out[0].image.max_abs_diff(&j) < 1e-6);
    }
}
