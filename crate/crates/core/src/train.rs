//! Optimization loop: per-iteration view sampling, loss assembly, Adam
//! updates with per-attribute learning rates, densification, opacity resets
//! and SH-degree annealing.
//!
//! Iterations are numbered from 1. Events scheduled "at iteration k" fire
//! after the parameter update of step k.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    depth_support, pearson_depth_loss, photometric_loss, total_loss, LossTerm, LossTerms, LossWeights, ViewGrads,
};
use crate::priors::DepthAsset;
use crate::raster::{CloudGrads, RasterGrads, RasterOutput, RenderPass, RenderSettings};
use crate::scene::{logit, quat_to_matrix, sigmoid, GaussianCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lr_position: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub densify: bool,
    pub densify_from: usize,
    pub densify_interval: usize,
    /// Last iteration that may densify; `None` keeps densifying to the end.
    pub densify_until: Option<usize>,
    /// Mean screen-space position gradient norm, per pixel.
    pub grad_threshold: f64,
    /// Split/clone boundary as a fraction of the scene extent.
    pub scale_threshold_factor: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
    pub opacity_reset_iters: Vec<usize>,
    pub reset_value: f64,
    pub sh_increase_interval: usize,
    pub sh_max: usize,
    pub pseudo_depth_start: usize,
    pub weights: LossWeights,
    /// Depth losses compare track-normalized rendered depth.
    pub normalize_depth: bool,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub tile_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            seed: 0,
            lr_position: 0.00016,
            lr_sh: 0.0025,
            lr_opacity: 0.05,
            lr_scale: 0.005,
            lr_rotation: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-15,
            densify: true,
            densify_from: 500,
            densify_interval: 100,
            densify_until: None,
            grad_threshold: 0.0002,
            scale_threshold_factor: 0.01,
            split_factor: 1.6,
            prune_opacity: 0.005,
            opacity_reset_iters: vec![2000, 5000, 7000],
            reset_value: 0.05,
            sh_increase_interval: 500,
            sh_max: 4,
            pseudo_depth_start: 2000,
            weights: LossWeights::default(),
            normalize_depth: true,
            checkpoint_every: 0,
            tile_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        let rates = [
            self.lr_position,
            self.lr_sh,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.densify_interval == 0 || self.sh_increase_interval == 0 || self.tile_size == 0 {
            return bad("intervals and tile size must be positive");
        }
        if !(self.grad_threshold > 0.0 && self.scale_threshold_factor > 0.0 && self.split_factor > 0.0) {
            return bad("densification thresholds must be positive");
        }
        if !(self.reset_value > 0.0 && self.reset_value < 1.0) || !(0.0..1.0).contains(&self.prune_opacity) {
            return bad("opacities must lie in (0, 1)");
        }
        self.weights.validate()
    }
}

/// Active SH degree at `iteration`.
pub fn sh_schedule(iteration: usize, cfg: &TrainConfig) -> usize {
    (iteration / cfg.sh_increase_interval).min(cfg.sh_max)
}

/// Radius of the bounding sphere of the positions, centered at their centroid.
pub fn scene_extent(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() {
        return 0.0;
    }
    let n = cloud.len() as f64;
    let c = cloud
        .positions
        .iter()
        .fold(Vector3::zeros(), |a, p| a + Vector3::from(*p))
        / n;
    cloud
        .positions
        .iter()
        .map(|p| (Vector3::from(*p) - c).norm())
        .fold(0.0, f64::max)
}

/// Adam moments for one attribute, `width` scalars per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn new(width: usize, n: usize) -> Self {
        Self {
            width,
            m: vec![0.0; width * n],
            v: vec![0.0; width * n],
        }
    }

    fn extend_zeros(&mut self, count: usize) {
        self.m.resize(self.m.len() + count * self.width, 0.0);
        self.v.resize(self.v.len() + count * self.width, 0.0);
    }

    fn retain(&mut self, keep: &[bool]) {
        let w = self.width;
        let pick = |src: &[f64]| {
            keep.iter()
                .enumerate()
                .filter(|(_, k)| **k)
                .flat_map(|(i, _)| src[i * w..(i + 1) * w].iter().copied())
                .collect::<Vec<_>>()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    fn zero(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Optimizer and densification state; every array tracks the cloud size.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub position: Moments,
    pub rotation: Moments,
    pub scale: Moments,
    pub opacity: Moments,
    pub sh: Moments,
    /// Sum of view-space positional gradient norms since the last densification.
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
    pub last_position_grad: Vec<[f64; 3]>,
}

impl OptimState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            step: 0,
            position: Moments::new(3, n),
            rotation: Moments::new(4, n),
            scale: Moments::new(3, n),
            opacity: Moments::new(1, n),
            sh: Moments::new(3 * cloud.coeffs_per_gaussian(), n),
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            last_position_grad: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_accum.is_empty()
    }

    fn groups_mut(&mut self) -> [&mut Moments; 5] {
        [
            &mut self.position,
            &mut self.rotation,
            &mut self.scale,
            &mut self.opacity,
            &mut self.sh,
        ]
    }

    fn extend_zeros(&mut self, count: usize) {
        for g in self.groups_mut() {
            g.extend_zeros(count);
        }
        self.grad_accum.resize(self.grad_accum.len() + count, 0.0);
        self.grad_count.resize(self.grad_count.len() + count, 0);
        self.last_position_grad
            .resize(self.last_position_grad.len() + count, [0.0; 3]);
    }

    fn retain(&mut self, keep: &[bool]) {
        for g in self.groups_mut() {
            g.retain(keep);
        }
        let mut i = 0;
        self.grad_accum.retain(|_| (keep[i], i += 1).0);
        i = 0;
        self.grad_count.retain(|_| (keep[i], i += 1).0);
        i = 0;
        self.last_position_grad.retain(|_| (keep[i], i += 1).0);
    }

    /// Mean accumulated gradient norm per Gaussian (0 if never visible).
    pub fn mean_grads(&self) -> Vec<f64> {
        self.grad_accum
            .iter()
            .zip(&self.grad_count)
            .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
            .collect()
    }

    fn reset_stats(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

impl Adam {
    fn update(&self, lr: f64, params: &mut [f64], grads: &[f64], mom: &mut Moments) {
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut mom.m).zip(&mut mom.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / self.bc1;
            let vh = *v / self.bc2;
            *p -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One Adam step over every attribute.
pub fn adam_step(cloud: &mut GaussianCloud, grads: &CloudGrads, state: &mut OptimState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let adam = Adam {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        bc1: 1.0 - cfg.adam_beta1.powi(t),
        bc2: 1.0 - cfg.adam_beta2.powi(t),
    };
    adam.update(
        cfg.lr_position,
        cloud.positions.as_flattened_mut(),
        grads.positions.as_flattened(),
        &mut state.position,
    );
    adam.update(
        cfg.lr_rotation,
        cloud.rotations.as_flattened_mut(),
        grads.rotations.as_flattened(),
        &mut state.rotation,
    );
    adam.update(
        cfg.lr_scale,
        cloud.log_scales.as_flattened_mut(),
        grads.log_scales.as_flattened(),
        &mut state.scale,
    );
    adam.update(
        cfg.lr_opacity,
        &mut cloud.opacity_logits,
        &grads.opacity_logits,
        &mut state.opacity,
    );
    adam.update(
        cfg.lr_sh,
        cloud.sh_coeffs.as_flattened_mut(),
        grads.sh_coeffs.as_flattened(),
        &mut state.sh,
    );
    state.last_position_grad.copy_from_slice(&grads.positions);
}

/// Sets every opacity to `value` and clears the opacity moments.
pub fn reset_opacity(cloud: &mut GaussianCloud, state: Option<&mut OptimState>, value: f64) {
    let l = logit(value);
    cloud.opacity_logits.iter_mut().for_each(|o| *o = l);
    if let Some(s) = state {
        s.opacity.zero();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyCounts {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large Gaussians whose mean gradient exceeds the
/// threshold, then prunes near-transparent ones (keeping at least one).
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    state: &mut OptimState,
    grads: &[f64],
    scale_threshold: f64,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> DensifyCounts {
    assert_eq!(grads.len(), cloud.len());
    assert_eq!(state.len(), cloud.len());
    let n = cloud.len();
    let max_scale = |i: usize| cloud.scale(i).into_iter().fold(0.0, f64::max);
    let hot: Vec<bool> = grads.iter().map(|g| *g > cfg.grad_threshold).collect();
    let clone: Vec<usize> = (0..n).filter(|&i| hot[i] && max_scale(i) <= scale_threshold).collect();
    let split: Vec<usize> = (0..n).filter(|&i| hot[i] && max_scale(i) > scale_threshold).collect();

    for &i in &clone {
        let mut g = cloud.get(i);
        let pg = state.last_position_grad[i];
        for a in 0..3 {
            g.position[a] -= cfg.lr_position * sign(pg[a]);
        }
        cloud.push(&g);
    }
    let shrink = cfg.split_factor.ln();
    for &i in &split {
        let parent = cloud.get(i);
        let r = quat_to_matrix(&parent.rotation);
        let s = parent.log_scale.map(f64::exp);
        for _ in 0..2 {
            let z = Vector3::from_fn(|a, _| s[a] * rng.sample::<f64, _>(StandardNormal));
            let off = r * z;
            let mut child = parent.clone();
            for a in 0..3 {
                child.position[a] += off[a];
                child.log_scale[a] -= shrink;
            }
            cloud.push(&child);
        }
    }
    state.extend_zeros(clone.len() + 2 * split.len());

    let mut keep = vec![true; cloud.len()];
    for &i in &split {
        keep[i] = false;
    }
    let mut pruned = 0;
    for (i, k) in keep.iter_mut().enumerate() {
        if *k && cloud.opacity(i) < cfg.prune_opacity {
            *k = false;
            pruned += 1;
        }
    }
    if !keep.iter().any(|k| *k) && !cloud.is_empty() {
        let best = (0..cloud.len())
            .filter(|i| !split.contains(i))
            .max_by(|a, b| cloud.opacity_logits[*a].total_cmp(&cloud.opacity_logits[*b]))
            .expect("split children survive the split mask");
        keep[best] = true;
        pruned -= 1;
    }
    cloud.retain_mask(&keep);
    state.retain(&keep);
    state.reset_stats();
    DensifyCounts {
        cloned: clone.len(),
        split: split.len(),
        pruned,
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A training view with its reference image and optional depth prior.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: Image,
    pub depth: Option<DepthAsset>,
}

/// A pseudo view with optional depth prior and refined image.
#[derive(Debug, Clone)]
pub struct PseudoView {
    pub camera: Camera,
    pub depth: Option<DepthAsset>,
    pub refined: Option<Image>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainEvent {
    ShDegree {
        degree: usize,
    },
    Densify {
        cloned: usize,
        split: usize,
        pruned: usize,
        gaussians: usize,
    },
    OpacityReset {
        mean_opacity: f64,
    },
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub l_c: f64,
    pub l_d: f64,
    pub l_dp: f64,
    pub l_cp: f64,
    pub total: f64,
    pub gaussians: usize,
    pub sh_degree: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<TrainEvent>,
}

/// Receives log records and checkpoints as training proceeds.
pub trait TrainObserver {
    fn record(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _iteration: usize, _cloud: &GaussianCloud, _state: &OptimState) -> Result<()> {
        Ok(())
    }
    /// Called with the pre-update cloud when a loss turns non-finite.
    fn abort(&mut self, _iteration: usize, _cloud: &GaussianCloud) -> Result<()> {
        Ok(())
    }
}

pub struct NullObserver;

impl TrainObserver for NullObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub cloud: GaussianCloud,
    pub state: OptimState,
    pub log: Vec<LogRecord>,
}

fn depth_term(out: &RasterOutput, prior: Option<&DepthAsset>) -> Result<LossTerm> {
    let (w, h) = (out.depth.width(), out.depth.height());
    match prior {
        Some(p) => {
            let support = depth_support(&out.transmittance, &p.valid);
            let t = pearson_depth_loss(&out.depth, &p.depth, &support)?;
            Ok(t.into())
        }
        None => Ok(LossTerm::zero(w, h, 1)),
    }
}

fn raster_grads(g: &ViewGrads) -> RasterGrads {
    RasterGrads {
        color: g.color.clone(),
        depth: g.depth.clone(),
        track: Image::new(g.depth.width(), g.depth.height(), 1),
    }
}

/// Runs `cfg.iterations` optimization steps.
pub fn train(
    mut cloud: GaussianCloud,
    views: &[TrainView],
    pseudo: &[PseudoView],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot train an empty cloud".into()));
    }
    if views.is_empty() {
        return Err(Error::InvalidArgument("at least one training view is required".into()));
    }
    for v in views {
        if v.image.width() != v.camera.width || v.image.height() != v.camera.height || v.image.channels() != 3 {
            return Err(Error::ShapeMismatch(format!("training image for `{}`", v.camera.id)));
        }
    }
    let settings = RenderSettings {
        tile_size: cfg.tile_size,
        normalize_depth: cfg.normalize_depth,
        ..RenderSettings::default()
    };
    let scale_threshold = cfg.scale_threshold_factor * scene_extent(&cloud);
    let mut state = OptimState::new(&cloud);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations);
    let use_pseudo = !pseudo.is_empty() && (cfg.weights.lambda3 > 0.0 || cfg.weights.lambda4 > 0.0);
    let last_densify = cfg.densify_until.unwrap_or(usize::MAX);
    let mut sh_degree = sh_schedule(0, cfg).min(cloud.max_sh_degree());
    cloud.set_active_sh_degree(sh_degree);

    for it in 1..=cfg.iterations {
        let view = &views[(it - 1) % views.len()];
        let pass = RenderPass::new(&cloud, &view.camera, &settings)?;
        let out = pass.forward();
        let color = photometric_loss(&out.color, &view.image, cfg.weights.lambda_ssim)?;
        let depth = depth_term(&out, view.depth.as_ref())?;

        let mut pseudo_pass = None;
        let (mut pseudo_depth, mut pseudo_color) = (None, None);
        if use_pseudo {
            let pv = &pseudo[(it - 1) % pseudo.len()];
            let pp = RenderPass::new(&cloud, &pv.camera, &settings)?;
            let po = pp.forward();
            if let Some(r) = &pv.refined {
                pseudo_color = Some(photometric_loss(&po.color, r, cfg.weights.lambda_ssim)?);
            }
            if pv.depth.is_some() {
                pseudo_depth = Some(depth_term(&po, pv.depth.as_ref())?);
            }
            pseudo_pass = Some(pp);
        }
        let terms = LossTerms {
            color,
            depth,
            pseudo_depth,
            pseudo_color,
        };
        let report = total_loss(&terms, &cfg.weights, it, cfg.pseudo_depth_start);
        if !report.total.is_finite() {
            observer.abort(it, &cloud)?;
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!(
                    "L_c={} L_d={} L_dp={} L_cp={} with {} gaussians on view `{}`",
                    report.l_c,
                    report.l_d,
                    report.l_dp,
                    report.l_cp,
                    cloud.len(),
                    view.camera.id
                ),
            });
        }

        let mut grads = pass.backward(&raster_grads(&report.train))?;
        for i in 0..cloud.len() {
            if grads.visible[i] {
                let g = grads.mean2d_grad[i];
                state.grad_accum[i] += g[0].hypot(g[1]);
                state.grad_count[i] += 1;
            }
        }
        if let (Some(pp), Some(pg)) = (pseudo_pass, &report.pseudo) {
            grads.accumulate(&pp.backward(&raster_grads(pg))?);
        }
        adam_step(&mut cloud, &grads, &mut state, cfg);

        let mut events = Vec::new();
        let next_degree = sh_schedule(it, cfg).min(cloud.max_sh_degree());
        if next_degree != sh_degree {
            sh_degree = next_degree;
            cloud.set_active_sh_degree(sh_degree);
            events.push(TrainEvent::ShDegree { degree: sh_degree });
        }
        // structural edits on the final step would never be optimized
        let last = it == cfg.iterations;
        if cfg.densify && !last && it >= cfg.densify_from && it <= last_densify && it % cfg.densify_interval == 0 {
            let mean = state.mean_grads();
            let c = densify_and_prune(&mut cloud, &mut state, &mean, scale_threshold, cfg, &mut rng);
            events.push(TrainEvent::Densify {
                cloned: c.cloned,
                split: c.split,
                pruned: c.pruned,
                gaussians: cloud.len(),
            });
        }
        if !last && cfg.opacity_reset_iters.contains(&it) {
            reset_opacity(&mut cloud, Some(&mut state), cfg.reset_value);
            let mean = cloud.opacity_logits.iter().map(|l| sigmoid(*l)).sum::<f64>() / cloud.len() as f64;
            events.push(TrainEvent::OpacityReset { mean_opacity: mean });
        }

        let record = LogRecord {
            iteration: it,
            l_c: report.l_c,
            l_d: report.l_d,
            l_dp: report.l_dp,
            l_cp: report.l_cp,
            total: report.total,
            gaussians: cloud.len(),
            sh_degree,
            events,
        };
        observer.record(&record)?;
        log.push(record);
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            observer.checkpoint(it, &cloud, &state)?;
        }
    }
    Ok(TrainOutput { cloud, state, log })
}
