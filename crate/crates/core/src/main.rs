use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use sparsesplat::camera::{load_cameras, make_pseudo_views, save_cameras, PerturbAxis};
use sparsesplat::diffusion::{
    refine_external, refine_oracle, CleanTargetDenoiser, Denoiser, NoiseSchedule, RefinedManifest,
};
use sparsesplat::error::{Error, Result};
use sparsesplat::image::Image;
use sparsesplat::io::{
    fnv1a, load_rgb, quantize_like, read_bytes, save_f32raster, save_png, write_atomic, write_json_atomic,
};
use sparsesplat::metrics::{psnr, ssim, EvalReport, ViewMetrics};
use sparsesplat::ply::{encode_ply, load_ply, save_ply};
use sparsesplat::priors::{load_asset_dir, load_depth, rf_initialize_default, PrimaryView, RfConfig};
use sparsesplat::raster::{rasterize, RenderSettings};
use sparsesplat::synthetic::{sanitize, SceneSpec, SyntheticScene};
use sparsesplat::train::{train, LogRecord, OptimState, PseudoView, TrainConfig, TrainObserver, TrainView};
use sparsesplat::GaussianCloud;

#[derive(Parser)]
#[command(
    name = "sparsesplat",
    version,
    about = "Sparse-view Gaussian splatting reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Primary {
    First,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineMode {
    External,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Up,
    Right,
    Forward,
}

#[derive(Subcommand)]
enum Command {
    /// Seed a cloud from point-map assets.
    Init {
        #[arg(long)]
        assets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        conf_threshold: f64,
        #[arg(long, value_enum, default_value_t = Primary::First)]
        primary_view: Primary,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Opacity of seeded Gaussians.
        #[arg(long, default_value_t = RfConfig::default().seed_opacity)]
        seed_opacity: f64,
    },
    /// Optimize a cloud against training views and pseudo-view priors.
    Train {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        assets: PathBuf,
        /// Pseudo-view directory; omit to train without pseudo views.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render color, depth and track for every camera.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a cloud against held-out reference images.
    Eval {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        test_views: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Include wall-clock runtime in the report.
        #[arg(long)]
        runtime: bool,
    },
    /// Derive pseudo cameras by rotating training cameras about their own axes.
    PseudoCams {
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        angle: f64,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "up")]
        axes: Vec<Axis>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect refined pseudo-view images.
    Refine {
        #[arg(long, value_enum)]
        mode: RefineMode,
        /// Pseudo cameras.
        #[arg(long)]
        cameras: PathBuf,
        /// External mode: directory holding `refined.json`. Oracle mode: output directory.
        #[arg(long)]
        dir: PathBuf,
        /// Oracle mode: cloud whose renders serve as clean targets.
        #[arg(long)]
        target_cloud: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic scene with exact priors.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        gaussians: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Init {
            assets,
            out,
            conf_threshold,
            primary_view,
            seed,
            seed_opacity,
        } => {
            let views = load_asset_dir(&assets)?;
            let cfg = RfConfig {
                confidence_threshold: conf_threshold,
                primary: match primary_view {
                    Primary::First => PrimaryView::First,
                    Primary::Random => PrimaryView::Random { seed },
                },
                seed_opacity,
                ..RfConfig::default()
            };
            let report = rf_initialize_default(&views, &cfg)?;
            save_ply(&out, &report.cloud)?;
            eprintln!("seeded {} gaussians (per view: {:?})", report.cloud.len(), report.added);
            Ok(())
        }
        Command::Train {
            cloud,
            assets,
            pseudo,
            config,
            out,
            seed,
            iterations,
        } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => sparsesplat::io::read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let cloud = load_ply(&cloud)?;
            let views = load_train_views(&assets)?;
            let pseudo_views = match &pseudo {
                Some(dir) => load_pseudo_views(dir)?,
                None => Vec::new(),
            };
            mkdir(&out)?;
            write_json_atomic(&out.join("config.json"), &cfg)?;
            let mut obs = RunObserver::new(&out)?;
            let result = train(cloud, &views, &pseudo_views, &cfg, &mut obs);
            obs.flush()?;
            let result = result?;
            save_ply(&out.join("cloud.ply"), &result.cloud)?;
            Ok(())
        }
        Command::Render { cloud, cameras, out } => {
            let cloud = load_ply(&cloud)?;
            let cams = load_cameras(&cameras)?;
            mkdir(&out)?;
            for cam in &cams {
                let r = rasterize(&cloud, cam, &RenderSettings::default())?;
                let stem = sanitize(&cam.id);
                save_png(&out.join(format!("{stem}.png")), &r.color)?;
                save_f32raster(&out.join(format!("{stem}_depth.f32raster")), &r.depth)?;
                save_f32raster(&out.join(format!("{stem}_track.f32raster")), &r.track)?;
            }
            Ok(())
        }
        Command::Eval {
            cloud,
            test_views,
            report,
            runtime,
        } => {
            let start = Instant::now();
            let bytes = read_bytes(&cloud)?;
            let fingerprint = format!("{:016x}", fnv1a(&bytes));
            let cloud = sparsesplat::ply::decode_ply(&bytes)?;
            let cams = load_cameras(&test_views.join("cameras.json"))?;
            let mut views = Vec::new();
            for cam in &cams {
                let path = reference_image(&test_views, &cam.id)?;
                let reference = load_rgb(&path)?;
                let rendered = quantize_like(&rasterize(&cloud, cam, &RenderSettings::default())?.color, &path);
                let p = psnr(&rendered, &reference, 1.0)?;
                views.push(ViewMetrics {
                    camera: cam.id.clone(),
                    psnr: p.db,
                    psnr_exact: p.exact,
                    ssim: ssim(&rendered, &reference)?,
                });
            }
            let mut r = EvalReport::from_views(views, fingerprint);
            if runtime {
                r.runtime_seconds = Some(start.elapsed().as_secs_f64());
            }
            write_json_atomic(&report, &r)?;
            Ok(())
        }
        Command::PseudoCams {
            cameras,
            angle,
            axes,
            out,
        } => {
            let cams = load_cameras(&cameras)?;
            let axes: Vec<PerturbAxis> = axes
                .into_iter()
                .map(|a| match a {
                    Axis::Up => PerturbAxis::Up,
                    Axis::Right => PerturbAxis::Right,
                    Axis::Forward => PerturbAxis::Forward,
                })
                .collect();
            save_cameras(&out, &make_pseudo_views(&cams, angle, &axes)?)
        }
        Command::Refine {
            mode,
            cameras,
            dir,
            target_cloud,
            steps,
            seed,
        } => {
            let cams = load_cameras(&cameras)?;
            match mode {
                RefineMode::External => {
                    let assets = refine_external(&dir, &cams)?;
                    eprintln!("{} refined views verified", assets.len());
                    Ok(())
                }
                RefineMode::Oracle => {
                    let target = target_cloud
                        .ok_or_else(|| Error::InvalidArgument("oracle mode needs --target-cloud".into()))?;
                    let target = load_ply(&target)?;
                    let schedule = NoiseSchedule::default_with_steps(steps)?;
                    let rendered = cams
                        .iter()
                        .map(|c| Ok((c.clone(), rasterize(&target, c, &RenderSettings::default())?.color)))
                        .collect::<Result<Vec<(_, Image)>>>()?;
                    let make = |_: &sparsesplat::Camera, img: &Image| {
                        Ok(Box::new(CleanTargetDenoiser { target: img.clone() }) as Box<dyn Denoiser>)
                    };
                    let refined = refine_oracle(&rendered, &make, &schedule, seed)?;
                    mkdir(&dir)?;
                    let mut manifest = RefinedManifest::default();
                    for r in &refined {
                        let name = format!("{}.f32raster", sanitize(&r.camera_id));
                        save_f32raster(&dir.join(&name), &r.image)?;
                        manifest.images.insert(r.camera_id.clone(), name);
                    }
                    write_json_atomic(&dir.join("refined.json"), &manifest)
                }
            }
        }
        Command::Synth {
            out,
            seed,
            gaussians,
            size,
        } => {
            let spec = SceneSpec {
                seed,
                gaussians,
                width: size,
                height: size,
                focal: size as f64 * 50.0 / 48.0,
                ..SceneSpec::default()
            };
            mkdir(&out)?;
            SyntheticScene::generate(&spec)?.write(&out)
        }
    }
}

fn reference_image(dir: &Path, id: &str) -> Result<PathBuf> {
    let stem = sanitize(id);
    for ext in ["png", "f32raster"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no reference image for camera `{id}` in {}",
        dir.display()
    )))
}

fn optional_depth(dir: &Path, id: &str) -> Result<Option<sparsesplat::priors::DepthAsset>> {
    let p = dir.join(format!("{}_prior.json", sanitize(id)));
    if p.is_file() {
        Ok(Some(load_depth(&p)?))
    } else {
        Ok(None)
    }
}

fn load_train_views(dir: &Path) -> Result<Vec<TrainView>> {
    load_asset_dir(dir)?
        .into_iter()
        .map(|a| {
            Ok(TrainView {
                depth: optional_depth(dir, &a.camera.id)?,
                image: a.rgb,
                camera: a.camera,
            })
        })
        .collect()
}

fn load_pseudo_views(dir: &Path) -> Result<Vec<PseudoView>> {
    let cams = load_cameras(&dir.join("cameras.json"))?;
    let refined = if dir.join("refined.json").is_file() {
        Some(refine_external(dir, &cams)?)
    } else {
        None
    };
    cams.into_iter()
        .enumerate()
        .map(|(i, cam)| {
            Ok(PseudoView {
                depth: optional_depth(dir, &cam.id)?,
                refined: refined.as_ref().map(|r| r[i].image.clone()),
                camera: cam,
            })
        })
        .collect()
}

/// Streams the loss log and writes checkpoints under the run directory.
struct RunObserver {
    dir: PathBuf,
    log: Vec<u8>,
}

impl RunObserver {
    fn new(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            log: Vec::new(),
        })
    }

    fn flush(&self) -> Result<()> {
        write_atomic(&self.dir.join("log.ndjson"), &self.log)
    }
}

#[derive(serde::Serialize)]
struct CheckpointMeta {
    iteration: usize,
    gaussians: usize,
    adam_step: u64,
    active_sh_degree: usize,
}

impl TrainObserver for RunObserver {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, record).expect("log records serialize");
        self.log.push(b'\n');
        Ok(())
    }

    fn checkpoint(&mut self, iteration: usize, cloud: &GaussianCloud, state: &OptimState) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        mkdir(&dir)?;
        write_atomic(&dir.join(format!("iter_{iteration:06}.ply")), &encode_ply(cloud))?;
        write_json_atomic(
            &dir.join(format!("iter_{iteration:06}.json")),
            &CheckpointMeta {
                iteration,
                gaussians: cloud.len(),
                adam_step: state.step,
                active_sh_degree: cloud.active_sh_degree(),
            },
        )?;
        self.flush()
    }

    fn abort(&mut self, iteration: usize, cloud: &GaussianCloud) -> Result<()> {
        save_ply(&self.dir.join(format!("nonfinite_{iteration:06}.ply")), cloud)?;
        self.flush()
    }
}
