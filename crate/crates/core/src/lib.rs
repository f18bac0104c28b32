//! Sparse-view 3D Gaussian splatting: dense point-map initialization,
//! differentiable rasterization of color, depth and track, depth and
//! appearance regularization, and a pluggable diffusion sampler.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod camera;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod ply;
pub mod priors;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod synthetic;
pub mod train;

pub use camera::{make_pseudo_views, project_gaussian, Camera, PerturbAxis, ProjectedGaussian};
pub use error::{Error, Result};
pub use image::Image;
pub use losses::{pearson_depth_loss, photometric_loss, total_loss, LossReport, LossWeights};
pub use priors::{compute_rf_mask, rf_initialize, PointMapAsset, RfConfig};
pub use raster::{
    rasterize, rasterize_backward, rasterize_reference, CloudGrads, RasterGrads, RasterOutput, RenderPass,
    RenderSettings,
};
pub use scene::{build_covariance, GaussianCloud, GaussianParams};
pub use sh::eval_sh_color;
pub use train::{train, TrainConfig};
