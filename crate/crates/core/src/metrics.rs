//! Image-quality metrics and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

pub use crate::losses::ssim;

/// Reported in place of infinity when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    /// Decibels, at most [`PSNR_CAP`].
    pub db: f64,
    /// Mean squared error was exactly zero.
    pub exact: bool,
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    a.ensure_same_shape(b, "psnr")?;
    let n = a.data().len().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP,
            exact: true,
        });
    }
    Ok(Psnr {
        db: (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP),
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub camera: String,
    /// dB
    pub psnr: f64,
    pub psnr_exact: bool,
    /// dimensionless, in [-1, 1]
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    /// dB, mean over views
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// FNV-1a of the evaluated cloud file, hex.
    pub cloud_fingerprint: String,
    /// Wall-clock seconds; omitted unless requested so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
}

impl EvalReport {
    pub fn from_views(views: Vec<ViewMetrics>, cloud_fingerprint: String) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self {
            views,
            mean_psnr,
            mean_ssim,
            cloud_fingerprint,
            runtime_seconds: None,
        }
    }
}
