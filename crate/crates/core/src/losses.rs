//! Loss terms with analytic gradients with respect to rendered rasters.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) over valid window
//! positions only, with `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over
//! positions and channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PEARSON_EPS: f64 = 1e-8;
/// Variances at or below this mark a depth raster as degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable correlation of a `w x h` plane with the window.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-mode map back to `w x h`.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let m = map[y * ow + x];
            for j in 0..SSIM_WINDOW {
                rows[(y + j) * ow + x] += k[j] * m;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let m = rows[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * m;
            }
        }
    }
    out
}

fn check_window(a: &Image) -> Result<()> {
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::WindowTooLarge {
            width: a.width(),
            height: a.height(),
            window: SSIM_WINDOW,
        });
    }
    Ok(())
}

/// Mean SSIM and, if requested, its gradient with respect to `x`.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    x.ensure_same_shape(y, "ssim")?;
    check_window(x)?;
    let (w, h, nc) = (x.width(), x.height(), x.channels());
    let k = gaussian_kernel();
    let npos = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (npos * nc) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, nc));
    for c in 0..nc {
        let xs = x.channel(c).into_vec();
        let ys = y.channel(c).into_vec();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&xs, w, h, &k);
        let my = filter_valid(&ys, w, h, &k);
        let exx = filter_valid(&xx, w, h, &k);
        let eyy = filter_valid(&yy, w, h, &k);
        let exy = filter_valid(&xy, w, h, &k);
        let mut da = vec![0.0; npos];
        let mut db = vec![0.0; npos];
        let mut dc = vec![0.0; npos];
        for p in 0..npos {
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dmu = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                da[p] = ds_dmu - 2.0 * ux * ds_dvx - uy * ds_dcxy;
                db[p] = ds_dvx;
                dc[p] = ds_dcxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let a = filter_adjoint(&da, w, h, &k);
            let b = filter_adjoint(&db, w, h, &k);
            let cc = filter_adjoint(&dc, w, h, &k);
            for i in 0..w * h {
                g.data_mut()[i * nc + c] = norm * (a[i] + 2.0 * xs[i] * b[i] + ys[i] * cc[i]);
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean structural similarity. Identical inputs give exactly 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a == b {
        check_window(a)?;
        return Ok(1.0);
    }
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to the first argument.
pub fn ssim_with_grad(rendered: &Image, target: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(rendered, target, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// A scalar loss with its gradient with respect to one rendered raster.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Image,
}

impl LossTerm {
    pub fn zero(width: usize, height: usize, channels: usize) -> Self {
        Self {
            value: 0.0,
            grad: Image::new(width, height, channels),
        }
    }
}

/// `mean|r - t| + lambda_ssim * (1 - SSIM(r, t)) / 2`.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda_ssim: f64) -> Result<LossTerm> {
    rendered.ensure_same_shape(target, "photometric loss")?;
    if rendered == target {
        if lambda_ssim != 0.0 {
            check_window(rendered)?;
        }
        return Ok(LossTerm::zero(rendered.width(), rendered.height(), rendered.channels()));
    }
    let n = rendered.data().len() as f64;
    let mut l1 = 0.0;
    let mut grad = Image::new(rendered.width(), rendered.height(), rendered.channels());
    for ((g, r), t) in grad.data_mut().iter_mut().zip(rendered.data()).zip(target.data()) {
        let d = r - t;
        l1 += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    let mut value = l1 / n;
    if lambda_ssim != 0.0 {
        let (s, sg) = ssim_with_grad(rendered, target)?;
        value += lambda_ssim * (1.0 - s) / 2.0;
        for (g, d) in grad.data_mut().iter_mut().zip(sg.data()) {
            *g -= 0.5 * lambda_ssim * d;
        }
    }
    Ok(LossTerm { value, grad })
}

/// Pearson depth loss over a masked population.
#[derive(Debug, Clone, PartialEq)]
pub struct PearsonTerm {
    pub value: f64,
    pub grad: Image,
    /// Fewer than two pixels or a constant raster; value and gradient are zero.
    pub degenerate: bool,
}

/// `1 - Cov(r, e) / sqrt(Var(r) Var(e) + 1e-8)` over pixels where `valid`,
/// with the gradient with respect to `rendered`.
pub fn pearson_depth_loss(rendered: &Image, estimated: &Image, valid: &Mask) -> Result<PearsonTerm> {
    rendered.ensure_same_shape(estimated, "pearson loss")?;
    if rendered.channels() != 1 || valid.width() != rendered.width() || valid.height() != rendered.height() {
        return Err(Error::ShapeMismatch(
            "pearson loss expects single-channel rasters matching the mask".into(),
        ));
    }
    let mut grad = Image::new(rendered.width(), rendered.height(), 1);
    let idx: Vec<usize> = (0..valid.data().len()).filter(|&i| valid.data()[i]).collect();
    let degenerate = |grad| PearsonTerm {
        value: 0.0,
        grad,
        degenerate: true,
    };
    if idx.len() < 2 {
        return Ok(degenerate(grad));
    }
    let n = idx.len() as f64;
    let (r, e) = (rendered.data(), estimated.data());
    let mr = idx.iter().map(|&i| r[i]).sum::<f64>() / n;
    let me = idx.iter().map(|&i| e[i]).sum::<f64>() / n;
    let (mut cov, mut vr, mut ve) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (a, b) = (r[i] - mr, e[i] - me);
        cov += a * b;
        vr += a * a;
        ve += b * b;
    }
    cov /= n;
    vr /= n;
    ve /= n;
    if vr <= DEGENERATE_VARIANCE || ve <= DEGENERATE_VARIANCE {
        return Ok(degenerate(grad));
    }
    let q = vr * ve + PEARSON_EPS;
    let sq = q.sqrt();
    let g = grad.data_mut();
    for &i in &idx {
        let (a, b) = (r[i] - mr, e[i] - me);
        g[i] = -(b - cov * ve * a / q) / (n * sq);
    }
    Ok(PearsonTerm {
        value: 1.0 - cov / sq,
        grad,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Training-view color.
    pub lambda1: f64,
    /// Training-view depth.
    pub lambda2: f64,
    /// Pseudo-view depth.
    pub lambda3: f64,
    /// Pseudo-view color.
    pub lambda4: f64,
    /// D-SSIM weight inside both color terms.
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1.0,
            lambda3: 0.05,
            lambda4: 0.001,
            lambda_ssim: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda_ssim];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Raster gradients of the weighted total for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrads {
    pub color: Image,
    pub depth: Image,
}

/// Weighted total and its per-view raster gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_d: f64,
    pub l_dp: f64,
    pub l_cp: f64,
    pub total: f64,
    /// `L_dp` was dropped by the schedule.
    pub dp_inactive: bool,
    pub train: ViewGrads,
    /// Absent when there is no pseudo view this step.
    pub pseudo: Option<ViewGrads>,
}

/// Unweighted terms of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub color: LossTerm,
    pub depth: LossTerm,
    pub pseudo_depth: Option<LossTerm>,
    pub pseudo_color: Option<LossTerm>,
}

/// `lambda1 L_c + lambda2 L_d + lambda3 L_dp + lambda4 L_cp`, with `L_dp`
/// and its gradient forced to zero while `iteration < pseudo_depth_start`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, iteration: usize, pseudo_depth_start: usize) -> LossReport {
    let scaled = |t: &LossTerm, w: f64| t.grad.map(|g| g * w);
    let dp_inactive = iteration < pseudo_depth_start;
    let l_dp = match (&terms.pseudo_depth, dp_inactive) {
        (Some(t), false) => t.value,
        _ => 0.0,
    };
    let l_cp = terms.pseudo_color.as_ref().map_or(0.0, |t| t.value);
    let total = weights.lambda1 * terms.color.value
        + weights.lambda2 * terms.depth.value
        + weights.lambda3 * l_dp
        + weights.lambda4 * l_cp;
    let pseudo = match (&terms.pseudo_color, &terms.pseudo_depth) {
        (None, None) => None,
        (pc, pd) => {
            let shape_c = pc.as_ref().map(|t| &t.grad);
            let shape_d = pd.as_ref().map(|t| &t.grad);
            let color = match pc {
                Some(t) => scaled(t, weights.lambda4),
                None => {
                    let d = shape_d.expect("one term present");
                    Image::new(d.width(), d.height(), 3)
                }
            };
            let depth = match (pd, dp_inactive) {
                (Some(t), false) => scaled(t, weights.lambda3),
                _ => {
                    let c = shape_c.or(shape_d).expect("one term present");
                    Image::new(c.width(), c.height(), 1)
                }
            };
            Some(ViewGrads { color, depth })
        }
    };
    LossReport {
        l_c: terms.color.value,
        l_d: terms.depth.value,
        l_dp,
        l_cp,
        total,
        dp_inactive,
        train: ViewGrads {
            color: scaled(&terms.color, weights.lambda1),
            depth: scaled(&terms.depth, weights.lambda2),
        },
        pseudo,
    }
}

/// Pixels supporting depth supervision: covered (transmittance < 0.5) and valid in the prior.
pub fn depth_support(transmittance: &Image, prior_valid: &Mask) -> Mask {
    let data = transmittance
        .data()
        .iter()
        .zip(prior_valid.data())
        .map(|(t, v)| *v && *t < 0.5)
        .collect();
    Mask::from_vec(prior_valid.width(), prior_valid.height(), data).expect("shapes match")
}

impl From<PearsonTerm> for LossTerm {
    fn from(p: PearsonTerm) -> Self {
        LossTerm {
            value: p.value,
            grad: p.grad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Windowed SSIM evaluated directly with a dense 2D window.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let r = 5i64;
        let mut win = [[0.0; 11]; 11];
        let mut sum = 0.0;
        for (j, row) in win.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                let d2 = ((i as i64 - r).pow(2) + (j as i64 - r).pow(2)) as f64;
                *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                sum += *v;
            }
        }
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..a.channels() {
            for y in 0..=a.height() - 11 {
                for x in 0..=a.width() - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let w = win[j][i] / sum;
                            let p = a.get(x + i, y + j, c);
                            let q = b.get(x + i, y + j, c);
                            mx += w * p;
                            my += w * q;
                            sxx += w * p * p;
                            syy += w * q * q;
                            sxy += w * p * q;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    total += (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 17, 14, 3);
        let b = random_image(&mut rng, 17, 14, 3);
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_contrast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16, 1);
        let b = random_image(&mut rng, 16, 16, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let checker = Image::from_vec(16, 16, 1, (0..256).map(|i| ((i / 16 + i % 16) % 2) as f64).collect()).unwrap();
        let inv = checker.map(|v| 1.0 - v);
        let s = ssim(&checker, &inv).unwrap();
        assert!(s < 0.1);
        assert!((s - ssim_direct(&checker, &inv)).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(10, 20, 1);
        assert!(matches!(ssim(&a, &a), Err(Error::WindowTooLarge { .. })));
    }

    #[test]
    fn photometric_zero_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 16, 16, 3).map(|v| 0.2 + 0.6 * v);
        let z = photometric_loss(&a, &a, 0.2).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad.data().iter().all(|g| *g == 0.0));
        let shifted = a.map(|v| v + 0.1);
        let l1 = photometric_loss(&shifted, &a, 0.0).unwrap();
        assert!((l1.value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_image(&mut rng, 16, 16, 3);
        let t = random_image(&mut rng, 16, 16, 3);
        let an = photometric_loss(&r, &t, 0.2).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..r.data().len()).step_by(7) {
            let mut p = r.clone();
            p.data_mut()[i] += h;
            let mut m = r.clone();
            m.data_mut()[i] -= h;
            let fd = (photometric_loss(&p, &t, 0.2).unwrap().value - photometric_loss(&m, &t, 0.2).unwrap().value)
                / (2.0 * h);
            let g = an.grad.data()[i];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    /// Two-pass covariance and variance, computed independently of the loss.
    fn pearson_direct(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        1.0 - cov / (va * vb + 1e-8).sqrt()
    }

    fn raster(v: Vec<f64>, w: usize) -> Image {
        let h = v.len() / w;
        Image::from_vec(w, h, 1, v).unwrap()
    }

    #[test]
    fn pearson_affine_and_anticorrelation() {
        let d = raster((0..64).map(|i| 1.0 + (i as f64 * 0.37).sin().abs() * 5.0).collect(), 8);
        let all = Mask::new(8, 8, true);
        let e = d.map(|v| 2.0 * v + 3.0);
        assert!(pearson_depth_loss(&d, &e, &all).unwrap().value.abs() < 1e-6);
        let neg = d.map(|v| -v);
        assert!((pearson_depth_loss(&d, &neg, &all).unwrap().value - 2.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_matches_direct_formula_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a: Vec<f64> = (0..48).map(|_| rng.random_range(0.5..8.0)).collect();
            let b: Vec<f64> = (0..48).map(|_| rng.random_range(0.5..8.0)).collect();
            let valid = Mask::from_vec(8, 6, (0..48).map(|i| i % 5 != 0).collect()).unwrap();
            let (ra, rb) = (raster(a.clone(), 8), raster(b.clone(), 8));
            let t = pearson_depth_loss(&ra, &rb, &valid).unwrap();
            let pick = |v: &[f64]| (0..48).filter(|i| i % 5 != 0).map(|i| v[i]).collect::<Vec<_>>();
            assert!((t.value - pearson_direct(&pick(&a), &pick(&b))).abs() < 1e-10);
            for i in 0..48 {
                let h = 1e-6;
                let mut p = a.clone();
                p[i] += h;
                let mut m = a.clone();
                m[i] -= h;
                let fd = (pearson_direct(&pick(&p), &pick(&b)) - pearson_direct(&pick(&m), &pick(&b))) / (2.0 * h);
                assert!(
                    (fd - t.grad.data()[i]).abs() < 1e-7,
                    "{i}: {fd} vs {}",
                    t.grad.data()[i]
                );
            }
        }
    }

    #[test]
    fn pearson_degenerate_is_skipped() {
        let flat = Image::filled(4, 4, 1, 3.0);
        let other = raster((0..16).map(|i| i as f64).collect(), 4);
        let t = pearson_depth_loss(&flat, &other, &Mask::new(4, 4, true)).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.value, 0.0);
        let one = Mask::from_vec(4, 4, (0..16).map(|i| i == 3).collect()).unwrap();
        assert!(pearson_depth_loss(&other, &other, &one).unwrap().degenerate);
    }

    fn unit_terms(w: usize, h: usize) -> LossTerms {
        let t = |c| LossTerm {
            value: 1.0,
            grad: Image::filled(w, h, c, 1.0),
        };
        LossTerms {
            color: t(3),
            depth: t(1),
            pseudo_depth: Some(t(1)),
            pseudo_color: Some(t(3)),
        }
    }

    #[test]
    fn total_with_default_weights() {
        let r = total_loss(&unit_terms(2, 2), &LossWeights::default(), 2000, 2000);
        assert!((r.total - 1.551).abs() < 1e-12);
        let p = r.pseudo.unwrap();
        assert_eq!(p.depth.data()[0], 0.05);
        assert_eq!(p.color.data()[0], 0.001);
    }

    #[test]
    fn pseudo_depth_gated_before_start() {
        let mut terms = unit_terms(2, 2);
        terms.pseudo_depth.as_mut().unwrap().value = 7.0;
        let r = total_loss(&terms, &LossWeights::default(), 1999, 2000);
        assert_eq!(r.l_dp, 0.0);
        assert!((r.total - 1.501).abs() < 1e-12);
        assert!(r.pseudo.unwrap().depth.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_weights_annihilate() {
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda_ssim: 0.0,
        };
        let r = total_loss(&unit_terms(3, 2), &w, 5000, 2000);
        assert_eq!(r.total, 0.0);
        assert!(r
            .train
            .color
            .data()
            .iter()
            .chain(r.train.depth.data())
            .all(|g| *g == 0.0));
    }

    proptest! {
        #[test]
        fn pearson_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = raster((0..20).map(|_| rng.random_range(0.0..10.0)).collect(), 5);
            let b = raster((0..20).map(|_| rng.random_range(0.0..10.0)).collect(), 5);
            let m = Mask::new(5, 4, true);
            let ab = pearson_depth_loss(&a, &b, &m).unwrap().value;
            let ba = pearson_depth_loss(&b, &a, &m).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariance(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = raster((0..36).map(|_| rng.random_range(1.0..10.0)).collect(), 6);
            let m = Mask::new(6, 6, true);
            prop_assert!(pearson_depth_loss(&d, &d.map(|v| a * v + b), &m).unwrap().value < 1e-6);
        }

        #[test]
        fn photometric_is_non_negative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 12, 3);
            let b = random_image(&mut rng, 12, 12, 3);
            prop_assert!(photometric_loss(&a, &b, 0.2).unwrap().value >= 0.0);
        }

        #[test]
        fn total_gradient_is_linear(l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, l3 in 0.0f64..2.0, l4 in 0.0f64..2.0) {
            let w = LossWeights { lambda1: l1, lambda2: l2, lambda3: l3, lambda4: l4, lambda_ssim: 0.2 };
            let mut terms = unit_terms(2, 2);
            terms.color.grad.data_mut()[0] = 3.0;
            let r = total_loss(&terms, &w, 2500, 2000);
            prop_assert_eq!(r.train.color.data()[0], 3.0 * l1);
            prop_assert_eq!(r.train.depth.data()[0], l2);
            let p = r.pseudo.unwrap();
            prop_assert_eq!(p.depth.data()[0], l3);
            prop_assert_eq!(p.color.data()[0], l4);
        }
    }
}
