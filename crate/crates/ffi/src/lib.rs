//! C ABI over the `sparsesplat` engine.
//!
//! Every fallible function returns an [`SsStatus`]; results come back through
//! out-pointers. On failure the calling thread's message is available from
//! [`ss_last_error_message`]. Objects are opaque handles released with the
//! matching `*_free` function. Images cross the boundary as interleaved,
//! row-major `double` buffers.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sparsesplat::camera::{Camera, CameraRecord};
use sparsesplat::image::{Image, Mask};
use sparsesplat::losses::pearson_depth_loss;
use sparsesplat::metrics::{psnr, ssim};
use sparsesplat::ply::{load_ply, save_ply};
use sparsesplat::raster::{rasterize, RasterOutput, RenderSettings};
use sparsesplat::{Error, GaussianCloud};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    Panic = 7,
}

/// Layer selector for [`ss_render_copy`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsLayer {
    /// 3 channels.
    Color = 0,
    /// 1 channel, composited Euclidean depth.
    Depth = 1,
    /// 1 channel, accumulated opacity.
    Track = 2,
    /// 1 channel, `1 - track`.
    Transmittance = 3,
}

/// A Gaussian cloud.
pub struct SsCloud(GaussianCloud);

/// A pinhole camera.
pub struct SsCamera(Camera);

/// Color, depth, track and transmittance of one render.
pub struct SsRender(RasterOutput);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> SsStatus {
    match e {
        Error::ShapeMismatch(_) | Error::WindowTooLarge { .. } => SsStatus::ShapeMismatch,
        Error::Io { .. } => SsStatus::Io,
        Error::Header { .. } | Error::Payload { .. } | Error::Ply(_) | Error::Json { .. } | Error::Png { .. } => {
            SsStatus::Format
        }
        Error::DegenerateRotation | Error::EmptyMask | Error::NonFiniteLoss { .. } => SsStatus::Numerical,
        _ => SsStatus::InvalidArgument,
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SsStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            SsStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown".into());
            set_error(format!("panic: {msg}"));
            SsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Utf8(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn image(
    p: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    what: &'static str,
) -> Result<Image, Failure> {
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Failure::Core(Error::InvalidArgument(format!("{what}: dimensions overflow"))))?;
    Ok(Image::from_vec(width, height, channels, slice(p, n, what)?.to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a cloud from a PLY file.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_load_ply(path: *const c_char, out: *mut *mut SsCloud) -> SsStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let cloud = load_ply(&path)?;
        put(out, Box::into_raw(Box::new(SsCloud(cloud))), "out")
    })
}

/// Writes a cloud as a PLY file (atomically).
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_save_ply(cloud: *const SsCloud, path: *const c_char) -> SsStatus {
    guard(|| {
        let cloud = deref(cloud, "cloud")?;
        let path = PathBuf::from(string(path, "path")?);
        Ok(save_ply(&path, &cloud.0)?)
    })
}

/// Number of Gaussians; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ss_cloud_len(cloud: *const SsCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn ss_cloud_free(cloud: *mut SsCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Builds a camera. `intrinsics` is `[fx, fy, cx, cy]` in pixels; `rotation`
/// is the 3x3 world-to-camera matrix, row-major; `translation` has 3 entries.
#[no_mangle]
pub unsafe extern "C" fn ss_camera_new(
    id: *const c_char,
    intrinsics: *const f64,
    width: usize,
    height: usize,
    rotation: *const f64,
    translation: *const f64,
    out: *mut *mut SsCamera,
) -> SsStatus {
    guard(|| {
        let k = slice(intrinsics, 4, "intrinsics")?;
        let record = CameraRecord {
            id: string(id, "id")?,
            fx: k[0],
            fy: k[1],
            cx: k[2],
            cy: k[3],
            width,
            height,
            rotation: slice(rotation, 9, "rotation")?.try_into().expect("length checked"),
            translation: slice(translation, 3, "translation")?
                .try_into()
                .expect("length checked"),
        };
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let camera = Camera::try_from(record)?;
        put(out, Box::into_raw(Box::new(SsCamera(camera))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn ss_camera_free(camera: *mut SsCamera) {
    if !camera.is_null() {
        drop(Box::from_raw(camera));
    }
}

/// Renders `cloud` from `camera` with default thresholds on a black
/// background. Nonzero `normalize_depth` divides depth by track.
#[no_mangle]
pub unsafe extern "C" fn ss_render(
    cloud: *const SsCloud,
    camera: *const SsCamera,
    normalize_depth: bool,
    out: *mut *mut SsRender,
) -> SsStatus {
    guard(|| {
        let cloud = deref(cloud, "cloud")?;
        let camera = deref(camera, "camera")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let settings = RenderSettings {
            normalize_depth,
            ..RenderSettings::default()
        };
        let r = rasterize(&cloud.0, &camera.0, &settings)?;
        put(out, Box::into_raw(Box::new(SsRender(r))), "out")
    })
}

/// Width and height of a render in pixels.
#[no_mangle]
pub unsafe extern "C" fn ss_render_size(render: *const SsRender, width: *mut usize, height: *mut usize) -> SsStatus {
    guard(|| {
        let r = deref(render, "render")?;
        put(width, r.0.color.width(), "width")?;
        put(height, r.0.color.height(), "height")
    })
}

/// Copies one layer into `buffer`, which must hold exactly
/// `width * height * channels` values.
#[no_mangle]
pub unsafe extern "C" fn ss_render_copy(
    render: *const SsRender,
    layer: SsLayer,
    buffer: *mut f64,
    len: usize,
) -> SsStatus {
    guard(|| {
        let r = &deref(render, "render")?.0;
        let src = match layer {
            SsLayer::Color => &r.color,
            SsLayer::Depth => &r.depth,
            SsLayer::Track => &r.track,
            SsLayer::Transmittance => &r.transmittance,
        };
        if len != src.data().len() {
            return Err(
                Error::ShapeMismatch(format!("buffer holds {len} values, layer has {}", src.data().len())).into(),
            );
        }
        if buffer.is_null() {
            return Err(Failure::Null("buffer"));
        }
        std::slice::from_raw_parts_mut(buffer, len).copy_from_slice(src.data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ss_render_free(render: *mut SsRender) {
    if !render.is_null() {
        drop(Box::from_raw(render));
    }
}

/// PSNR in dB between two images of the same shape, capped at 99.
#[no_mangle]
pub unsafe extern "C" fn ss_psnr(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    peak: f64,
    out_db: *mut f64,
) -> SsStatus {
    guard(|| {
        let a = image(a, width, height, channels, "a")?;
        let b = image(b, width, height, channels, "b")?;
        put(out_db, psnr(&a, &b, peak)?.db, "out_db")
    })
}

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5).
#[no_mangle]
pub unsafe extern "C" fn ss_ssim(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        let a = image(a, width, height, channels, "a")?;
        let b = image(b, width, height, channels, "b")?;
        put(out, ssim(&a, &b)?, "out")
    })
}

/// `1 - Pearson correlation` of two single-channel depth maps over the pixels
/// where `valid` is nonzero; a null `valid` selects every pixel. Fewer than two
/// selected pixels or a constant raster yields 0 and sets `*degenerate`
/// (which may be null).
#[no_mangle]
pub unsafe extern "C" fn ss_pearson_depth_loss(
    rendered: *const f64,
    estimated: *const f64,
    valid: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
    degenerate: *mut bool,
) -> SsStatus {
    guard(|| {
        let r = image(rendered, width, height, 1, "rendered")?;
        let e = image(estimated, width, height, 1, "estimated")?;
        let mask = if valid.is_null() {
            Mask::new(width, height, true)
        } else {
            Mask::from_vec(
                width,
                height,
                slice(valid, width * height, "valid")?.iter().map(|v| *v != 0).collect(),
            )?
        };
        let term = pearson_depth_loss(&r, &e, &mask)?;
        if !degenerate.is_null() {
            degenerate.write(term.degenerate);
        }
        put(out, term.value, "out")
    })
}
