use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsesplat::camera::{Camera, CameraRecord};
use sparsesplat::ply::{load_ply, save_ply};
use sparsesplat::raster::{rasterize, RenderSettings};
use sparsesplat::synthetic::{random_cloud, RandomCloudSpec};
use sparsesplat_ffi::*;

const ROTATION: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ss_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn camera(w: usize, h: usize) -> *mut SsCamera {
    let id = CString::new("cam").unwrap();
    let k = [40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0];
    let mut cam = ptr::null_mut();
    let s = unsafe {
        ss_camera_new(
            id.as_ptr(),
            k.as_ptr(),
            w,
            h,
            ROTATION.as_ptr(),
            [0.0; 3].as_ptr(),
            &mut cam,
        )
    };
    assert_eq!(s, SsStatus::Ok);
    cam
}

fn saved_cloud(dir: &Path) -> PathBuf {
    let cloud = random_cloud(&mut ChaCha8Rng::seed_from_u64(1), 25, &RandomCloudSpec::default());
    let path = dir.join("cloud.ply");
    save_ply(&path, &cloud).unwrap();
    path
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(ss_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn render_through_handles_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_cloud(dir.path());
    let mut cloud = ptr::null_mut();
    assert_eq!(
        unsafe { ss_cloud_load_ply(cstr(&path).as_ptr(), &mut cloud) },
        SsStatus::Ok
    );
    assert_eq!(unsafe { ss_cloud_len(cloud) }, 25);
    let cam = camera(24, 20);
    let mut render = ptr::null_mut();
    assert_eq!(unsafe { ss_render(cloud, cam, false, &mut render) }, SsStatus::Ok);
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { ss_render_size(render, &mut w, &mut h) }, SsStatus::Ok);
    assert_eq!((w, h), (24, 20));

    let mut color = vec![0.0; w * h * 3];
    let mut track = vec![0.0; w * h];
    let mut trans = vec![0.0; w * h];
    unsafe {
        assert_eq!(
            ss_render_copy(render, SsLayer::Color, color.as_mut_ptr(), color.len()),
            SsStatus::Ok
        );
        assert_eq!(
            ss_render_copy(render, SsLayer::Track, track.as_mut_ptr(), track.len()),
            SsStatus::Ok
        );
        assert_eq!(
            ss_render_copy(render, SsLayer::Transmittance, trans.as_mut_ptr(), trans.len()),
            SsStatus::Ok
        );
    }
    let direct_cam = Camera::try_from(CameraRecord {
        id: "cam".into(),
        fx: 40.0,
        fy: 40.0,
        cx: 12.0,
        cy: 10.0,
        width: 24,
        height: 20,
        rotation: ROTATION,
        translation: [0.0; 3],
    })
    .unwrap();
    let direct = rasterize(&load_ply(&path).unwrap(), &direct_cam, &RenderSettings::default()).unwrap();
    assert_eq!(color, direct.color.data());
    assert_eq!(track, direct.track.data());
    assert!(track.iter().zip(&trans).all(|(s, t)| (s + t - 1.0).abs() < 1e-12));

    let mut short = vec![0.0; 5];
    assert_eq!(
        unsafe { ss_render_copy(render, SsLayer::Depth, short.as_mut_ptr(), short.len()) },
        SsStatus::ShapeMismatch
    );
    let out = dir.path().join("copy.ply");
    assert_eq!(unsafe { ss_cloud_save_ply(cloud, cstr(&out).as_ptr()) }, SsStatus::Ok);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&path).unwrap());
    unsafe {
        ss_render_free(render);
        ss_camera_free(cam);
        ss_cloud_free(cloud);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cloud = ptr::null_mut();
    let missing = cstr(&dir.path().join("missing.ply"));
    assert_eq!(unsafe { ss_cloud_load_ply(missing.as_ptr(), &mut cloud) }, SsStatus::Io);
    assert!(last_error().contains("missing.ply"));
    assert!(cloud.is_null());

    let junk = dir.path().join("junk.ply");
    std::fs::write(&junk, b"not a ply").unwrap();
    assert_eq!(
        unsafe { ss_cloud_load_ply(cstr(&junk).as_ptr(), &mut cloud) },
        SsStatus::Format
    );

    assert_eq!(
        unsafe { ss_cloud_load_ply(ptr::null(), &mut cloud) },
        SsStatus::NullPointer
    );
    assert_eq!(last_error(), "null pointer: path");
    assert_eq!(
        unsafe { ss_render(ptr::null(), ptr::null(), false, ptr::null_mut()) },
        SsStatus::NullPointer
    );

    let id = CString::new("bad").unwrap();
    let mut cam = ptr::null_mut();
    let k = [-1.0, 40.0, 8.0, 8.0];
    let s = unsafe {
        ss_camera_new(
            id.as_ptr(),
            k.as_ptr(),
            16,
            16,
            ROTATION.as_ptr(),
            [0.0; 3].as_ptr(),
            &mut cam,
        )
    };
    assert_eq!(s, SsStatus::InvalidArgument);
    assert!(cam.is_null());
    unsafe {
        ss_cloud_free(ptr::null_mut());
        ss_camera_free(ptr::null_mut());
        ss_render_free(ptr::null_mut());
    }
    assert_eq!(unsafe { ss_cloud_len(ptr::null()) }, 0);
}

#[test]
fn metrics_on_buffers() {
    let a: Vec<f64> = (0..16 * 16 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let (mut db, mut s) = (0.0, 0.0);
    unsafe {
        assert_eq!(ss_psnr(a.as_ptr(), a.as_ptr(), 16, 16, 3, 1.0, &mut db), SsStatus::Ok);
        assert_eq!(ss_ssim(a.as_ptr(), a.as_ptr(), 16, 16, 3, &mut s), SsStatus::Ok);
    }
    assert_eq!((db, s), (99.0, 1.0));
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    unsafe { ss_psnr(a.as_ptr(), b.as_ptr(), 16, 16, 3, 1.0, &mut db) };
    assert!((db - 20.0).abs() < 1e-9);
    let mut small = 0.0;
    assert_eq!(
        unsafe { ss_ssim(a.as_ptr(), a.as_ptr(), 4, 4, 3, &mut small) },
        SsStatus::ShapeMismatch
    );

    let d: Vec<f64> = (0..64).map(|i| 1.0 + (i as f64 * 0.7).sin().abs()).collect();
    let e: Vec<f64> = d.iter().map(|v| 10.0 * v - 5.0).collect();
    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
    let (mut l1, mut l2, mut flag) = (1.0, 0.0, true);
    let valid = [1u8; 64];
    unsafe {
        assert_eq!(
            ss_pearson_depth_loss(d.as_ptr(), e.as_ptr(), ptr::null(), 8, 8, &mut l1, &mut flag),
            SsStatus::Ok
        );
        assert_eq!(
            ss_pearson_depth_loss(d.as_ptr(), neg.as_ptr(), valid.as_ptr(), 8, 8, &mut l2, ptr::null_mut()),
            SsStatus::Ok
        );
    }
    assert!(!flag);
    // the epsilon in the denominator bounds the affine residual
    assert!(l1.abs() < 1e-6);
    assert!((l2 - 2.0).abs() < 1e-6);
    let none = [0u8; 64];
    assert_eq!(
        unsafe { ss_pearson_depth_loss(d.as_ptr(), e.as_ptr(), none.as_ptr(), 8, 8, &mut l1, &mut flag) },
        SsStatus::Ok
    );
    assert_eq!((l1, flag), (0.0, true));
    assert_eq!(
        unsafe { ss_pearson_depth_loss(d.as_ptr(), e.as_ptr(), none.as_ptr(), 4, 4, &mut l1, &mut flag) },
        SsStatus::Ok
    );
    let flat = [0.0; 64];
    assert_eq!(
        unsafe { ss_pearson_depth_loss(flat.as_ptr(), e.as_ptr(), ptr::null(), 8, 8, ptr::null_mut(), &mut flag) },
        SsStatus::NullPointer
    );
}

#[test]
fn errors_are_per_thread() {
    unsafe { ss_cloud_load_ply(ptr::null(), &mut ptr::null_mut()) };
    let other = std::thread::spawn(last_error).join().unwrap();
    assert_eq!(other, "");
    assert_eq!(last_error(), "null pointer: path");
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sparsesplat.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert_eq!(exports.len(), 15);
    for name in exports {
        assert!(text.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let dir = tempfile::tempdir().unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sparsesplat.h\"\nint main(void) { SsCloud *c = NULL; SsStatus s = ss_cloud_load_ply(\"x\", &c);\n  return s == SS_STATUS_OK ? 1 : (int)ss_cloud_len(c); }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++", "-std=c++11"][..])] {
        let out = Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(&include)
            .arg(&src)
            .output()
            .unwrap_or_else(|e| panic!("{compiler} unavailable: {e}"));
        assert!(
            out.status.success(),
            "{compiler}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
