//! File formats: `.f32raster`, 8-bit PNG and JSON, all written atomically.
//!
//! `.f32raster` layout (all little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"F32R"`                         |
//! | 4      | 4    | width (u32)                             |
//! | 8      | 4    | height (u32)                            |
//! | 12     | 4    | channels (u32)                          |
//! | 16     | 4·whc| f32 samples, row-major, channels interleaved |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

pub const F32R_MAGIC: &[u8; 4] = b"F32R";
const F32R_HEADER: usize = 16;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn encode_f32raster(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(F32R_HEADER + 4 * img.data().len());
    out.extend_from_slice(F32R_MAGIC);
    for v in [img.width(), img.height(), img.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a `.f32raster` buffer; `path` is only used for error messages.
pub fn decode_f32raster(bytes: &[u8], path: &Path) -> Result<Image> {
    let header = |reason: &str| Error::Header {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < F32R_HEADER {
        return Err(header("truncated header"));
    }
    if &bytes[..4] != F32R_MAGIC {
        return Err(header("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(4), word(8), word(12));
    if w == 0 || h == 0 || c == 0 {
        return Err(header("zero dimension"));
    }
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| header("dimension overflow"))?;
    if bytes.len() != F32R_HEADER + 4 * count {
        return Err(header(&format!(
            "payload is {} bytes, expected {}",
            bytes.len() - F32R_HEADER,
            4 * count
        )));
    }
    let data = bytes[F32R_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Image::from_vec(w, h, c, data)
}

pub fn load_f32raster(path: &Path) -> Result<Image> {
    decode_f32raster(&read_bytes(path)?, path)
}

pub fn save_f32raster(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_f32raster(img))
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a 1- or 3-channel image in [0,1] as 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                reason: format!("unsupported channel count {c}"),
            })
        }
    };
    let mut buf = Vec::new();
    image::ImageEncoder::write_image(image::codecs::png::PngEncoder::new(&mut buf), &bytes, w, h, color).map_err(
        |e| Error::Png {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
    )?;
    write_atomic(path, &buf)
}

/// Loads a PNG as a 3-channel image in [0,1].
pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Png {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

/// Loads an RGB image from either `.png` or `.f32raster`.
pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = if is_png(path) {
        load_png(path)?
    } else {
        load_f32raster(path)?
    };
    if img.channels() != 3 {
        return Err(Error::Payload {
            path: path.to_path_buf(),
            reason: format!("expected 3 channels, found {}", img.channels()),
        });
    }
    Ok(img)
}

pub fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Rounds samples to the precision a file of this kind stores.
pub fn quantize_like(img: &Image, path: &Path) -> Image {
    if is_png(path) {
        img.map(|v| to_u8(v) as f64 / 255.0)
    } else {
        img.map(|v| v as f32 as f64)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_raster_is_a_header_error() {
        let img = Image::filled(2, 2, 1, 5.0);
        let bytes = encode_f32raster(&img);
        for cut in [3, 10, bytes.len() - 1] {
            let err = decode_f32raster(&bytes[..cut], Path::new("t")).unwrap_err();
            assert!(matches!(err, Error::Header { .. }), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_f32raster(&bad, Path::new("t")),
            Err(Error::Header { .. })
        ));
    }

    proptest! {
        #[test]
        fn raster_bytes_round_trip(w in 1usize..6, h in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
            let data: Vec<f64> = (0..w * h * c)
                .map(|i| ((seed.wrapping_add(i as u64 * 7919) % 100_003) as f64 / 777.0 - 50.0) as f32 as f64)
                .collect();
            let img = Image::from_vec(w, h, c, data).unwrap();
            let bytes = encode_f32raster(&img);
            let back = decode_f32raster(&bytes, Path::new("t")).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(encode_f32raster(&back), bytes);
        }
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_vec(2, 1, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        save_png(&p, &img).unwrap();
        let back = load_rgb(&p).unwrap();
        assert_eq!(back, quantize_like(&img, &p));
    }
}
