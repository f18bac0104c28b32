//! Binary little-endian PLY in the common splatting layout:
//! `x y z nx ny nz f_dc_0..2 f_rest_* opacity scale_0..2 rot_0..3`.
//!
//! `f_rest` is channel-major (`f_rest_{c * (K-1) + k}`), `opacity` is the
//! logit, `scale_*` are log-scales and `rot_*` is `w x y z`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::scene::GaussianCloud;
use crate::sh::degree_for_coeffs;

pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let k = cloud.coeffs_per_gaussian();
    let n_rest = 3 * (k - 1);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment active_sh_degree {}\n", cloud.active_sh_degree()));
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..n_rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    out.reserve(cloud.len() * names.len() * 4);
    let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        let sh = cloud.sh(i);
        cloud.positions[i].iter().for_each(|&v| push(v));
        (0..3).for_each(|_| push(0.0));
        sh[0].iter().for_each(|&v| push(v));
        for c in 0..3 {
            for coeff in &sh[1..] {
                push(coeff[c]);
            }
        }
        push(cloud.opacity_logits[i]);
        cloud.log_scales[i].iter().for_each(|&v| push(v));
        cloud.rotations[i].iter().for_each(|&v| push(v));
    }
    out
}

pub fn save_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_atomic(path, &encode_ply(cloud))
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
    U8,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            "uchar" | "uint8" => Some(Scalar::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
            Scalar::U8 => 1,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
            Scalar::U8 => b[0] as f64,
        }
    }
}

pub fn decode_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Ply("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Ply("non-utf8 header".into()))?;
    let body = &bytes[end + END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Ply("missing ply magic".into()));
    }
    let mut count = None;
    let mut active = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(Error::Ply(format!("unsupported format {other}"))),
            ["comment", "active_sh_degree", d] => active = d.parse::<usize>().ok(),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::Ply("bad vertex count".into()))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| Error::Ply(format!("unsupported type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(Error::Ply(format!("unexpected header line `{line}`"))),
        }
    }
    let n = count.ok_or_else(|| Error::Ply("no vertex element".into()))?;
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    if body.len() < n * stride {
        return Err(Error::Ply(format!(
            "body has {} bytes, expected {}",
            body.len(),
            n * stride
        )));
    }
    let find = |name: &str| -> Result<(usize, Scalar)> {
        let mut off = 0;
        for (p, s) in &props {
            if p == name {
                return Ok((off, *s));
            }
            off += s.size();
        }
        Err(Error::Ply(format!("missing property {name}")))
    };
    let n_rest = props.iter().filter(|(p, _)| p.starts_with("f_rest_")).count();
    if n_rest % 3 != 0 {
        return Err(Error::Ply(format!("{n_rest} f_rest properties is not a multiple of 3")));
    }
    let k = n_rest / 3 + 1;
    let max_degree =
        degree_for_coeffs(k).ok_or_else(|| Error::Ply(format!("{k} sh coefficients is not a supported degree")))?;

    let field = |names: &[String]| -> Result<Vec<(usize, Scalar)>> { names.iter().map(|s| find(s)).collect() };
    let pos = field(&["x".into(), "y".into(), "z".into()])?;
    let dc = field(&(0..3).map(|i| format!("f_dc_{i}")).collect::<Vec<_>>())?;
    let rest = field(&(0..n_rest).map(|i| format!("f_rest_{i}")).collect::<Vec<_>>())?;
    let opa = find("opacity")?;
    let scale = field(&(0..3).map(|i| format!("scale_{i}")).collect::<Vec<_>>())?;
    let rot = field(&(0..4).map(|i| format!("rot_{i}")).collect::<Vec<_>>())?;

    let mut cloud = GaussianCloud::new(max_degree);
    for i in 0..n {
        let row = &body[i * stride..(i + 1) * stride];
        let get = |(off, s): (usize, Scalar)| s.read(&row[off..]);
        cloud.positions.push([get(pos[0]), get(pos[1]), get(pos[2])]);
        cloud
            .rotations
            .push([get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3])]);
        cloud.log_scales.push([get(scale[0]), get(scale[1]), get(scale[2])]);
        cloud.opacity_logits.push(get(opa));
        cloud.sh_coeffs.push([get(dc[0]), get(dc[1]), get(dc[2])]);
        for j in 0..k - 1 {
            cloud
                .sh_coeffs
                .push([get(rest[j]), get(rest[(k - 1) + j]), get(rest[2 * (k - 1) + j])]);
        }
    }
    cloud.set_active_sh_degree(active.unwrap_or(max_degree));
    Ok(cloud)
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    decode_ply(&read_bytes(path)?).map_err(|e| match e {
        Error::Ply(msg) => Error::Ply(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianParams;

    fn sample_cloud(degree: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new(degree);
        let k = (degree + 1) * (degree + 1);
        for i in 0..5 {
            let f = i as f64;
            c.push(&GaussianParams {
                position: [f, -f * 0.5, 2.0 + f],
                rotation: [0.9, 0.1 * f, -0.2, 0.3],
                log_scale: [-1.0, -2.0 + 0.1 * f, -1.5],
                opacity_logit: 0.25 * f - 0.5,
                sh: (0..k).map(|j| [j as f64 * 0.125, -f * 0.25, 0.5]).collect(),
            });
        }
        c.set_active_sh_degree(degree.saturating_sub(1));
        c
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        for degree in [0, 3, 4] {
            let cloud = sample_cloud(degree);
            let bytes = encode_ply(&cloud);
            let back = decode_ply(&bytes).unwrap();
            assert_eq!(back.len(), cloud.len());
            assert_eq!(back.max_sh_degree(), degree);
            assert_eq!(back.active_sh_degree(), cloud.active_sh_degree());
            // values above are exactly representable in f32
            assert_eq!(back.sh_coeffs, cloud.sh_coeffs);
            assert_eq!(back.positions, cloud.positions);
            assert_eq!(encode_ply(&back), bytes);
        }
    }

    #[test]
    fn header_counts_properties() {
        let bytes = encode_ply(&sample_cloud(4));
        let end = bytes.windows(10).position(|w| w == b"end_header").unwrap();
        let text = String::from_utf8_lossy(&bytes[..end]);
        assert!(text.contains("element vertex 5"));
        assert!(text.contains("property float f_rest_71"));
        assert!(!text.contains("f_rest_72"));
    }

    #[test]
    fn truncated_body_is_rejected() {
        let bytes = encode_ply(&sample_cloud(1));
        assert!(decode_ply(&bytes[..bytes.len() - 3]).is_err());
    }
}
