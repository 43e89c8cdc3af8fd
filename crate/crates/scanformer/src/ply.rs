//! Binary little-endian PLY for point clouds: `x y z` floats, optional
//! `red green blue` bytes and an optional `confidence` float.

use std::path::Path;

use scanformer_core::PointCloud;

use crate::error::{IoError, Result};

fn to_byte(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_bytes(cloud: &PointCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("element vertex {}\n", cloud.len());
    header += "property float x\nproperty float y\nproperty float z\n";
    if cloud.colors.is_some() {
        header += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    if cloud.confidences.is_some() {
        header += "property float confidence\n";
    }
    header += "end_header\n";
    let mut out = header.into_bytes();
    for i in 0..cloud.len() {
        for v in cloud.points[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(c) = &cloud.colors {
            out.extend(c[i].map(to_byte));
        }
        if let Some(c) = &cloud.confidences {
            out.extend_from_slice(&c[i].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<PointCloud> {
    const END: &[u8] = b"end_header\n";
    let end = bytes.windows(END.len()).position(|w| w == END).ok_or_else(|| IoError::Format("PLY header not terminated".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| IoError::Format("PLY header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(IoError::Format("not a binary little-endian PLY".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| IoError::Format("bad vertex count".into()))?),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            ["comment", ..] | [] => {}
            _ => return Err(IoError::Format(format!("unsupported PLY header line: {line}"))),
        }
    }
    let n = count.ok_or_else(|| IoError::Format("PLY has no vertex element".into()))?;
    let names: Vec<&str> = props.iter().map(|(_, n)| n.as_str()).collect();
    let has_color = match names.as_slice() {
        ["x", "y", "z"] | ["x", "y", "z", "confidence"] => false,
        ["x", "y", "z", "red", "green", "blue"] | ["x", "y", "z", "red", "green", "blue", "confidence"] => true,
        _ => return Err(IoError::Format(format!("unsupported PLY properties {names:?}"))),
    };
    let has_conf = names.last() == Some(&"confidence");
    for (ty, name) in &props {
        let want = if matches!(name.as_str(), "red" | "green" | "blue") { "uchar" } else { "float" };
        if ty != want {
            return Err(IoError::Format(format!("property {name} has type {ty}, expected {want}")));
        }
    }
    let stride = 12 + if has_color { 3 } else { 0 } + if has_conf { 4 } else { 0 };
    let body = &bytes[end + END.len()..];
    if body.len() != n * stride {
        return Err(if body.len() < n * stride { IoError::Truncated } else { IoError::Format("trailing PLY bytes".into()) });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut cloud = PointCloud {
        points: Vec::with_capacity(n),
        colors: has_color.then(|| Vec::with_capacity(n)),
        confidences: has_conf.then(|| Vec::with_capacity(n)),
    };
    for rec in body.chunks_exact(stride) {
        cloud.points.push([f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])]);
        let mut o = 12;
        if let Some(c) = cloud.colors.as_mut() {
            c.push([rec[12], rec[13], rec[14]].map(|b| b as f32 / 255.0));
            o += 3;
        }
        if let Some(c) = cloud.confidences.as_mut() {
            c.push(f(&rec[o..o + 4]));
        }
    }
    Ok(cloud)
}

pub fn write(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    Ok(std::fs::write(path, to_bytes(cloud)?)?)
}

pub fn read(path: impl AsRef<Path>) -> Result<PointCloud> {
    from_bytes(&std::fs::read(path)?)
}
