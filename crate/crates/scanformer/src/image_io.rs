//! 8-bit RGB PNG encode/decode for `H x W x 3` float images in `[0, 1]`.

use std::path::Path;

use crate::error::{IoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub fn encode_png(width: usize, height: usize, rgb: &[f32]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(IoError::Png(format!("{} values for a {width}x{height} image", rgb.len())));
    }
    let bytes: Vec<u8> = rgb.iter().map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| IoError::Png(e.to_string()))?;
        w.write_image_data(&bytes).map_err(|e| IoError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes 8-bit RGB or RGBA (alpha dropped) and grayscale PNGs.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| IoError::Png(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| IoError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| IoError::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(IoError::Png("unexpanded palette image".into())),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for p in px.chunks_exact(channels) {
        let rgb = if channels < 3 { [p[0]; 3] } else { [p[0], p[1], p[2]] };
        data.extend(rgb.map(|b| b as f32 / 255.0));
    }
    Ok(RgbImage { width: w, height: h, data })
}

pub fn write_png(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    Ok(std::fs::write(path, encode_png(width, height, rgb)?)?)
}

pub fn read_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_png(&std::fs::read(path)?)
}

/// PNG files of a directory in name order.
pub fn read_png_dir(dir: impl AsRef<Path>) -> Result<Vec<RgbImage>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(read_png).collect()
}
