//! 8-bit RGB images, patch latents, and PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major H×W×3.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!("{} bytes for a {width}x{height} RGB image", data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, px: [u8; 3]) -> Self {
        RgbImage { width, height, data: px.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mean of the three channels per pixel.
    pub fn gray(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect()
    }

    /// Non-overlapping `patch`×`patch` tiles in row-major grid order; each row
    /// of the result is one tile flattened as (dy, dx, channel), scaled to [−1, 1].
    pub fn to_latent(&self, patch: usize) -> Result<Mat> {
        if patch == 0 || !self.width.is_multiple_of(patch) || !self.height.is_multiple_of(patch) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {patch}x{patch} patches",
                self.width, self.height
            )));
        }
        let (gw, gh) = (self.width / patch, self.height / patch);
        let dim = patch * patch * 3;
        let mut m = Mat::zeros(gw * gh, dim);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = m.row_mut(gy * gw + gx);
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let i = ((gy * patch + dy) * self.width + gx * patch + dx) * 3;
                        for c in 0..3 {
                            row[k] = self.data[i + c] as f64 / 127.5 - 1.0;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(m)
    }

    /// Inverse of `to_latent`, clamping and rounding to 8 bits.
    pub fn from_latent(latent: &Mat, width: usize, height: usize, patch: usize) -> Result<Self> {
        let (gw, gh) = (width / patch, height / patch);
        if latent.rows != gw * gh || latent.cols != patch * patch * 3 {
            return Err(Error::Shape(format!(
                "latent {}x{} does not tile a {width}x{height} image with patch {patch}",
                latent.rows, latent.cols
            )));
        }
        let mut data = vec![0u8; width * height * 3];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = latent.row(gy * gw + gx);
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let i = ((gy * patch + dy) * width + gx * patch + dx) * 3;
                        for c in 0..3 {
                            data[i + c] = ((row[k] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                            k += 1;
                        }
                    }
                }
            }
        }
        RgbImage::new(width, height, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, png::BitDepth::Eight, &self.data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, color, depth, bytes) = read_png(path)?;
        if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
            return Err(Error::Png { path: path.into(), msg: format!("expected 8-bit RGB, got {color:?}/{depth:?}") });
        }
        RgbImage::new(w, h, bytes)
    }
}

pub fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let png_err = |e: png::EncodingError| Error::Png { path: path.into(), msg: e.to_string() };
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(data).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, png::BitDepth, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let png_err = |e: png::DecodingError| Error::Png { path: path.into(), msg: e.to_string() };
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png { path: path.into(), msg: "image too large".into() })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, info.bit_depth, buf))
}

/// Writes an 8-bit single-channel PNG.
pub fn save_gray8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, data)
}

/// Writes a 16-bit single-channel PNG (big-endian samples).
pub fn save_gray16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn load_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h, color, depth, bytes) = read_png(path)?;
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(Error::Png { path: path.into(), msg: format!("expected 16-bit gray, got {color:?}/{depth:?}") });
    }
    Ok((w, h, bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()))
}
