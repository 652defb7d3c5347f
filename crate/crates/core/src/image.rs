//! RGB float images, 8-bit PNG output, palette-coded category masks, and a
//! raw little-endian float format for exact comparisons.
//!
//! Raw format (`.rawf`): ASCII magic `RAWF`, then `u32` width, height and
//! channel count, then `width * height * channels` `f32` values in planar
//! order (all of channel 0 row-major, then channel 1, ...). Little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("{0}")]
    Format(String),
}

/// Interleaved RGB, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel mean per pixel.
    pub fn gray(&self) -> Vec<f64> {
        self.data.chunks(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.to_rgb8())?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.png_bytes()?)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self, ImageError> {
        let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::Format(format!(
                "{}: expected 8-bit RGB, got {:?} {:?}",
                path.display(),
                info.color_type,
                info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(Self::from_rgb8(info.width as usize, info.height as usize, &buf))
    }

    pub fn write_raw(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(b"RAWF")?;
        for v in [self.width, self.height, 3] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for c in 0..3 {
            for px in self.data.chunks(3) {
                f.write_all(&(px[c] as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != b"RAWF" {
            return Err(ImageError::Format("missing RAWF header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (word(0), word(1), word(2));
        if c != 3 || bytes.len() != 16 + w * h * c * 4 {
            return Err(ImageError::Format(format!("bad raw payload for {w}x{h}x{c}")));
        }
        let mut img = Image::new(w, h);
        let plane = w * h;
        for ch in 0..3 {
            for p in 0..plane {
                let o = 16 + (ch * plane + p) * 4;
                img.data[p * 3 + ch] = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
            }
        }
        Ok(img)
    }
}

/// Palette used for category masks: static, deforming, new.
pub const MASK_PALETTE: [u8; 9] = [0, 0, 255, 0, 255, 0, 255, 0, 0];

/// Writes per-pixel category indices (0, 1, 2) as an indexed-color PNG.
pub fn write_mask_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<(), ImageError> {
    if labels.len() != width * height || labels.iter().any(|&l| l > 2) {
        return Err(ImageError::Format("mask labels must be 0..=2 per pixel".into()));
    }
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(&MASK_PALETTE[..]);
    let mut w = enc.write_header()?;
    w.write_image_data(labels)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Format(format!("{}: not an 8-bit indexed mask", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_raw_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(3, 2);
        img.set(1, 1, [0.2, 0.4, 1.0]);
        img.set(2, 0, [1.0, 0.0, 0.5]);
        let png_path = dir.path().join("a.png");
        img.write_png(&png_path).unwrap();
        let back = Image::read_png(&png_path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());

        let raw_path = dir.path().join("a.rawf");
        img.write_raw(&raw_path).unwrap();
        let raw = Image::read_raw(&raw_path).unwrap();
        for (a, b) in raw.data.iter().zip(&img.data) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let labels = vec![0, 1, 2, 2, 1, 0];
        let mask_path = dir.path().join("m.png");
        write_mask_png(&mask_path, 3, 2, &labels).unwrap();
        assert_eq!(read_mask_png(&mask_path).unwrap(), (3, 2, labels));
    }
}
