//! RGB frames and floating-point patches.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB frame stored row-major, interleaved (`H×W×3`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == width as usize * height as usize * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// FNV-1a over dimensions and pixel bytes; used for determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let dims = [self.width.to_le_bytes(), self.height.to_le_bytes()];
        for b in dims.iter().flatten().chain(self.data.iter()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut encoder = png::Encoder::new(file, self.width, self.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let decoder = png::Decoder::new(file);
        let fmt_err = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
        let mut reader = decoder.read_info().map_err(fmt_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(fmt_err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format(format!(
                "{}: only 8-bit PNG is supported",
                path.display()
            )));
        }
        buf.truncate(info.buffer_size());
        let data = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf
                .chunks_exact(4)
                .flat_map(|px| [px[0], px[1], px[2]])
                .collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            other => {
                return Err(Error::Format(format!(
                    "{}: unsupported PNG color type {other:?}",
                    path.display()
                )))
            }
        };
        Ok(Self {
            width: info.width,
            height: info.height,
            data,
        })
    }
}

/// A resampled crop, `H×W×3` interleaved, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Appends the patch in channel-major (`3×H×W`) order, the layout the
    /// convolution layers consume.
    pub fn extend_chw(&self, out: &mut Vec<f64>) {
        let plane = self.height * self.width;
        out.reserve(plane * 3);
        for c in 0..3 {
            out.extend((0..plane).map(|i| f64::from(self.data[i * 3 + c])));
        }
    }
}
