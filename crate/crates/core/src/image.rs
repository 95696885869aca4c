//! Float images plus the PNG (8/16-bit) and PFM codecs used for artifacts.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("png: {0}")]
    Png(String),
    #[error("pfm: {0}")]
    Pfm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major, channel-interleaved float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Dimensions(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::Dimensions(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self.shape_only()
        }
    }

    fn shape_only(&self) -> Box<Image> {
        Box::new(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: Vec::new(),
        })
    }

    pub fn zip_map(&self, other: &Image, mut f: impl FnMut(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(other));
        Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
            ..*self.shape_only()
        }
    }

    pub fn scale(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Image) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Single channel extracted from a multi-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Rec. 601 luma of an RGB image; single-channel images pass through.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.width, self.height, 1, |x, y, _| {
            0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
        })
    }

    /// Snaps every value to the 16-bit grid used by PNG transport.
    pub fn quantize_u16(&self) -> Image {
        self.map(|v| f64::from(to_u16(v)) / 65535.0)
    }

    pub fn to_png(&self, bits16: bool) -> Result<Vec<u8>, ImageError> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(ImageError::Png(format!("unsupported channel count {c}"))),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(color);
            let raw: Vec<u8> = if bits16 {
                enc.set_depth(png::BitDepth::Sixteen);
                self.data.iter().flat_map(|v| to_u16(*v).to_be_bytes()).collect()
            } else {
                enc.set_depth(png::BitDepth::Eight);
                self.data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect()
            };
            let mut w = enc
                .write_header()
                .map_err(|e| ImageError::Png(e.to_string()))?;
            w.write_image_data(&raw)
                .map_err(|e| ImageError::Png(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Image, ImageError> {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().map_err(|e| ImageError::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| ImageError::Png("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| ImageError::Png(e.to_string()))?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(ImageError::Png(format!("unsupported color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let data: Vec<f64> = match info.bit_depth {
            png::BitDepth::Eight => buf[..info.buffer_size()]
                .iter()
                .map(|b| f64::from(*b) / 255.0)
                .collect(),
            png::BitDepth::Sixteen => buf[..info.buffer_size()]
                .chunks_exact(2)
                .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 65535.0)
                .collect(),
            d => return Err(ImageError::Png(format!("unsupported bit depth {d:?}"))),
        };
        Image::from_vec(w, h, channels, data)
    }

    pub fn write_png(&self, path: impl AsRef<Path>, bits16: bool) -> Result<(), ImageError> {
        std::fs::write(path, self.to_png(bits16)?)?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        Image::from_png(&std::fs::read(path)?)
    }

    /// Little-endian PFM, bottom row first as the format requires.
    pub fn to_pfm(&self) -> Result<Vec<u8>, ImageError> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(ImageError::Pfm(format!("unsupported channel count {c}"))),
        };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            let row = &self.data[y * self.width * self.channels..(y + 1) * self.width * self.channels];
            for v in row {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(out)
    }

    pub fn from_pfm(bytes: &[u8]) -> Result<Image, ImageError> {
        let mut rd = BufReader::new(bytes);
        let mut line = String::new();
        let mut next_line = |rd: &mut BufReader<&[u8]>| -> Result<String, ImageError> {
            line.clear();
            rd.read_line(&mut line)?;
            Ok(line.trim().to_string())
        };
        let channels = match next_line(&mut rd)?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            t => return Err(ImageError::Pfm(format!("bad magic {t:?}"))),
        };
        let dims = next_line(&mut rd)?;
        let mut it = dims.split_whitespace().map(str::parse::<usize>);
        let (w, h) = match (it.next(), it.next()) {
            (Some(Ok(w)), Some(Ok(h))) => (w, h),
            _ => return Err(ImageError::Pfm(format!("bad dimensions {dims:?}"))),
        };
        let scale: f64 = next_line(&mut rd)?
            .parse()
            .map_err(|_| ImageError::Pfm("bad scale".into()))?;
        let little = scale < 0.0;
        let mut raw = Vec::new();
        rd.read_to_end(&mut raw)?;
        if raw.len() < w * h * channels * 4 {
            return Err(ImageError::Pfm("truncated data".into()));
        }
        let mut img = Image::new(w, h, channels);
        let mut k = 0;
        for y in (0..h).rev() {
            for i in 0..w * channels {
                let b = [raw[k], raw[k + 1], raw[k + 2], raw[k + 3]];
                k += 4;
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                img.data[y * w * channels + i] = f64::from(v);
            }
        }
        Ok(img)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.to_pfm()?)?;
        Ok(())
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image, ImageError> {
        Image::from_pfm(&std::fs::read(path)?)
    }

    /// RGBA8 buffer for canvas display.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for p in self.data.chunks_exact(self.channels) {
            let px = |c: usize| (p[c.min(self.channels - 1)].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.extend_from_slice(&[px(0), px(1), px(2), 255]);
        }
        out
    }
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}
