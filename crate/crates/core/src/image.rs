//! Image and feature-matrix value types, plus PPM (P6) and PNG file I/O.
//!
//! Pixels are stored row-major with the three color channels interleaved,
//! so channel `d` of pixel `(x, y)` lives at `(y * width + x) * 3 + d`.
//! Pixel index `i = y * width + x` is the ordering used everywhere else in
//! the crate (assignments, features, gradients).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A color image with every channel value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!(
                "channel value {} at index {pos} outside [0, 1]",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| color).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn to_gradient(&self) -> Gradient {
        Gradient {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }

    pub fn to_features(&self) -> FeatureMatrix {
        FeatureMatrix::from_raw(self.height, self.width, &self.data)
    }
}

/// An image-shaped array of unconstrained reals (gradients, residuals).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Gradient {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", height * width * CHANNELS),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::shape(dims, self.dims()));
        }
        Ok(())
    }
}

/// One row per pixel: `[x, y, r, g, b]` with raw 0-based pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    height: usize,
    width: usize,
    rows: Vec<[f64; 5]>,
}

impl FeatureMatrix {
    /// Builds features from an interleaved color buffer without range checks.
    /// Finite-difference probes push values slightly outside `[0, 1]`.
    pub fn from_raw(height: usize, width: usize, data: &[f64]) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        let rows = data
            .chunks_exact(CHANNELS)
            .enumerate()
            .map(|(i, c)| [(i % width) as f64, (i / width) as f64, c[0], c[1], c[2]])
            .collect();
        Self {
            height,
            width,
            rows,
        }
    }

    pub fn rows(&self) -> &[[f64; 5]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Drops the spatial columns and re-flattens the color part.
    pub fn colors(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| [r[2], r[3], r[4]]).collect()
    }
}

pub fn to_features(img: &Image) -> FeatureMatrix {
    img.to_features()
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(&bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(Error::UnsupportedFormat(format!(
            "PNM variant P{} (only P6 is supported)",
            bytes[1] as char
        )))
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{} is neither binary PPM nor PNG",
            path.display()
        )))
    }
}

/// Writes PNG when the extension is `.png`, binary PPM otherwise.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        encode_png(img)?
    } else {
        encode_ppm(img)
    };
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::MalformedHeader("missing P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and '#' comments may precede each header token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedHeader("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!(
                "expected a decimal number at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader("header number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval} (only 8-bit, maxval 255, is supported)"
        )));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedHeader(
            "missing whitespace after maxval".into(),
        ));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(CHANNELS))
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let body = &bytes[pos..];
    if body.len() < expected {
        return Err(Error::MalformedHeader(format!(
            "pixel data truncated: expected {expected} bytes, found {}",
            body.len()
        )));
    }
    let data = body[..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(height, width, data)
}

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::UnsupportedFormat(format!("png encode: {e}")))?;
        let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
        writer
            .write_image_data(&raw)
            .map_err(|e| Error::UnsupportedFormat(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::MalformedHeader(format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "png {:?}/{:?} (only 8-bit RGB is supported)",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(width * height * CHANNELS)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::MalformedHeader(format!("png: {e}")))?;
    let data = buf[..frame.buffer_size()]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Image::new(height, width, data)
}
