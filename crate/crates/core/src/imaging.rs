//! Floating-point raster images, 8-bit PNG I/O and the JPEG re-encoding
//! defense.
//!
//! Pixels are stored row-major with interleaved channels (`HWC`), as `f64` in
//! `[0, 1]`. Quantization to bytes only happens at the codec boundary and uses
//! `round(v * 255)` with halves rounded away from zero, so `0.5` becomes `128`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use image::codecs::jpeg::{JpegDecoder, JpegEncoder};
use image::codecs::png::{PngDecoder, PngEncoder};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(String),
    #[error("malformed PNG: {0}")]
    MalformedPng(String),
    #[error("unsupported bit depth ({0:?}); only 8-bit PNG is accepted")]
    UnsupportedBitDepth(ColorType),
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pixel value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("codec failure: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An `H x W x C` raster with values in `[0, 1]`, `C` being 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::UnsupportedChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::DimensionMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self { height, width, channels, data })
    }

    /// Image with every value set to `value` (clamped into `[0, 1]`).
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    /// Builds an image from a per-pixel function; results are clamped.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, channels, data }
    }

    /// Wraps raw data, clamping into `[0, 1]`. Panics on a length mismatch.
    pub(crate) fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of scalar entries, `H * W * C`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Replicates a single channel into three; 3-channel images are cloned.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image { height: self.height, width: self.width, channels: 3, data }
    }

    /// Channel average of a 3-channel image; 1-channel images are cloned.
    fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    /// Quantized bytes in the same `HWC` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round-trip would.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| f64::from(quantize(v)) / 255.0).collect();
        Image { height: self.height, width: self.width, channels: self.channels, data }
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Image::new(height, width, channels, data)
    }

    /// Encodes as an in-memory 8-bit PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut buf = Vec::new();
        let color = if self.channels == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
        PngEncoder::new(&mut buf)
            .write_image(&self.to_bytes(), self.width as u32, self.height as u32, color)
            .map_err(|e| ImageError::Codec(e.to_string()))?;
        Ok(buf)
    }

    /// Decodes an in-memory 8-bit PNG, promoting grayscale to RGB and dropping
    /// any alpha channel.
    pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
        decode_png_reader(Cursor::new(bytes))
    }
}

/// `round(v * 255)` with ties away from zero, saturating at the byte range.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn decode_png_reader<R: std::io::BufRead + std::io::Seek>(reader: R) -> Result<Image, ImageError> {
    let decoder = PngDecoder::new(reader).map_err(|e| ImageError::MalformedPng(e.to_string()))?;
    let color = decoder.color_type();
    let (width, height) = decoder.dimensions();
    let (width, height) = (width as usize, height as usize);
    let src_channels = match color {
        ColorType::L8 => 1,
        ColorType::La8 => 2,
        ColorType::Rgb8 => 3,
        ColorType::Rgba8 => 4,
        other => return Err(ImageError::UnsupportedBitDepth(other)),
    };
    let mut raw = vec![0u8; decoder.total_bytes() as usize];
    decoder
        .read_image(&mut raw)
        .map_err(|e| ImageError::MalformedPng(e.to_string()))?;
    let mut data = Vec::with_capacity(width * height * 3);
    for px in raw.chunks_exact(src_channels) {
        match src_channels {
            1 | 2 => {
                let v = f64::from(px[0]) / 255.0;
                data.extend_from_slice(&[v, v, v]);
            }
            _ => data.extend(px[..3].iter().map(|&b| f64::from(b) / 255.0)),
        }
    }
    Ok(Image { height, width, channels: 3, data })
}

/// Reads an 8-bit RGB or grayscale PNG. Grayscale is replicated to three
/// channels; alpha is discarded.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::NotFound(path.display().to_string()),
        _ => ImageError::Io(e),
    })?;
    decode_png_reader(BufReader::new(file))
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let wrap = |source| ImageError::Write { path: path.display().to_string(), source };
    let bytes = img.encode_png()?;
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    out.write_all(&bytes).map_err(wrap)?;
    out.flush().map_err(wrap)
}

/// Per-channel arithmetic mean over all pixels.
pub fn mean_color(img: &Image) -> Vec<f64> {
    let c = img.channels;
    let mut sums = vec![0.0; c];
    for px in img.data.chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(px) {
            *s += v;
        }
    }
    let n = (img.height * img.width).max(1) as f64;
    sums.into_iter().map(|s| s / n).collect()
}

/// Mean squared error over every scalar entry: the divisor counts
/// `pixels x channels`, not pixels.
pub fn mse(a: &Image, b: &Image) -> Result<f64, ImageError> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Resamples to `height x width` with a triangle (bilinear) filter. Same-size
/// requests return a clone.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image, ImageError> {
    if height == 0 || width == 0 {
        return Err(ImageError::DimensionMismatch(format!("cannot resize to {height}x{width}")));
    }
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let rgb = img.to_rgb();
    let buf: image::Rgb32FImage = image::ImageBuffer::from_raw(
        rgb.width as u32,
        rgb.height as u32,
        rgb.data.iter().map(|&v| v as f32).collect(),
    )
    .ok_or_else(|| ImageError::DimensionMismatch("buffer size".into()))?;
    let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
    let data = out.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect();
    let resized = Image { height, width, channels: 3, data };
    Ok(if img.channels == 1 { resized.to_gray() } else { resized })
}

/// Baseline JPEG encode at `quality` followed by a decode.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image, ImageError> {
    if img.channels != 3 {
        return Err(ImageError::UnsupportedChannels(img.channels));
    }
    if !(1..=100).contains(&quality) {
        return Err(ImageError::Codec(format!("JPEG quality {quality} outside 1..=100")));
    }
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .write_image(&img.to_bytes(), img.width as u32, img.height as u32, ExtendedColorType::Rgb8)
        .map_err(|e| ImageError::Codec(e.to_string()))?;
    let decoder = JpegDecoder::new(Cursor::new(buf)).map_err(|e| ImageError::Codec(e.to_string()))?;
    let (w, h) = decoder.dimensions();
    if (w as usize, h as usize) != (img.width, img.height) {
        return Err(ImageError::Codec(format!("decoded {w}x{h}, expected {}x{}", img.width, img.height)));
    }
    let color = decoder.color_type();
    let mut raw = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut raw).map_err(|e| ImageError::Codec(e.to_string()))?;
    let data: Vec<f64> = match color {
        ColorType::Rgb8 => raw.iter().map(|&b| f64::from(b) / 255.0).collect(),
        ColorType::L8 => raw.iter().flat_map(|&b| [f64::from(b) / 255.0; 3]).collect(),
        other => return Err(ImageError::Codec(format!("unexpected decoded color type {other:?}"))),
    };
    Ok(Image { height: img.height, width: img.width, channels: 3, data })
}
