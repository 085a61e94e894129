//! Images as `H×W×C` arrays of reals in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use put_tensor::Tensor;

use crate::error::{Error, Result};

/// Row-major `H×W×C` pixel array.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::SizeMismatch {
                expected: format!("{height}x{width}x{channels} = {} values", height * width * channels),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::SizeMismatch {
                expected: format!("{}x{}x{}", self.height, self.width, self.channels),
                found: format!("{}x{}x{}", other.height, other.width, other.channels),
            });
        }
        Ok(())
    }

    /// `1×C×H×W` tensor.
    pub fn to_nchw(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn([1, c, h, w], |i| {
            let ch = i / (h * w);
            let rem = i % (h * w);
            self.data[rem * c + ch]
        })
    }

    /// Inverse of [`Image::to_nchw`] for a `1×C×H×W` tensor.
    pub fn from_nchw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::SizeMismatch {
                expected: "1xCxHxW".into(),
                found: format!("{s:?}"),
            });
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let src = t.data();
        Ok(Self::from_fn(h, w, c, |y, x, ch| src[(ch * h + y) * w + x]))
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => Ok(ImageFormat::Png),
        "ppm" | "pnm" | "pgm" => Ok(ImageFormat::Pnm),
        other => Err(Error::Format(format!(
            "{}: unsupported extension {other:?} (expected png or ppm)",
            path.display()
        ))),
    }
}

fn read_dynamic(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dynamic(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode_dynamic(bytes: &[u8]) -> Result<DynamicImage> {
    let format = image::guess_format(bytes).map_err(|e| Error::Format(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::Format(format!("unsupported image format {format:?}")));
    }
    image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Format(e.to_string()))
}

fn from_rgb(img: &RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Image {
        height: h as usize,
        width: w as usize,
        channels: 3,
        data: img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect(),
    }
}

/// Loads a PNG or binary PPM as RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Ok(from_rgb(&read_dynamic(path.as_ref())?.to_rgb8()))
}

/// Decodes in-memory PNG/PPM bytes as RGB.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    Ok(from_rgb(&decode_dynamic(bytes)?.to_rgb8()))
}

/// Decodes in-memory PNG/PPM bytes as a single 8-bit channel, without conversion
/// of multi-channel inputs beyond luma.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayMap> {
    gray_from_dynamic(decode_dynamic(bytes)?)
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayMap> {
    gray_from_dynamic(read_dynamic(path.as_ref())?)
}

fn gray_from_dynamic(img: DynamicImage) -> Result<GrayMap> {
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok(GrayMap {
        height: h as usize,
        width: w as usize,
        data: g.into_raw(),
    })
}

fn rgb_buffer(image: &Image) -> Result<RgbImage> {
    let bytes = match image.channels {
        3 => image.to_u8(),
        1 => image.to_u8().into_iter().flat_map(|b| [b, b, b]).collect(),
        c => {
            return Err(Error::Format(format!("cannot write a {c}-channel image")));
        }
    };
    RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::Format("image buffer size".into()))
}

/// Writes an RGB (or grayscale, replicated) image as PNG or PPM by extension.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path)?;
    rgb_buffer(image)?
        .save_with_format(path, format)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// PNG bytes for an RGB image.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    rgb_buffer(image)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

/// Single-channel 8-bit raster: masks, semantic maps and sketches on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayMap {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = match format_for(path)? {
            ImageFormat::Png => ImageFormat::Png,
            _ => ImageFormat::Pnm,
        };
        self.buffer()?
            .save_with_format(path, format)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.buffer()?
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(out.into_inner())
    }

    fn buffer(&self) -> Result<GrayImage> {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Format("gray buffer size".into()))
    }
}
