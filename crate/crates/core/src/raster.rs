//! RGB raster images with real-valued channels in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};
use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};

/// An `H x W x 3` RGB image, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    data: Array3<f64>,
}

impl RasterImage {
    /// Wraps an `H x W x 3` array, clamping to `[0, 1]`.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::shape(&[data.dim().0, data.dim().1, 3], data.shape()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        Ok(Self {
            data: data.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c].clamp(0.0, 1.0));
        Self { data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                let p = f(y, x);
                for c in 0..3 {
                    data[[y, x, c]] = p[c].clamp(0.0, 1.0);
                }
            }
        }
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.data[[y, x, 0]], self.data[[y, x, 1]], self.data[[y, x, 2]]]
    }

    pub fn max_abs_diff(&self, other: &RasterImage) -> f64 {
        Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |m, a, b| m.max((a - b).abs()))
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |y, x| {
            img.get_pixel(x as u32, y as u32).0.map(|v| v as f64 / 255.0)
        })
    }

    /// Reads `(height, width)` from an encoded header without decoding pixels.
    pub fn probe_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
        let (w, h) = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()?
            .into_dimensions()?;
        Ok((h as usize, w as usize))
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(self.to_rgb8()).write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

/// Encodes a `[0, 1]` grid as an 8-bit grayscale PNG.
pub fn encode_gray_png(grid: &Array2<f64>) -> Result<Vec<u8>> {
    let (h, w) = grid.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(grid[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(img).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Parses `#RRGGBB` into a `[0, 1]` triple.
pub fn parse_hex_color(s: &str) -> Result<[f64; 3]> {
    let hex = s
        .strip_prefix('#')
        .ok_or_else(|| Error::Config(format!("color '{s}' must start with '#'")))?;
    if hex.len() != 6 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(Error::Config(format!("color '{s}' is not of the form #RRGGBB")));
    }
    let channel = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).map(|v| v as f64 / 255.0);
    Ok([
        channel(0).expect("validated hex"),
        channel(2).expect("validated hex"),
        channel(4).expect("validated hex"),
    ])
}

pub fn to_hex_color(rgb: [f64; 3]) -> String {
    let [r, g, b] = rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    format!("#{r:02X}{g:02X}{b:02X}")
}
