//! Pixel <-> latent codecs for the bundled backends.

use ndarray::{Array3, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::schedule::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    /// Latent is the `H x W x 3` image itself.
    Identity,
    /// 2x2 average pooling; decoding repeats each latent cell over its block,
    /// so `encode(decode(z)) == z` and `decode(encode(x)) == x` on images that
    /// are constant over aligned 2x2 blocks.
    AvgPool2,
}

impl Codec {
    pub fn latent_shape(&self, height: usize, width: usize) -> Vec<usize> {
        match self {
            Codec::Identity => vec![height, width, 3],
            Codec::AvgPool2 => vec![height / 2, width / 2, 3],
        }
    }

    /// Round-trip tolerance on bundled fixtures.
    pub fn tolerance(&self) -> f64 {
        0.0
    }

    pub fn encode(&self, image: &RasterImage) -> Result<Latent> {
        let data = image.data();
        match self {
            Codec::Identity => Ok(data.clone().into_dyn()),
            Codec::AvgPool2 => {
                let (h, w) = image.dims();
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Parameter(format!(
                        "pooling codec needs even image dimensions, got {h}x{w}"
                    )));
                }
                let pooled = Array3::from_shape_fn((h / 2, w / 2, 3), |(y, x, c)| {
                    let (y0, x0) = (2 * y, 2 * x);
                    0.25 * (data[[y0, x0, c]]
                        + data[[y0, x0 + 1, c]]
                        + data[[y0 + 1, x0, c]]
                        + data[[y0 + 1, x0 + 1, c]])
                });
                Ok(pooled.into_dyn())
            }
        }
    }

    pub fn decode(&self, latent: &Latent) -> Result<RasterImage> {
        let shape = latent.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape(&[0, 0, 3], shape));
        }
        let z = latent
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| Error::shape(&[0, 0, 3], shape))?;
        let pixels = match self {
            Codec::Identity => z.to_owned(),
            Codec::AvgPool2 => {
                let (h, w, _) = z.dim();
                Array3::from_shape_fn((2 * h, 2 * w, 3), |(y, x, c)| z[[y / 2, x / 2, c]])
            }
        };
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoded latent is not finite".into()));
        }
        RasterImage::new(pixels)
    }

    /// Decodes without clamping to the display gamut.
    pub fn decode_unclamped(&self, latent: &Latent) -> Result<Latent> {
        match self {
            Codec::Identity => Ok(latent.clone()),
            Codec::AvgPool2 => {
                let s = latent.shape();
                if s.len() != 3 {
                    return Err(Error::shape(&[0, 0, 3], s));
                }
                Ok(ndarray::ArrayD::from_shape_fn(
                    IxDyn(&[2 * s[0], 2 * s[1], s[2]]),
                    |i| latent[[i[0] / 2, i[1] / 2, i[2]]],
                ))
            }
        }
    }

    /// Encodes an unclamped pixel-space array.
    pub fn encode_unclamped(&self, pixels: &Latent) -> Result<Latent> {
        match self {
            Codec::Identity => Ok(pixels.clone()),
            Codec::AvgPool2 => {
                let s = pixels.shape();
                if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
                    return Err(Error::shape(&[0, 0, 3], s));
                }
                Ok(ndarray::ArrayD::from_shape_fn(
                    IxDyn(&[s[0] / 2, s[1] / 2, s[2]]),
                    |i| {
                        let (y, x, c) = (2 * i[0], 2 * i[1], i[2]);
                        0.25 * (pixels[[y, x, c]]
                            + pixels[[y, x + 1, c]]
                            + pixels[[y + 1, x, c]]
                            + pixels[[y + 1, x + 1, c]])
                    },
                ))
            }
        }
    }
}
