//! Procedural face fixtures with exact label maps.
//!
//! Faces are drawn on a grid of 2x2 pixel blocks so that a 2x average-pooling
//! codec reproduces them exactly, and every channel value sits on the 8-bit
//! grid so PNG round trips are lossless.

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::regions::{LabelMap, RegionMapping};

pub const FIXTURE_NAMES: &[&str] = &["face-a", "face-b"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacePalette {
    pub background: [f64; 3],
    pub hair: [f64; 3],
    pub skin: [f64; 3],
    pub neck: [f64; 3],
    pub brows: [f64; 3],
    pub eyes: [f64; 3],
    pub nose: [f64; 3],
    pub lips: [f64; 3],
    /// Painted above the eyes but labelled as skin.
    pub eyeshadow: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceGeometry {
    /// Block grid size; the image is twice this in each direction.
    pub blocks: usize,
    /// Eye centers `(row, col)` in blocks.
    pub eyes: [(f64, f64); 2],
    pub eye_radii: (f64, f64),
    pub lip_center: (f64, f64),
    pub lip_half_width: f64,
}

#[derive(Debug, Clone)]
pub struct FaceFixture {
    pub name: String,
    pub image: RasterImage,
    pub labels: LabelMap,
    pub palette: FacePalette,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn texture(seed: &str, by: usize, bx: usize) -> f64 {
    let digest = Sha256::digest(format!("{seed}:{by}:{bx}").as_bytes());
    (digest[0] as f64 / 255.0 - 0.5) * 2.0
}

fn inside(p: (f64, f64), c: (f64, f64), ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((p.0 - c.0) / ry, (p.1 - c.1) / rx);
    dy * dy + dx * dx <= 1.0
}

const TEXTURE_AMPLITUDE: f64 = 6.0 / 255.0;

/// Draws a face; returns the image and its labels under the default mapping.
pub fn draw_face(name: &str, palette: &FacePalette, geo: &FaceGeometry) -> FaceFixture {
    let n = geo.blocks as f64;
    let s = n / 64.0;
    let mut labels = Array2::<u8>::zeros((geo.blocks, geo.blocks));
    let mut colors = vec![palette.background; geo.blocks * geo.blocks];
    for by in 0..geo.blocks {
        for bx in 0..geo.blocks {
            let p = (by as f64 + 0.5, bx as f64 + 0.5);
            let (mut label, mut color) = (0u8, palette.background);
            if inside(p, (26.0 * s, 32.0 * s), 22.0 * s, 22.0 * s) {
                label = 17;
                color = palette.hair;
            }
            if p.0 >= 50.0 * s && (p.1 - 32.0 * s).abs() <= 7.0 * s {
                label = 14;
                color = palette.neck;
            }
            if inside(p, (34.0 * s, 32.0 * s), 20.0 * s, 16.0 * s) {
                label = 1;
                color = palette.skin;
                if let Some(shadow) = palette.eyeshadow {
                    for &(ey, ex) in &geo.eyes {
                        if inside(p, (ey - 2.5 * s, ex), 2.5 * s, geo.eye_radii.1 + 1.0 * s) {
                            color = shadow;
                        }
                    }
                }
            }
            for (i, &(ey, ex)) in geo.eyes.iter().enumerate() {
                if (p.0 - (ey - 5.0 * s)).abs() <= 1.0 * s && (p.1 - ex).abs() <= 5.0 * s {
                    label = 2 + i as u8;
                    color = palette.brows;
                }
                if inside(p, (ey, ex), geo.eye_radii.0, geo.eye_radii.1) {
                    label = 4 + i as u8;
                    color = palette.eyes;
                }
            }
            if inside(p, (35.0 * s, 32.0 * s), 4.0 * s, 2.0 * s) {
                label = 10;
                color = palette.nose;
            }
            let (ly, lx) = geo.lip_center;
            if inside(p, (ly - 1.5 * s, lx), 1.6 * s, geo.lip_half_width) {
                label = 12;
                color = palette.lips;
            }
            if inside(p, (ly + 1.5 * s, lx), 1.8 * s, geo.lip_half_width * 0.85) {
                label = 13;
                color = palette.lips;
            }
            labels[[by, bx]] = label;
            let jitter = if label == 0 { 0.0 } else { TEXTURE_AMPLITUDE * texture(name, by, bx) };
            colors[by * geo.blocks + bx] = color.map(|c| quantize(c + jitter));
        }
    }
    let size = geo.blocks * 2;
    let image = RasterImage::from_fn(size, size, |y, x| colors[(y / 2) * geo.blocks + x / 2]);
    let grid = Array2::from_shape_fn((size, size), |(y, x)| labels[[y / 2, x / 2]]);
    FaceFixture {
        name: name.to_string(),
        image,
        labels: LabelMap::new(grid, RegionMapping::default()),
        palette: *palette,
    }
}

pub fn palette_a() -> FacePalette {
    FacePalette {
        background: [0.96, 0.96, 0.98],
        hair: [0.10, 0.07, 0.05],
        skin: [0.91, 0.76, 0.66],
        neck: [0.85, 0.70, 0.60],
        brows: [0.25, 0.17, 0.12],
        eyes: [0.30, 0.24, 0.22],
        nose: [0.86, 0.62, 0.50],
        lips: [0.78, 0.52, 0.52],
        eyeshadow: None,
    }
}

pub fn palette_b() -> FacePalette {
    FacePalette {
        background: [1.0, 1.0, 1.0],
        hair: [0.30, 0.18, 0.08],
        skin: [0.80, 0.62, 0.50],
        neck: [0.70, 0.52, 0.44],
        brows: [0.20, 0.12, 0.08],
        eyes: [0.22, 0.18, 0.20],
        nose: [0.82, 0.52, 0.36],
        lips: [0.72, 0.18, 0.28],
        eyeshadow: Some([0.55, 0.36, 0.62]),
    }
}

pub fn geometry_a(blocks: usize) -> FaceGeometry {
    let s = blocks as f64 / 64.0;
    FaceGeometry {
        blocks,
        eyes: [(28.0 * s, 24.0 * s), (28.0 * s, 40.0 * s)],
        eye_radii: (2.2 * s, 4.5 * s),
        lip_center: (44.0 * s, 32.0 * s),
        lip_half_width: 7.0 * s,
    }
}

pub fn geometry_b(blocks: usize) -> FaceGeometry {
    let s = blocks as f64 / 64.0;
    FaceGeometry {
        blocks,
        eyes: [(29.0 * s, 23.5 * s), (29.0 * s, 40.5 * s)],
        eye_radii: (2.6 * s, 5.0 * s),
        lip_center: (45.0 * s, 32.0 * s),
        lip_half_width: 6.5 * s,
    }
}

/// Default 128x128 fixture by name (`face-a`, `face-b`).
pub fn fixture_by_name(name: &str) -> Result<FaceFixture> {
    fixture_sized(name, 128)
}

/// A named fixture with an even side length `size`.
pub fn fixture_sized(name: &str, size: usize) -> Result<FaceFixture> {
    if size < 32 || size % 2 != 0 {
        return Err(Error::Parameter(format!("fixture size must be even and >= 32, got {size}")));
    }
    let blocks = size / 2;
    match name {
        "face-a" => Ok(draw_face(name, &palette_a(), &geometry_a(blocks))),
        "face-b" => Ok(draw_face(name, &palette_b(), &geometry_b(blocks))),
        other => Err(Error::Config(format!(
            "unknown fixture '{other}', expected one of {}",
            FIXTURE_NAMES.join(", ")
        ))),
    }
}

/// Segments an image drawn with a known palette by nearest base color.
/// Only meaningful for fixture-style images.
pub fn palette_segment(image: &RasterImage, palette: &FacePalette) -> LabelMap {
    let mut entries: Vec<(u8, [f64; 3])> = vec![
        (0, palette.background),
        (17, palette.hair),
        (1, palette.skin),
        (14, palette.neck),
        (2, palette.brows),
        (4, palette.eyes),
        (10, palette.nose),
        (12, palette.lips),
    ];
    if let Some(shadow) = palette.eyeshadow {
        entries.push((1, shadow));
    }
    let (h, w) = image.dims();
    let grid = Array2::from_shape_fn((h, w), |(y, x)| {
        let px = image.pixel(y, x);
        entries
            .iter()
            .map(|(l, c)| (*l, (0..3).map(|i| (px[i] - c[i]).powi(2)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l)
            .unwrap_or(0)
    });
    LabelMap::new(grid, RegionMapping::default())
}
