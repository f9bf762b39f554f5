//! Makeup transfer from a reference face.
//!
//! Skin and lips are histogram-matched channel by channel. The eye area is
//! registered with a moment-based affine transform followed by a smooth
//! residual displacement field, and reference eyeshadow pixels are pulled
//! through that composite warp.

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::regions::{dilate, RegionMaskSet, SoftMask, StructuringKernel};

/// Per-pixel `(dy, dx)` offsets, shape `H x W x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub data: Array3<f64>,
}

impl DisplacementField {
    pub fn zeros(dims: (usize, usize)) -> Self {
        Self {
            data: Array3::zeros((dims.0, dims.1, 2)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[0], s[1])
    }

    pub fn max_offset(&self) -> f64 {
        let (h, w) = self.dims();
        let mut best: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                best = best.max(self.data[[y, x, 0]].hypot(self.data[[y, x, 1]]));
            }
        }
        best
    }

    /// Jacobian determinant of `p -> p + u(p)` at interior pixels (central
    /// differences). Border pixels are reported as 1.
    pub fn jacobian_determinants(&self) -> Array2<f64> {
        let (h, w) = self.dims();
        let u = &self.data;
        Array2::from_shape_fn((h, w), |(y, x)| {
            if y == 0 || x == 0 || y + 1 >= h || x + 1 >= w {
                return 1.0;
            }
            let dyy = (u[[y + 1, x, 0]] - u[[y - 1, x, 0]]) / 2.0;
            let dyx = (u[[y, x + 1, 0]] - u[[y, x - 1, 0]]) / 2.0;
            let dxy = (u[[y + 1, x, 1]] - u[[y - 1, x, 1]]) / 2.0;
            let dxx = (u[[y, x + 1, 1]] - u[[y, x - 1, 1]]) / 2.0;
            (1.0 + dyy) * (1.0 + dxx) - dyx * dxy
        })
    }

    pub fn min_jacobian(&self) -> f64 {
        self.jacobian_determinants().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Maps reference `(y, x)` coordinates to source coordinates:
/// `[y', x'] = L [y, x] + t` with `matrix = [L | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn apply(&self, y: f64, x: f64) -> (f64, f64) {
        let m = &self.matrix;
        (m[0][0] * y + m[0][1] * x + m[0][2], m[1][0] * y + m[1][1] * x + m[1][2])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn translation(&self) -> (f64, f64) {
        (self.matrix[0][2], self.matrix[1][2])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !(det.abs() > 1e-12) || !det.is_finite() {
            return Err(Error::Registration("affine transform is singular".into()));
        }
        let m = &self.matrix;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        let (ty, tx) = (m[0][2], m[1][2]);
        Ok(Self {
            matrix: [[a, b, -(a * ty + b * tx)], [c, d, -(c * ty + d * tx)]],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub bins: usize,
    /// Gaussian width (pixels) regularizing the displacement field.
    pub smoothing: f64,
    pub eye_kernel: StructuringKernel,
    pub dilation_iterations: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            smoothing: 2.0,
            eye_kernel: StructuringKernel::cross(12, 7),
            dilation_iterations: 2,
        }
    }
}

fn check_mask(image: &RasterImage, mask: &SoftMask) -> Result<()> {
    if image.dims() != mask.dims() {
        let (h, w) = image.dims();
        let (mh, mw) = mask.dims();
        return Err(Error::shape(&[h, w], &[mh, mw]));
    }
    if mask.is_empty() {
        return Err(Error::EmptyRegion(mask.region.clone()));
    }
    Ok(())
}

/// Quantile function of a weighted sample: sorted distinct values placed at
/// their mid-cumulative-weight positions, linearly interpolated.
struct WeightedQuantiles {
    positions: Vec<f64>,
    values: Vec<f64>,
}

impl WeightedQuantiles {
    fn new(mut samples: Vec<(f64, f64)>) -> Self {
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = samples.iter().map(|s| s.1).sum();
        let mut values: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (v, w) in samples {
            if values.last() == Some(&v) {
                *weights.last_mut().unwrap() += w;
            } else {
                values.push(v);
                weights.push(w);
            }
        }
        let mut positions = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        for w in &weights {
            positions.push((acc + w / 2.0) / total);
            acc += w;
        }
        Self { positions, values }
    }

    fn at(&self, u: f64) -> f64 {
        let n = self.values.len();
        if u <= self.positions[0] {
            return self.values[0];
        }
        if u >= self.positions[n - 1] {
            return self.values[n - 1];
        }
        let j = self.positions.partition_point(|&p| p <= u);
        let (p0, p1) = (self.positions[j - 1], self.positions[j]);
        let (v0, v1) = (self.values[j - 1], self.values[j]);
        v0 + (v1 - v0) * (u - p0) / (p1 - p0)
    }
}

/// Per-channel CDF matching of the masked source region onto the masked
/// reference distribution. Source values are grouped into `bins` equal-width
/// bins; each bin maps to the reference quantile at its mid-cumulative
/// weight. Soft masks weight both distributions and blend the result.
pub fn histogram_match(
    src_image: &RasterImage,
    src_mask: &SoftMask,
    ref_image: &RasterImage,
    ref_mask: &SoftMask,
    bins: usize,
) -> Result<RasterImage> {
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    check_mask(src_image, src_mask)?;
    check_mask(ref_image, ref_mask)?;
    let bin_of = |v: f64| ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let mut out = src_image.data().clone();
    for c in 0..3 {
        let ref_plane = ref_image.data().index_axis(Axis(2), c);
        let samples: Vec<(f64, f64)> = Zip::from(&ref_plane)
            .and(&ref_mask.grid)
            .fold(Vec::new(), |mut acc, &v, &w| {
                if w > 0.0 {
                    acc.push((v, w));
                }
                acc
            });
        let quantiles = WeightedQuantiles::new(samples);

        let src_plane = src_image.data().index_axis(Axis(2), c);
        let mut hist = vec![0.0; bins];
        Zip::from(&src_plane).and(&src_mask.grid).for_each(|&v, &w| {
            if w > 0.0 {
                hist[bin_of(v)] += w;
            }
        });
        let total: f64 = hist.iter().sum();
        let mut lut = vec![0.0; bins];
        let mut acc = 0.0;
        for (b, h) in hist.iter().enumerate() {
            if *h > 0.0 {
                lut[b] = quantiles.at((acc + h / 2.0) / total);
            }
            acc += h;
        }
        let mut plane = out.index_axis_mut(Axis(2), c);
        Zip::from(&mut plane).and(&src_mask.grid).for_each(|v, &w| {
            let matched = lut[bin_of(*v)];
            if w >= 1.0 {
                *v = matched;
            } else if w > 0.0 {
                *v += w * (matched - *v);
            }
        });
    }
    RasterImage::new(out)
}

struct Moments {
    mean: (f64, f64),
    /// Raw second central moments `(yy, yx, xx)`.
    cov: (f64, f64, f64),
}

fn moments(mask: &SoftMask) -> Result<Moments> {
    let total = mask.total_weight();
    if !(total > 0.0) {
        return Err(Error::EmptyRegion(mask.region.clone()));
    }
    let (mut my, mut mx) = (0.0, 0.0);
    for ((y, x), &w) in mask.grid.indexed_iter() {
        my += w * y as f64;
        mx += w * x as f64;
    }
    my /= total;
    mx /= total;
    let (mut yy, mut yx, mut xx) = (0.0, 0.0, 0.0);
    for ((y, x), &w) in mask.grid.indexed_iter() {
        let (dy, dx) = (y as f64 - my, x as f64 - mx);
        yy += w * dy * dy;
        yx += w * dy * dx;
        xx += w * dx * dx;
    }
    Ok(Moments {
        mean: (my, mx),
        cov: (yy / total, yx / total, xx / total),
    })
}

type Sym2 = (f64, f64, f64);

/// Square root of a symmetric positive-definite 2x2 matrix.
fn sqrt_spd((a, b, d): Sym2) -> Sym2 {
    let s = (a * d - b * b).sqrt();
    let t = (a + d + 2.0 * s).sqrt();
    ((a + s) / t, b / t, (d + s) / t)
}

fn inv_sym((a, b, d): Sym2) -> Sym2 {
    let det = a * d - b * b;
    (d / det, -b / det, a / det)
}

/// Affine transform taking the reference mask onto the source mask by
/// matching centroids and second moments (`L = S_src^1/2 S_ref^-1/2`).
/// Pixels are treated as unit squares, which adds `1/12` to each variance.
pub fn estimate_affine(src_mask: &SoftMask, ref_mask: &SoftMask) -> Result<AffineTransform> {
    let s = moments(src_mask)?;
    let r = moments(ref_mask)?;
    for (m, name) in [(&s, &src_mask.region), (&r, &ref_mask.region)] {
        let (yy, yx, xx) = m.cov;
        let det = yy * xx - yx * yx;
        if !(det > 1e-9 * (yy + xx).max(1.0).powi(2)) {
            return Err(Error::Registration(format!("mask '{name}' has degenerate second moments")));
        }
    }
    let area = |(yy, yx, xx): Sym2| (yy + 1.0 / 12.0, yx, xx + 1.0 / 12.0);
    let (p, q, u) = sqrt_spd(area(s.cov));
    let (e, f, g) = inv_sym(sqrt_spd(area(r.cov)));
    let l = [[p * e + q * f, p * f + q * g], [q * e + u * f, q * f + u * g]];
    let (ry, rx) = r.mean;
    let (sy, sx) = s.mean;
    Ok(AffineTransform {
        matrix: [
            [l[0][0], l[0][1], sy - (l[0][0] * ry + l[0][1] * rx)],
            [l[1][0], l[1][1], sx - (l[1][0] * ry + l[1][1] * rx)],
        ],
    })
}

/// Bilinear sample with zero outside the grid.
fn sample_zero(grid: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = grid.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let get = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            grid[[yy as usize, xx as usize]]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * get(y0, x0) + fx * get(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * get(y0 + 1.0, x0) + fx * get(y0 + 1.0, x0 + 1.0))
}

/// Bilinear sample of an image channel with edge replication.
fn sample_clamped(data: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (data.shape()[0], data.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    (1.0 - fy) * ((1.0 - fx) * data[[y0, x0, c]] + fx * data[[y0, x1, c]])
        + fy * ((1.0 - fx) * data[[y1, x0, c]] + fx * data[[y1, x1, c]])
}

/// Pulls a reference-frame mask into the source frame.
pub fn warp_mask_affine(mask: &SoftMask, transform: &AffineTransform) -> Result<SoftMask> {
    let inv = transform.inverse()?;
    let grid = Array2::from_shape_fn(mask.dims(), |(y, x)| {
        let (ry, rx) = inv.apply(y as f64, x as f64);
        sample_zero(&mask.grid, ry, rx)
    });
    Ok(SoftMask::new(grid, mask.region.clone()))
}

/// `out(p) = mask(p + u(p))`.
pub fn warp_mask_field(mask: &SoftMask, field: &DisplacementField) -> Result<SoftMask> {
    if mask.dims() != field.dims() {
        let (h, w) = field.dims();
        let (mh, mw) = mask.dims();
        return Err(Error::shape(&[h, w], &[mh, mw]));
    }
    let grid = Array2::from_shape_fn(mask.dims(), |(y, x)| {
        sample_zero(&mask.grid, y as f64 + field.data[[y, x, 0]], x as f64 + field.data[[y, x, 1]])
    });
    Ok(SoftMask::new(grid, mask.region.clone()))
}

/// Pulls reference pixels through `ref(A^-1(p + u(p)))`, giving an image in
/// the source frame.
pub fn warp_image_composite(
    image: &RasterImage,
    transform: &AffineTransform,
    field: &DisplacementField,
    dims: (usize, usize),
) -> Result<RasterImage> {
    let inv = transform.inverse()?;
    if field.dims() != dims {
        let (h, w) = field.dims();
        return Err(Error::shape(&[dims.0, dims.1], &[h, w]));
    }
    let data = Array3::from_shape_fn((dims.0, dims.1, 3), |(y, x, c)| {
        let (py, px) = (y as f64 + field.data[[y, x, 0]], x as f64 + field.data[[y, x, 1]]);
        let (ry, rx) = inv.apply(py, px);
        sample_clamped(image.data(), c, ry, rx)
    });
    RasterImage::new(data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(grid: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return grid.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = grid.dim();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tmp = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * grid[[y, clampi(x as isize + i as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp[[clampi(y as isize + i as isize - r, h), x]])
            .sum::<f64>()
    })
}

const DEMONS_MAX_ITERATIONS: usize = 150;
const DEMONS_PRESMOOTH: f64 = 1.0;

/// Smooth residual field aligning `warped_ref_mask` onto `src_mask`:
/// `warped_ref_mask(p + u(p)) ~ src_mask(p)`. Demons-style force updates are
/// regularized by a Gaussian of width `smoothing`; the best field seen within
/// the iteration cap is returned. Fails when the resulting map folds.
pub fn diffeo_refine(src_mask: &SoftMask, warped_ref_mask: &SoftMask, smoothing: f64) -> Result<DisplacementField> {
    if src_mask.dims() != warped_ref_mask.dims() {
        let (h, w) = src_mask.dims();
        let (mh, mw) = warped_ref_mask.dims();
        return Err(Error::shape(&[h, w], &[mh, mw]));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::Parameter(format!("smoothing must be positive, got {smoothing}")));
    }
    let (h, w) = src_mask.dims();
    let fixed = gaussian_blur(&src_mask.grid, DEMONS_PRESMOOTH);
    let moving = SoftMask {
        grid: gaussian_blur(&warped_ref_mask.grid, DEMONS_PRESMOOTH),
        region: warped_ref_mask.region.clone(),
    };
    let grad = |y: usize, x: usize| {
        let gy = (fixed[[(y + 1).min(h - 1), x]] - fixed[[y.saturating_sub(1), x]]) / 2.0;
        let gx = (fixed[[y, (x + 1).min(w - 1)]] - fixed[[y, x.saturating_sub(1)]]) / 2.0;
        (gy, gx)
    };
    let ssd = |warped: &Array2<f64>| Zip::from(warped).and(&fixed).fold(0.0, |a, &m, &f| a + (m - f) * (m - f));

    let mut field = DisplacementField::zeros((h, w));
    let mut best = field.clone();
    let mut best_err = ssd(&moving.grid);
    for _ in 0..DEMONS_MAX_ITERATIONS {
        let warped = warp_mask_field(&moving, &field)?.grid;
        let mut uy = field.data.index_axis(Axis(2), 0).to_owned();
        let mut ux = field.data.index_axis(Axis(2), 1).to_owned();
        for y in 0..h {
            for x in 0..w {
                let diff = warped[[y, x]] - fixed[[y, x]];
                let (gy, gx) = grad(y, x);
                let denom = gy * gy + gx * gx + diff * diff;
                if denom > 1e-12 {
                    uy[[y, x]] -= diff * gy / denom;
                    ux[[y, x]] -= diff * gx / denom;
                }
            }
        }
        let (uy, ux) = (gaussian_blur(&uy, smoothing), gaussian_blur(&ux, smoothing));
        for y in 0..h {
            for x in 0..w {
                field.data[[y, x, 0]] = uy[[y, x]];
                field.data[[y, x, 1]] = ux[[y, x]];
            }
        }
        let err = ssd(&warp_mask_field(&moving, &field)?.grid);
        if err < best_err * (1.0 - 1e-6) {
            best_err = err;
            best = field.clone();
        } else if err > best_err {
            break;
        }
    }
    if best.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Registration("displacement field is not finite".into()));
    }
    let jmin = best.min_jacobian();
    if !(jmin > 0.0) {
        return Err(Error::Registration(format!(
            "displacement field folds (min Jacobian determinant {jmin:.3})"
        )));
    }
    Ok(best)
}

fn required<'a>(set: &'a RegionMaskSet, region: &str) -> Result<&'a SoftMask> {
    let m = set.require(region)?;
    if m.is_empty() {
        return Err(Error::EmptyRegion(region.to_string()));
    }
    Ok(m)
}

/// Eye-area registration from the reference frame to the source frame.
#[derive(Debug, Clone)]
pub struct EyeRegistration {
    pub affine: AffineTransform,
    pub field: DisplacementField,
    pub src_dilated: SoftMask,
    pub ref_dilated: SoftMask,
}

impl EyeRegistration {
    /// The dilated reference eye mask pulled into the source frame.
    pub fn warped_ref(&self) -> Result<SoftMask> {
        warp_mask_field(&warp_mask_affine(&self.ref_dilated, &self.affine)?, &self.field)
    }
}

pub fn register_eyes(src_eyes: &SoftMask, ref_eyes: &SoftMask, config: &ReferenceConfig) -> Result<EyeRegistration> {
    let src_dilated = dilate(&src_eyes.support(), &config.eye_kernel, config.dilation_iterations)?;
    let ref_dilated = dilate(&ref_eyes.support(), &config.eye_kernel, config.dilation_iterations)?;
    let affine = estimate_affine(&src_dilated, &ref_dilated)?;
    let warped = warp_mask_affine(&ref_dilated, &affine)?;
    let field = diffeo_refine(&src_dilated, &warped, config.smoothing)?;
    Ok(EyeRegistration {
        affine,
        field,
        src_dilated,
        ref_dilated,
    })
}

/// Reference transfer with default settings.
pub fn transfer_reference(
    src_image: &RasterImage,
    src_regions: &RegionMaskSet,
    ref_image: &RasterImage,
    ref_regions: &RegionMaskSet,
) -> Result<RasterImage> {
    transfer_reference_with(src_image, src_regions, ref_image, ref_regions, &ReferenceConfig::default())
}

/// Histogram-matches skin and lips, then pastes warped reference pixels into
/// the source eyeshadow area weighted by its (smoothed) mask.
pub fn transfer_reference_with(
    src_image: &RasterImage,
    src_regions: &RegionMaskSet,
    ref_image: &RasterImage,
    ref_regions: &RegionMaskSet,
    config: &ReferenceConfig,
) -> Result<RasterImage> {
    for region in ["skin", "lips", "eyes"] {
        for set in [src_regions, ref_regions] {
            required(set, region).map_err(|e| Error::in_region(region, e))?;
        }
    }
    let mut out = src_image.clone();
    for region in ["skin", "lips"] {
        let s = src_regions.require(region)?.support();
        let r = ref_regions.require(region)?.support();
        out = histogram_match(&out, &s, ref_image, &r, config.bins).map_err(|e| Error::in_region(region, e))?;
    }

    let reg = register_eyes(src_regions.require("eyes")?, ref_regions.require("eyes")?, config)
        .map_err(|e| Error::in_region("eyes", e))?;
    let Some(shadow) = src_regions.get("eyeshadow").filter(|m| !m.is_empty()) else {
        return Ok(out);
    };
    let pulled = warp_image_composite(ref_image, &reg.affine, &reg.field, src_image.dims())
        .map_err(|e| Error::in_region("eyeshadow", e))?;
    let mut data = out.into_data();
    for ((y, x, c), v) in data.indexed_iter_mut() {
        let m = shadow.grid[[y, x]];
        if m > 0.0 {
            *v += m * (pulled.data()[[y, x, c]] - *v);
        }
    }
    RasterImage::new(data)
}
