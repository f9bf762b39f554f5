//! Region-masked RGB makeup transfer.
//!
//! The transform shifts a region's mean color toward a target:
//! `T(x) = (sigma_src / sigma_tgt) * (x - alpha * (mu_src - mu_tgt))`, with
//! `sigma_src = sigma_tgt` under the default equalize policy. Soft masks blend
//! the full-strength result back by weight.

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::regions::{RegionMaskSet, SoftMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaPolicy {
    Equalize,
    Explicit { sigma_tgt: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionColorTarget {
    pub region: String,
    pub mu_tgt: [f64; 3],
    pub alpha: f64,
    pub sigma_policy: SigmaPolicy,
}

impl RegionColorTarget {
    pub fn new(region: impl Into<String>, mu_tgt: [f64; 3], alpha: f64) -> Result<Self> {
        let t = Self {
            region: region.into(),
            mu_tgt,
            alpha,
            sigma_policy: SigmaPolicy::Equalize,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.mu_tgt.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Parameter(format!("target color {:?} is out of gamut", self.mu_tgt)));
        }
        if let SigmaPolicy::Explicit { sigma_tgt } = self.sigma_policy {
            if sigma_tgt.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(Error::Parameter(format!("sigma_tgt must be positive, got {sigma_tgt:?}")));
            }
        }
        Ok(())
    }
}

/// Mask-weighted per-channel mean and (population) standard deviation.
pub fn region_stats(image: &RasterImage, mask: &SoftMask) -> Result<([f64; 3], [f64; 3])> {
    check_dims(image, mask)?;
    let total = mask.total_weight();
    if !(total > 0.0) {
        return Err(Error::EmptyRegion(mask.region.clone()));
    }
    let mut mu = [0.0; 3];
    let mut sigma = [0.0; 3];
    for (c, plane) in image.data().axis_iter(Axis(2)).enumerate() {
        let m = Zip::from(&plane).and(&mask.grid).fold(0.0, |acc, &v, &w| acc + w * v) / total;
        let var = Zip::from(&plane)
            .and(&mask.grid)
            .fold(0.0, |acc, &v, &w| acc + w * (v - m) * (v - m))
            / total;
        mu[c] = m;
        sigma[c] = var.max(0.0).sqrt();
    }
    Ok((mu, sigma))
}

fn check_dims(image: &RasterImage, mask: &SoftMask) -> Result<()> {
    if image.dims() != mask.dims() {
        let (h, w) = image.dims();
        let (mh, mw) = mask.dims();
        return Err(Error::shape(&[h, w], &[mh, mw]));
    }
    Ok(())
}

/// Applies the color transform inside `mask`; zero-weight pixels are left
/// bit-identical.
pub fn apply_rgb_transfer(image: &RasterImage, mask: &SoftMask, target: &RegionColorTarget) -> Result<RasterImage> {
    target.validate()?;
    let (mu_src, sigma_src) = region_stats(image, mask)?;
    let mut gain = [1.0; 3];
    if let SigmaPolicy::Explicit { sigma_tgt } = target.sigma_policy {
        for c in 0..3 {
            gain[c] = sigma_src[c] / sigma_tgt[c];
        }
    }
    let shift: [f64; 3] = std::array::from_fn(|c| target.alpha * (mu_src[c] - target.mu_tgt[c]));
    let mut out: Array3<f64> = image.data().clone();
    for ((y, x, c), v) in out.indexed_iter_mut() {
        let m = mask.grid[[y, x]];
        if m <= 0.0 {
            continue;
        }
        let full = gain[c] * (*v - shift[c]);
        *v = (*v + m * (full - *v)).clamp(0.0, 1.0);
    }
    RasterImage::new(out)
}

/// Precedence used by [`compose_regions`]; later entries win in overlaps.
pub const REGION_ORDER: &[&str] = &["skin", "eyeshadow", "lips"];

fn precedence(region: &str) -> usize {
    REGION_ORDER
        .iter()
        .position(|r| *r == region)
        .unwrap_or(REGION_ORDER.len())
}

/// Applies every target in precedence order skin, eyeshadow, lips (other
/// regions last, in the given order). Each step reads statistics from the
/// current intermediate image.
pub fn compose_regions(image: &RasterImage, targets: &[RegionColorTarget], masks: &RegionMaskSet) -> Result<RasterImage> {
    let mut ordered: Vec<&RegionColorTarget> = targets.iter().collect();
    ordered.sort_by_key(|t| precedence(&t.region));
    let mut cur = image.clone();
    for target in ordered {
        let mask = masks.require(&target.region)?;
        cur = apply_rgb_transfer(&cur, mask, target).map_err(|e| match e {
            e @ Error::EmptyRegion(_) => e,
            other => Error::in_region(&target.region, other),
        })?;
    }
    Ok(cur)
}
