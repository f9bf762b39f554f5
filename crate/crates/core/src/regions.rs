//! Facial-region masks: label-map ingestion, morphological dilation,
//! eyeshadow reconstruction and distance-based gradation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::encode_gray_png;

/// Region names understood by the engine.
pub const KNOWN_REGIONS: &[&str] = &[
    "background",
    "skin",
    "brows",
    "eyes",
    "eyeglasses",
    "ears",
    "earring",
    "nose",
    "mouth",
    "lips",
    "neck",
    "necklace",
    "cloth",
    "hair",
    "hat",
    "other",
    "eyeshadow",
];

/// Regions derived from others rather than read from a label map.
pub const DERIVED_REGIONS: &[&str] = &["eyeshadow"];

fn check_region_name(name: &str) -> Result<()> {
    if KNOWN_REGIONS.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownRegion(name.to_string()))
    }
}

/// Label value to region name. Labels without an entry map to `"other"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMapping {
    table: BTreeMap<u8, String>,
}

impl Default for RegionMapping {
    /// The 19-class face-parsing convention.
    fn default() -> Self {
        let names = [
            "background",
            "skin",
            "brows",
            "brows",
            "eyes",
            "eyes",
            "eyeglasses",
            "ears",
            "ears",
            "earring",
            "nose",
            "mouth",
            "lips",
            "lips",
            "neck",
            "necklace",
            "cloth",
            "hair",
            "hat",
        ];
        Self {
            table: names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u8, n.to_string()))
                .collect(),
        }
    }
}

impl RegionMapping {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, String)>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (label, name) in pairs {
            check_region_name(&name).map_err(|_| {
                Error::Config(format!("label {label} maps to unknown region '{name}'"))
            })?;
            if DERIVED_REGIONS.contains(&name.as_str()) {
                return Err(Error::Config(format!("region '{name}' is derived and cannot be labelled")));
            }
            table.insert(label, name);
        }
        Ok(Self { table })
    }

    /// Parses `label=region` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (label, name) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("mapping line {}: expected 'label=region'", lineno + 1)))?;
            let label: u8 = label
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("mapping line {}: bad label '{}'", lineno + 1, label.trim())))?;
            pairs.push((label, name.trim().to_string()));
        }
        Self::from_pairs(pairs)
    }

    pub fn region_of(&self, label: u8) -> &str {
        self.table.get(&label).map(String::as_str).unwrap_or("other")
    }

    pub fn labels_of<'a>(&'a self, region: &'a str) -> impl Iterator<Item = u8> + 'a {
        self.table
            .iter()
            .filter(move |(_, n)| n.as_str() == region)
            .map(|(l, _)| *l)
    }

    pub fn regions(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.table.values().map(String::as_str).collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    pub fn to_text(&self) -> String {
        self.table.iter().map(|(l, n)| format!("{l}={n}\n")).collect()
    }
}

/// Per-pixel integer labels from an external face parser.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Array2<u8>,
    pub mapping: RegionMapping,
}

impl LabelMap {
    pub fn new(grid: Array2<u8>, mapping: RegionMapping) -> Self {
        Self { grid, mapping }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Reads a single-channel 8-bit raster (PNG). Multi-channel inputs use
    /// their first channel.
    pub fn decode(bytes: &[u8], mapping: RegionMapping) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_image(&img, mapping))
    }

    pub fn load(path: impl AsRef<Path>, mapping: RegionMapping) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_image(&img, mapping))
    }

    fn from_image(img: &image::DynamicImage, mapping: RegionMapping) -> Self {
        let grid = match img {
            image::DynamicImage::ImageLuma8(g) => {
                Array2::from_shape_fn((g.height() as usize, g.width() as usize), |(y, x)| {
                    g.get_pixel(x as u32, y as u32).0[0]
                })
            }
            other => {
                let rgb = other.to_rgb8();
                Array2::from_shape_fn((rgb.height() as usize, rgb.width() as usize), |(y, x)| {
                    rgb.get_pixel(x as u32, y as u32).0[0]
                })
            }
        };
        Self { grid, mapping }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let (h, w) = self.dims();
        let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([self.grid[[y as usize, x as usize]]])
        });
        let mut buf = std::io::Cursor::new(Vec::new());
        image::DynamicImage::ImageLuma8(img).write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// Per-region mask with weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub grid: Array2<f64>,
    pub region: String,
}

impl SoftMask {
    pub fn new(grid: Array2<f64>, region: impl Into<String>) -> Self {
        Self {
            grid: grid.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }),
            region: region.into(),
        }
    }

    pub fn zeros(dims: (usize, usize), region: impl Into<String>) -> Self {
        Self::new(Array2::zeros(dims), region)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn total_weight(&self) -> f64 {
        self.grid.sum()
    }

    /// Number of pixels with positive weight.
    pub fn support_size(&self) -> usize {
        self.grid.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.iter().all(|&v| v <= 0.0)
    }

    pub fn is_binary(&self) -> bool {
        self.grid.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Binary mask of the positive-weight pixels.
    pub fn support(&self) -> SoftMask {
        SoftMask {
            grid: self.grid.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            region: self.region.clone(),
        }
    }

    pub fn renamed(mut self, region: impl Into<String>) -> Self {
        self.region = region.into();
        self
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_gray_png(&self.grid)
    }

    /// Intersection over union of the two supports.
    pub fn iou(&self, other: &SoftMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        Zip::from(&self.grid).and(&other.grid).for_each(|&a, &b| {
            let (a, b) = (a > 0.0, b > 0.0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        });
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Binary mask of the pixels whose label maps to `region`.
pub fn labelmap_to_mask(labelmap: &LabelMap, region: &str) -> Result<SoftMask> {
    check_region_name(region)?;
    if DERIVED_REGIONS.contains(&region) {
        return Err(Error::UnknownRegion(format!("{region} (derived, not labelled)")));
    }
    let grid = labelmap
        .grid
        .mapv(|l| if labelmap.mapping.region_of(l) == region { 1.0 } else { 0.0 });
    Ok(SoftMask::new(grid, region))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    Cross,
    Box,
}

/// Structuring element anchored at `(height / 2, width / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringKernel {
    pub shape: KernelShape,
    pub height: usize,
    pub width: usize,
}

impl StructuringKernel {
    pub fn cross(height: usize, width: usize) -> Self {
        Self {
            shape: KernelShape::Cross,
            height,
            width,
        }
    }

    pub fn rect(height: usize, width: usize) -> Self {
        Self {
            shape: KernelShape::Box,
            height,
            width,
        }
    }

    pub fn anchor(&self) -> (isize, isize) {
        ((self.height / 2) as isize, (self.width / 2) as isize)
    }

    /// Footprint offsets relative to the anchor.
    pub fn offsets(&self) -> Result<Vec<(isize, isize)>> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Parameter("structuring kernel must have a nonempty footprint".into()));
        }
        let (ay, ax) = self.anchor();
        let mut out = Vec::new();
        for r in 0..self.height as isize {
            for c in 0..self.width as isize {
                let on = match self.shape {
                    KernelShape::Box => true,
                    KernelShape::Cross => r == ay || c == ax,
                };
                if on {
                    out.push((r - ay, c - ax));
                }
            }
        }
        Ok(out)
    }
}

/// Iterated morphological dilation (max filter over the kernel footprint).
/// On binary masks this is binary dilation; `iterations == 0` is identity.
pub fn dilate(mask: &SoftMask, kernel: &StructuringKernel, iterations: usize) -> Result<SoftMask> {
    let offsets = kernel.offsets()?;
    let (h, w) = mask.dims();
    let mut cur = mask.grid.clone();
    for _ in 0..iterations {
        let mut next = Array2::<f64>::zeros((h, w));
        for ((y, x), &v) in cur.indexed_iter() {
            if v <= 0.0 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ty, tx) = (y as isize + dy, x as isize + dx);
                if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                    let slot = &mut next[[ty as usize, tx as usize]];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        cur = next;
    }
    Ok(SoftMask::new(cur, mask.region.clone()))
}

/// Translates by `(dy, dx)` pixels, filling with zeros.
pub fn translate(mask: &SoftMask, dy: isize, dx: isize) -> Result<SoftMask> {
    let (h, w) = mask.dims();
    if dy.unsigned_abs() >= h.max(1) || dx.unsigned_abs() >= w.max(1) {
        return Err(Error::Parameter(format!(
            "shift ({dy}, {dx}) exceeds the {h}x{w} mask"
        )));
    }
    let grid = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = (y as isize - dy, x as isize - dx);
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            mask.grid[[sy as usize, sx as usize]]
        } else {
            0.0
        }
    });
    Ok(SoftMask::new(grid, mask.region.clone()))
}

/// Reconstructs an eyeshadow mask from an eye mask: dilate, shift, then
/// remove the eye interior.
pub fn build_eyeshadow_mask(
    eye_mask: &SoftMask,
    kernel: &StructuringKernel,
    iterations: usize,
    shift: (isize, isize),
) -> Result<SoftMask> {
    let grown = dilate(&eye_mask.support(), kernel, iterations)?;
    let moved = translate(&grown, shift.0, shift.1)?;
    let grid = Zip::from(&moved.grid)
        .and(&eye_mask.grid)
        .map_collect(|&m, &e| if e > 0.0 { 0.0 } else { m });
    Ok(SoftMask::new(grid, "eyeshadow"))
}

/// Default eyeshadow shift: upward by half the kernel height.
pub fn default_eyeshadow_shift(kernel: &StructuringKernel) -> (isize, isize) {
    (-((kernel.height / 2) as isize), 0)
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn squared_dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    // Skip leading infinite samples; they never form the envelope.
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from each pixel to the nearest pixel where
/// `is_feature` holds. Pixels outside the grid are not features; with no
/// features every distance is infinite.
pub fn distance_transform(grid: &Array2<f64>, is_feature: impl Fn(f64) -> bool) -> Array2<f64> {
    let (h, w) = grid.dim();
    let mut sq = grid.mapv(|v| if is_feature(v) { 0.0 } else { f64::INFINITY });
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| sq[[y, x]]).collect();
        squared_dt_1d(&col, &mut buf[..h]);
        for y in 0..h {
            sq[[y, x]] = buf[y];
        }
    }
    for y in 0..h {
        let row: Vec<f64> = (0..w).map(|x| sq[[y, x]]).collect();
        squared_dt_1d(&row, &mut buf[..w]);
        for x in 0..w {
            sq[[y, x]] = buf[x];
        }
    }
    sq.mapv(f64::sqrt)
}

/// Soft edges: makeup opacity is 1 deep inside the mask and falls off toward
/// its outer boundary. With `d` the Euclidean distance to the nearest pixel
/// outside the mask, the blend-back weight `exp(-decay_rate * d)` grows
/// toward the boundary and the returned opacity is `m * (1 - exp(-decay_rate * d))`.
/// The image border is not treated as outside.
pub fn gradation_smooth(mask: &SoftMask, decay_rate: f64) -> Result<SoftMask> {
    if !(decay_rate > 0.0) || decay_rate.is_nan() {
        return Err(Error::Parameter(format!("decay rate must be positive, got {decay_rate}")));
    }
    let dist = distance_transform(&mask.grid, |v| v <= 0.0);
    let grid = Zip::from(&mask.grid)
        .and(&dist)
        .map_collect(|&m, &d| if m <= 0.0 { 0.0 } else { m * (1.0 - (-decay_rate * d).exp()) });
    Ok(SoftMask::new(grid, mask.region.clone()))
}

/// Mask-engineering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub eyeshadow_kernel: StructuringKernel,
    pub dilation_iterations: usize,
    /// `None` uses [`default_eyeshadow_shift`].
    pub eyeshadow_shift: Option<(isize, isize)>,
    pub eyeshadow_decay: f64,
    pub lip_decay: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            eyeshadow_kernel: StructuringKernel::cross(12, 7),
            dilation_iterations: 2,
            eyeshadow_shift: None,
            eyeshadow_decay: 0.35,
            lip_decay: 2.0,
        }
    }
}

impl RegionConfig {
    pub fn shift(&self) -> (isize, isize) {
        self.eyeshadow_shift
            .unwrap_or_else(|| default_eyeshadow_shift(&self.eyeshadow_kernel))
    }

    pub fn validate(&self) -> Result<()> {
        self.eyeshadow_kernel.offsets()?;
        for (name, v) in [("eyeshadow_decay", self.eyeshadow_decay), ("lip_decay", self.lip_decay)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Masks keyed by region name, all of one size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegionMaskSet {
    masks: BTreeMap<String, SoftMask>,
}

impl RegionMaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mask: SoftMask) {
        self.masks.insert(mask.region.clone(), mask);
    }

    pub fn get(&self, region: &str) -> Option<&SoftMask> {
        self.masks.get(region)
    }

    pub fn require(&self, region: &str) -> Result<&SoftMask> {
        self.get(region)
            .ok_or_else(|| Error::MissingRegion(region.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SoftMask> {
        self.masks.values()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Full mask set for a label map: one binary mask per mapped region,
    /// a reconstructed and smoothed eyeshadow mask, smoothed lips, and skin
    /// with the eyeshadow footprint removed.
    pub fn from_labelmap(labelmap: &LabelMap, config: &RegionConfig) -> Result<Self> {
        config.validate()?;
        let mut set = Self::new();
        for region in labelmap.mapping.regions() {
            set.insert(labelmap_to_mask(labelmap, region)?);
        }
        let dims = labelmap.dims();
        let eyes = set.get("eyes").cloned().unwrap_or_else(|| SoftMask::zeros(dims, "eyes"));
        let shadow = build_eyeshadow_mask(&eyes, &config.eyeshadow_kernel, config.dilation_iterations, config.shift())?;
        let shadow = gradation_smooth(&shadow, config.eyeshadow_decay)?;
        if let Some(skin) = set.get("skin") {
            let grid = Zip::from(&skin.grid)
                .and(&shadow.grid)
                .map_collect(|&s, &e| if e > 0.0 { 0.0 } else { s });
            set.insert(SoftMask::new(grid, "skin"));
        }
        set.insert(shadow);
        if let Some(lips) = set.get("lips") {
            let smoothed = gradation_smooth(lips, config.lip_decay)?;
            set.insert(smoothed);
        }
        Ok(set)
    }
}
