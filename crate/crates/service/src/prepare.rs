//! Turns raw uploaded inputs into a runnable job, or a client-facing rejection.
//!
//! The same code runs at submit time (so bad requests fail fast with a 4xx)
//! and again in the worker when the job is picked up.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use makeup_core::backend::{build_backend, Backend, BackendSettings, Codec};
use makeup_core::config::SpecDocument;
use makeup_core::fixtures::{fixture_by_name, palette_segment};
use makeup_core::pipeline::{segment_or_load, LabelSource, MakeupJob, ReferenceInput};
use makeup_core::raster::RasterImage;
use makeup_core::regions::{LabelMap, RegionMapping, RegionMaskSet};
use makeup_core::Error;
use serde::Serialize;

use crate::store::JobInputs;

/// A request that cannot be run, with the HTTP status it maps to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl Rejection {
    pub fn new(status: u16, field: Option<&str>, error: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            field: field.map(str::to_string),
        }
    }

    pub fn bad_request(field: &str, error: impl std::fmt::Display) -> Self {
        Self::new(400, Some(field), error.to_string())
    }

    pub fn unprocessable(field: &str, error: impl std::fmt::Display) -> Self {
        Self::new(422, Some(field), error.to_string())
    }
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.error),
            None => f.write_str(&self.error),
        }
    }
}

/// Lazily built, shared backends keyed by id.
pub struct BackendPool {
    settings: BackendSettings,
    cache: Mutex<HashMap<String, Arc<dyn Backend>>>,
}

impl BackendPool {
    pub fn new(settings: BackendSettings) -> Self {
        Self {
            settings,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn settings(&self) -> &BackendSettings {
        &self.settings
    }

    pub fn get(&self, id: &str) -> makeup_core::Result<Arc<dyn Backend>> {
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(b) = cache.get(id) {
            return Ok(b.clone());
        }
        let backend = build_backend(id, &self.settings)?;
        cache.insert(id.to_string(), backend.clone());
        Ok(backend)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    /// Largest accepted `height * width` of any uploaded image.
    pub max_pixels: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_pixels: 1024 * 1024 }
    }
}

pub struct Prepared {
    pub job: MakeupJob,
    pub backend: Arc<dyn Backend>,
    pub document: SpecDocument,
}

fn decode_image(bytes: &[u8], field: &str, limits: &Limits) -> Result<RasterImage, Rejection> {
    let (h, w) = RasterImage::probe_dimensions(bytes).map_err(|e| Rejection::bad_request(field, e))?;
    if h.saturating_mul(w) > limits.max_pixels {
        return Err(Rejection::new(
            413,
            Some(field),
            format!("image is {h}x{w}, above the limit of {} pixels", limits.max_pixels),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Rejection::bad_request(field, "image is empty"));
    }
    RasterImage::decode(bytes).map_err(|e| Rejection::bad_request(field, e))
}

fn mapping_from(inputs: &JobInputs) -> Result<RegionMapping, Rejection> {
    match &inputs.mapping {
        Some(text) => RegionMapping::parse(text).map_err(|e| Rejection::bad_request("mapping", e)),
        None => Ok(RegionMapping::default()),
    }
}

fn label_source(
    image: &RasterImage,
    labels: Option<&[u8]>,
    fixture: Option<&str>,
    default_fixture: &str,
    mapping: &RegionMapping,
    field: &str,
) -> Result<LabelMap, Rejection> {
    let map = match labels {
        Some(bytes) => LabelMap::decode(bytes, mapping.clone()).map_err(|e| Rejection::bad_request(field, e))?,
        None => {
            let name = fixture.unwrap_or(default_fixture);
            let fixture_field = if field == "labels" { "fixture" } else { "reference_fixture" };
            let f = fixture_by_name(name).map_err(|e| Rejection::bad_request(fixture_field, e))?;
            palette_segment(image, &f.palette)
        }
    };
    if map.dims() != image.dims() {
        let (h, w) = image.dims();
        let (lh, lw) = map.dims();
        return Err(Rejection::unprocessable(
            field,
            format!("label map is {lh}x{lw} but the image is {h}x{w}"),
        ));
    }
    Ok(map)
}

fn require_regions(masks: &RegionMaskSet, regions: &[&str], field: &str) -> Result<(), Rejection> {
    for region in regions {
        if masks.get(region).is_none_or(|m| m.is_empty()) {
            return Err(Rejection::unprocessable(field, format!("required region '{region}' is empty")));
        }
    }
    Ok(())
}

/// Maps an error from [`makeup_core`] raised while checking inputs.
fn input_error(e: Error, field: &str) -> Rejection {
    match e.root() {
        Error::Config(_) | Error::Image(_) | Error::UnknownRegion(_) => Rejection::bad_request(field, e),
        _ => Rejection::unprocessable(field, e),
    }
}

/// Validates and assembles a job. Cheap compared with running it.
pub fn prepare(inputs: &JobInputs, pool: &BackendPool, default_backend: &str, limits: &Limits) -> Result<Prepared, Rejection> {
    let document = SpecDocument::parse(&inputs.spec).map_err(|e| Rejection::new(400, Some(&e.field), e.message))?;
    let backend_id = inputs.backend.as_deref().unwrap_or(default_backend);
    let backend = pool.get(backend_id).map_err(|e| Rejection::bad_request("backend", e))?;
    let train_t = backend.schedule().len();
    if inputs.reference.is_none() {
        // Fail fast before decoding images; reference jobs are checked below.
        document
            .check(train_t)
            .map_err(|e| Rejection::new(400, Some(&e.field), e.message))?;
    }
    if !document.concepts.is_empty() && !backend.supports_attention_hooks() {
        return Err(Rejection::unprocessable(
            "concepts",
            format!("backend '{backend_id}' has no attention hooks, so concept prompts cannot be applied"),
        ));
    }

    let mapping = mapping_from(inputs)?;
    let image = decode_image(&inputs.image, "image", limits)?;
    if backend.codec() == Some(Codec::AvgPool2) && (image.height() % 2 != 0 || image.width() % 2 != 0) {
        return Err(Rejection::unprocessable("image", "this backend needs even image dimensions"));
    }
    let labels = label_source(
        &image,
        inputs.labels.as_deref(),
        inputs.fixture.as_deref(),
        "face-a",
        &mapping,
        "labels",
    )?;

    let reference = match &inputs.reference {
        Some(bytes) => {
            let ref_image = decode_image(bytes, "reference", limits)?;
            let ref_labels = label_source(
                &ref_image,
                inputs.reference_labels.as_deref(),
                inputs.reference_fixture.as_deref(),
                "face-b",
                &mapping,
                "reference_labels",
            )?;
            Some(ReferenceInput {
                image: ref_image,
                labels: ref_labels,
            })
        }
        None if inputs.reference_labels.is_some() => {
            return Err(Rejection::bad_request("reference", "reference labels were sent without a reference image"));
        }
        None => None,
    };

    let spec = document
        .clone()
        .into_spec(reference, train_t)
        .map_err(|e| Rejection::new(400, Some(&e.field), e.message))?;
    let job = MakeupJob {
        image,
        labels: LabelSource::Provided(labels),
        spec,
        backend_id: backend_id.to_string(),
        debug: inputs.debug,
    };

    let masks = segment_or_load(&job).map_err(|e| input_error(e, "labels"))?;
    for (i, target) in job.spec.color_targets.iter().enumerate() {
        if masks.get(&target.region).is_none_or(|m| m.is_empty()) {
            return Err(Rejection::unprocessable(
                &format!("color_targets[{i}].region"),
                format!("region '{}' is empty in the label map", target.region),
            ));
        }
    }
    if let Some(r) = &job.spec.reference {
        const NEEDED: [&str; 3] = ["skin", "lips", "eyes"];
        require_regions(&masks, &NEEDED, "labels")?;
        let ref_masks = RegionMaskSet::from_labelmap(&r.labels, &job.spec.regions)
            .map_err(|e| input_error(e, "reference_labels"))?;
        require_regions(&ref_masks, &NEEDED, "reference_labels")?;
    }
    Ok(Prepared { job, backend, document })
}

#[cfg(test)]
mod tests {
    use super::*;
    use makeup_core::fixtures::fixture_by_name;

    fn pool() -> BackendPool {
        BackendPool::new(BackendSettings::default())
    }

    fn inputs(spec: &str) -> JobInputs {
        JobInputs {
            image: fixture_by_name("face-a").unwrap().image.encode_png().unwrap(),
            spec: spec.into(),
            ..JobInputs::default()
        }
    }

    const LIPS: &str = r##"{"color_targets":[{"region":"lips","color":"#B03A4A","alpha":0.8}]}"##;

    #[test]
    fn valid_color_job_prepares() {
        let p = prepare(&inputs(LIPS), &pool(), "toy", &Limits::default()).unwrap();
        assert_eq!(p.job.backend_id, "toy");
        assert_eq!(p.job.spec.color_targets.len(), 1);
    }

    #[test]
    fn alpha_out_of_range_names_field() {
        let spec = r##"{"color_targets":[{"region":"lips","color":"#B03A4A","alpha":1.5}]}"##;
        let r = prepare(&inputs(spec), &pool(), "toy", &Limits::default()).err().unwrap();
        assert_eq!((r.status, r.field.as_deref()), (400, Some("color_targets[0].alpha")));
    }

    #[test]
    fn size_mismatch_is_unprocessable() {
        let mut i = inputs(LIPS);
        i.labels = Some(fixture_by_name("face-a").unwrap().labels.encode_png().unwrap()[..].to_vec());
        i.image = makeup_core::fixtures::fixture_sized("face-a", 64).unwrap().image.encode_png().unwrap();
        let r = prepare(&i, &pool(), "toy", &Limits::default()).err().unwrap();
        assert_eq!(r.status, 422);
    }

    #[test]
    fn oversize_image_is_413() {
        let r = prepare(&inputs(LIPS), &pool(), "toy", &Limits { max_pixels: 100 }).err().unwrap();
        assert_eq!(r.status, 413);
    }

    #[test]
    fn concepts_need_hooks() {
        let spec = r#"{"concepts":["red lips:0.5"]}"#;
        let r = prepare(&inputs(spec), &pool(), "analytic", &Limits::default()).err().unwrap();
        assert_eq!((r.status, r.field.as_deref()), (422, Some("concepts")));
    }

    #[test]
    fn missing_lips_is_unprocessable() {
        let f = fixture_by_name("face-a").unwrap();
        let mut grid = f.labels.grid.clone();
        grid.mapv_inplace(|l| if l == 12 || l == 13 { 1 } else { l });
        let mut i = inputs(LIPS);
        i.labels = Some(LabelMap::new(grid, RegionMapping::default()).encode_png().unwrap());
        let r = prepare(&i, &pool(), "toy", &Limits::default()).err().unwrap();
        assert_eq!((r.status, r.field.as_deref()), (422, Some("color_targets[0].region")));
    }

    #[test]
    fn mapping_with_unknown_region_is_rejected() {
        let mut i = inputs(LIPS);
        i.mapping = Some("1=skin\n2=freckles\n".into());
        let r = prepare(&i, &pool(), "toy", &Limits::default()).err().unwrap();
        assert_eq!((r.status, r.field.as_deref()), (400, Some("mapping")));
    }
}
