//! End-to-end makeup job: encode, invert to an intermediate time, take the
//! denoised estimate into pixel space, apply makeup transforms, re-noise, and
//! sample back with prompt composition and interpolation guidance.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Codec, Conditioning, CrossAttentionHook};
use crate::color::{compose_regions, RegionColorTarget};
use crate::error::{Error, Result};
use crate::fixtures::fixture_by_name;
use crate::fixtures::palette_segment;
use crate::harmonize::{CompositionConfig, CompositionHook, GuidanceConfig, GuidanceTarget, GuidedSampler};
use crate::raster::RasterImage;
use crate::reference::{transfer_reference_with, ReferenceConfig};
use crate::regions::{LabelMap, RegionConfig, RegionMaskSet};
use crate::schedule::{invert_with, renoise, tweedie_denoise, uniform_grid, InversionPlan, Latent, NoiseSchedule};

/// A reference face and its labels.
#[derive(Debug, Clone)]
pub struct ReferenceInput {
    pub image: RasterImage,
    pub labels: LabelMap,
}

/// What the user asked for.
#[derive(Debug, Clone)]
pub struct MakeupSpec {
    pub color_targets: Vec<RegionColorTarget>,
    pub reference: Option<ReferenceInput>,
    pub composition: CompositionConfig,
    pub guidance: GuidanceConfig,
    pub regions: RegionConfig,
    pub reference_config: ReferenceConfig,
    pub t_star: usize,
    pub inversion_steps: usize,
    pub reverse_steps: usize,
    /// Every stage is deterministic; the seed is recorded for reproducibility.
    pub seed: u64,
    /// Classifier-free guidance scale for the main prompt; 0 disables it.
    pub guidance_scale: f64,
}

impl Default for MakeupSpec {
    fn default() -> Self {
        Self {
            color_targets: Vec::new(),
            reference: None,
            composition: CompositionConfig::default(),
            guidance: GuidanceConfig::default(),
            regions: RegionConfig::default(),
            reference_config: ReferenceConfig::default(),
            t_star: 300,
            inversion_steps: 20,
            reverse_steps: 30,
            seed: 0,
            guidance_scale: 0.0,
        }
    }
}

impl MakeupSpec {
    /// Checks spec invariants against a noise schedule of length `train_timesteps`.
    pub fn validate(&self, train_timesteps: usize) -> Result<()> {
        if self.color_targets.is_empty() && self.reference.is_none() && self.composition.concepts.is_empty() {
            return Err(Error::Config(
                "spec needs at least one color target, a reference image or a concept prompt".into(),
            ));
        }
        if self.t_star == 0 || self.t_star > train_timesteps {
            return Err(Error::Parameter(format!(
                "t_star must lie in [1, {train_timesteps}], got {}",
                self.t_star
            )));
        }
        for (name, steps) in [("inversion_steps", self.inversion_steps), ("reverse_steps", self.reverse_steps)] {
            if steps == 0 || steps > self.t_star {
                return Err(Error::Parameter(format!(
                    "{name} must lie in [1, t_star={}], got {steps}",
                    self.t_star
                )));
            }
        }
        for target in &self.color_targets {
            target.validate().map_err(|e| Error::in_region(&target.region, e))?;
        }
        self.guidance.validate()?;
        self.regions.validate()?;
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Parameter(format!("guidance_scale must be >= 0, got {}", self.guidance_scale)));
        }
        if self.composition.main_prompt.trim().is_empty() {
            return Err(Error::Parameter("main prompt is empty".into()));
        }
        if let Some(r) = &self.reference {
            if r.image.dims() != r.labels.dims() {
                return Err(Error::Config("reference image and label map sizes differ".into()));
            }
        }
        Ok(())
    }

    fn has_transform(&self) -> bool {
        !self.color_targets.is_empty() || self.reference.is_some()
    }
}

/// Where the source labels come from.
#[derive(Debug, Clone)]
pub enum LabelSource {
    Provided(LabelMap),
    /// Built-in segmenter for images drawn with the named fixture palette.
    Fixture(String),
}

#[derive(Debug, Clone)]
pub struct MakeupJob {
    pub image: RasterImage,
    pub labels: LabelSource,
    pub spec: MakeupSpec,
    pub backend_id: String,
    /// Keep intermediate images and masks in the result.
    pub debug: bool,
}

#[derive(Debug, Clone)]
pub struct Intermediates {
    pub x0_hat: RasterImage,
    pub x_new: RasterImage,
    pub masks: RegionMaskSet,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    /// `(stage, milliseconds)` in execution order.
    pub stages: Vec<(String, f64)>,
    /// Latency of every denoiser call, in milliseconds.
    pub denoiser_calls_ms: Vec<f64>,
}

impl Timings {
    pub fn denoiser_percentile(&self, p: f64) -> Option<f64> {
        if self.denoiser_calls_ms.is_empty() {
            return None;
        }
        let mut v = self.denoiser_calls_ms.clone();
        v.sort_by(f64::total_cmp);
        let idx = ((p / 100.0) * (v.len() - 1) as f64).round() as usize;
        Some(v[idx.min(v.len() - 1)])
    }
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub output: RasterImage,
    pub intermediates: Option<Intermediates>,
    pub timings: Timings,
    pub stage_log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub stage: String,
    /// Overall completion in `[0, 1]`, non-decreasing over a job.
    pub fraction: f64,
    /// `(done, total)` within an iterative stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<(usize, usize)>,
}

pub type ProgressSink = Arc<dyn Fn(ProgressEvent) + Send + Sync>;

/// Cancellation, time budget and progress reporting for one job.
#[derive(Clone, Default)]
pub struct JobControl {
    pub cancel: Arc<AtomicBool>,
    pub deadline: Option<Instant>,
    pub progress: Option<ProgressSink>,
}

impl std::fmt::Debug for JobControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JobControl")
            .field("cancelled", &self.cancel.load(Ordering::Relaxed))
            .field("deadline", &self.deadline)
            .finish()
    }
}

impl JobControl {
    pub fn with_timeout(budget: Duration) -> Self {
        Self {
            deadline: Some(Instant::now() + budget),
            ..Self::default()
        }
    }

    pub fn checkpoint(&self) -> Result<()> {
        if self.cancel.load(Ordering::SeqCst) {
            return Err(Error::Cancelled);
        }
        if self.deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(Error::Timeout);
        }
        Ok(())
    }
}

/// Stage names in execution order.
pub const STAGES: &[&str] = &[
    "segment",
    "encode",
    "invert",
    "tweedie",
    "decode_estimate",
    "customize",
    "renoise",
    "reverse",
    "decode",
];

/// Records the latency of every denoiser call of the wrapped backend.
struct TimedBackend<'a> {
    inner: &'a dyn Backend,
    calls: Mutex<Vec<f64>>,
}

impl Backend for TimedBackend<'_> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn latent_shape(&self, height: usize, width: usize) -> Vec<usize> {
        self.inner.latent_shape(height, width)
    }
    fn encode(&self, image: &RasterImage) -> Result<Latent> {
        self.inner.encode(image)
    }
    fn decode(&self, latent: &Latent) -> Result<RasterImage> {
        self.inner.decode(latent)
    }
    fn codec_tolerance(&self) -> f64 {
        self.inner.codec_tolerance()
    }
    fn codec(&self) -> Option<Codec> {
        self.inner.codec()
    }
    fn encode_text(&self, prompt: &str) -> Result<Conditioning> {
        self.inner.encode_text(prompt)
    }
    fn predict_eps(
        &self,
        z: &Latent,
        t: usize,
        cond: &Conditioning,
        hook: Option<&dyn CrossAttentionHook>,
    ) -> Result<Latent> {
        let start = Instant::now();
        let out = self.inner.predict_eps(z, t, cond, hook);
        self.calls
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(start.elapsed().as_secs_f64() * 1e3);
        out
    }
    fn supports_attention_hooks(&self) -> bool {
        self.inner.supports_attention_hooks()
    }
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }
}

/// Builds the full mask set for the job's source image.
pub fn segment_or_load(job: &MakeupJob) -> Result<RegionMaskSet> {
    let labels = match &job.labels {
        LabelSource::Provided(l) => l.clone(),
        LabelSource::Fixture(name) => {
            let fixture = fixture_by_name(name)?;
            palette_segment(&job.image, &fixture.palette)
        }
    };
    if labels.dims() != job.image.dims() {
        let (h, w) = job.image.dims();
        let (lh, lw) = labels.dims();
        return Err(Error::Config(format!("label map is {lh}x{lw} but the image is {h}x{w}")));
    }
    RegionMaskSet::from_labelmap(&labels, &job.spec.regions)
}

/// Applies the configured makeup transform: reference transfer first, then
/// color targets.
pub fn apply_transform(
    image: &RasterImage,
    masks: &RegionMaskSet,
    spec: &MakeupSpec,
    ref_masks: Option<&RegionMaskSet>,
) -> Result<RasterImage> {
    let mut out = image.clone();
    if let (Some(reference), Some(ref_masks)) = (&spec.reference, ref_masks) {
        out = transfer_reference_with(&out, masks, &reference.image, ref_masks, &spec.reference_config)?;
    }
    if !spec.color_targets.is_empty() {
        out = compose_regions(&out, &spec.color_targets, masks)?;
    }
    Ok(out)
}

struct Run<'a> {
    control: &'a JobControl,
    log: Vec<String>,
    timings: Timings,
    done_units: usize,
    total_units: usize,
}

impl Run<'_> {
    fn emit(&self, stage: &str, step: Option<(usize, usize)>) {
        if let Some(sink) = &self.control.progress {
            sink(ProgressEvent {
                stage: stage.to_string(),
                fraction: (self.done_units as f64 / self.total_units as f64).min(1.0),
                step,
            });
        }
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.control.checkpoint()?;
        let start = Instant::now();
        self.log.push(name.to_string());
        let out = f(self).map_err(|e| Error::at_stage(name, e))?;
        self.timings
            .stages
            .push((name.to_string(), start.elapsed().as_secs_f64() * 1e3));
        self.done_units += 1;
        self.emit(name, None);
        Ok(out)
    }
}

/// Runs a job to completion on `backend`.
pub fn run_makeup(job: &MakeupJob, backend: &dyn Backend, control: &JobControl) -> Result<JobResult> {
    let spec = &job.spec;
    let schedule = backend.schedule();
    spec.validate(schedule.len())?;
    if !spec.composition.concepts.is_empty() && !backend.supports_attention_hooks() {
        return Err(Error::Unsupported(backend.id().to_string()));
    }
    if let Some(codec) = backend.codec() {
        if codec == Codec::AvgPool2 && (job.image.height() % 2 != 0 || job.image.width() % 2 != 0) {
            return Err(Error::Parameter("the pooling codec needs even image dimensions".into()));
        }
    }

    let timed = TimedBackend {
        inner: backend,
        calls: Mutex::new(Vec::new()),
    };
    let mut run = Run {
        control,
        log: Vec::new(),
        timings: Timings::default(),
        done_units: 0,
        total_units: STAGES.len() + spec.inversion_steps + spec.reverse_steps,
    };
    run.emit("start", None);

    let (masks, ref_masks) = run.stage("segment", |_| {
        let masks = segment_or_load(job)?;
        let ref_masks = match &spec.reference {
            Some(r) => Some(RegionMaskSet::from_labelmap(&r.labels, &spec.regions)?),
            None => None,
        };
        Ok((masks, ref_masks))
    })?;
    let cond = backend
        .encode_text(&spec.composition.main_prompt)?
        .with_guidance_scale(spec.guidance_scale)?;
    let hook = if spec.composition.concepts.is_empty() {
        None
    } else {
        Some(CompositionHook::new(backend, &spec.composition)?)
    };

    let z0 = run.stage("encode", |_| timed.encode(&job.image))?;

    let trace = run.stage("invert", |run| {
        let total = spec.inversion_steps;
        let mut on_step = |done: usize, _total: usize| -> Result<()> {
            run.done_units += 1;
            run.emit("invert", Some((done, total)));
            run.control.checkpoint()
        };
        invert_with(
            &timed,
            schedule,
            &z0,
            InversionPlan::new(spec.t_star, spec.inversion_steps),
            &cond,
            &mut on_step,
        )
    })?;

    let z0_hat = run.stage("tweedie", |_| tweedie_denoise(schedule, &trace.z_tstar, trace.t_star, &trace.eps_at_tstar))?;
    let x0_hat = run.stage("decode_estimate", |_| timed.decode(&z0_hat))?;

    let guidance_on = spec.guidance.lambda > 0.0 && spec.guidance.apply_steps > 0 && spec.has_transform();
    let (x_new, target) = run.stage("customize", |_| {
        let x_new = apply_transform(&x0_hat, &masks, spec, ref_masks.as_ref())?;
        let target = if guidance_on {
            let x0_prime = apply_transform(&job.image, &masks, spec, ref_masks.as_ref())?;
            Some(GuidanceTarget {
                z0_prime: timed.encode(&x0_prime)?,
                x0_prime: Some(x0_prime),
            })
        } else {
            None
        };
        Ok((x_new, target))
    })?;

    let z_start = run.stage("renoise", |_| {
        let z_new = timed.encode(&x_new)?;
        renoise(schedule, &z_new, &trace)
    })?;

    let z_final = run.stage("reverse", |run| {
        let guidance = if guidance_on {
            spec.guidance
        } else {
            GuidanceConfig {
                lambda: 0.0,
                ..spec.guidance
            }
        };
        let sampler = GuidedSampler {
            backend: &timed,
            schedule,
            conditioning: &cond,
            hook: hook.as_ref().map(|h| h as &dyn CrossAttentionHook),
            target: target.as_ref(),
            guidance,
        };
        let grid = uniform_grid(spec.t_star, spec.reverse_steps)?;
        let total = spec.reverse_steps;
        let mut z = z_start;
        for (i, pair) in grid.windows(2).rev().enumerate() {
            z = sampler.step(&z, pair[1], pair[0], i)?;
            run.done_units += 1;
            run.emit("reverse", Some((i + 1, total)));
            run.control.checkpoint()?;
        }
        Ok(z)
    })?;

    let output = run.stage("decode", |_| timed.decode(&z_final))?;
    if output.dims() != job.image.dims() {
        return Err(Error::at_stage(
            "decode",
            Error::Numeric("decoded output size differs from the input".into()),
        ));
    }
    run.done_units = run.total_units;
    run.emit("done", None);

    run.timings.denoiser_calls_ms = timed.calls.into_inner().unwrap_or_else(|p| p.into_inner());
    Ok(JobResult {
        output,
        intermediates: job.debug.then_some(Intermediates { x0_hat, x_new, masks }),
        timings: run.timings,
        stage_log: run.log,
    })
}
