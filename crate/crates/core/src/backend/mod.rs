//! Pluggable diffusion backends.
//!
//! A [`Backend`] bundles a latent codec, an epsilon denoiser, a text encoder
//! and (optionally) cross-attention hook support. Three implementations ship:
//! an analytic Gaussian oracle, a toy cross-attention denoiser and an HTTP
//! adapter for a remote latent-diffusion service.

pub mod analytic;
pub mod attention;
pub mod codec;
pub mod remote;
pub mod text;
pub mod toy;

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use analytic::{analytic_eps, AnalyticGaussianBackend, GaussianPrior};
pub use attention::{CrossAttentionHook, CrossAttentionLayer};
pub use codec::Codec;
pub use remote::{RemoteBackend, RemoteConfig};
pub use text::{parse_weighted_prompt, toy_text_encode};
pub use toy::{ToyAttnBackend, ToyAttnConfig};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::schedule::{Latent, NoiseSchedule};

/// Text conditioning: `N` context vectors of width `d_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub context: Array2<f64>,
    /// Classifier-free guidance scale; 0 disables guidance.
    pub guidance_scale: f64,
    pub raw_prompt: String,
}

impl Conditioning {
    pub fn new(context: Array2<f64>, raw_prompt: &str) -> Result<Self> {
        if context.nrows() == 0 || context.ncols() == 0 {
            return Err(Error::Parameter("conditioning needs at least one token".into()));
        }
        if context.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("conditioning context is not finite".into()));
        }
        Ok(Self {
            context,
            guidance_scale: 0.0,
            raw_prompt: raw_prompt.to_string(),
        })
    }

    /// A single zero token, for backends that ignore text.
    pub fn empty() -> Self {
        Self {
            context: Array2::zeros((1, 1)),
            guidance_scale: 0.0,
            raw_prompt: String::new(),
        }
    }

    pub fn with_guidance_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("guidance scale must be >= 0, got {scale}")));
        }
        self.guidance_scale = scale;
        Ok(self)
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Shape of `encode` output for an `height x width` image.
    fn latent_shape(&self, height: usize, width: usize) -> Vec<usize>;

    fn encode(&self, image: &RasterImage) -> Result<Latent>;

    fn decode(&self, latent: &Latent) -> Result<RasterImage>;

    /// Declared bound on `max |decode(encode(x)) - x|` over bundled fixtures.
    fn codec_tolerance(&self) -> f64;

    /// The codec, when it is one of the bundled ones. Used for pixel-domain
    /// guidance without gamut clamping.
    fn codec(&self) -> Option<Codec> {
        None
    }

    fn encode_text(&self, prompt: &str) -> Result<Conditioning>;

    /// Predicts the noise residual of `z` at timestep `t`. When `hook` is
    /// given it replaces every cross-attention output; backends without
    /// attention layers reject it.
    fn predict_eps(
        &self,
        z: &Latent,
        t: usize,
        cond: &Conditioning,
        hook: Option<&dyn CrossAttentionHook>,
    ) -> Result<Latent>;

    fn supports_attention_hooks(&self) -> bool {
        false
    }

    fn schedule(&self) -> &NoiseSchedule;
}

/// Names of the bundled backends accepted by [`build_backend`].
pub const BACKEND_IDS: &[&str] = &["analytic", "toy", "toy-pool", "remote"];

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct BackendSettings {
    pub schedule: crate::schedule::ScheduleConfig,
    pub remote: Option<RemoteConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    pub supports_attention_hooks: bool,
    pub codec: Option<Codec>,
    pub description: String,
}

pub fn describe_backends(settings: &BackendSettings) -> Vec<BackendInfo> {
    let mut out = vec![
        BackendInfo {
            id: "analytic".into(),
            supports_attention_hooks: false,
            codec: Some(Codec::Identity),
            description: "closed-form denoiser for Gaussian pixel data".into(),
        },
        BackendInfo {
            id: "toy".into(),
            supports_attention_hooks: true,
            codec: Some(Codec::Identity),
            description: "Gaussian prior plus a cross-attention residual".into(),
        },
        BackendInfo {
            id: "toy-pool".into(),
            supports_attention_hooks: true,
            codec: Some(Codec::AvgPool2),
            description: "toy backend with a 2x average-pooling latent codec".into(),
        },
    ];
    if let Some(remote) = &settings.remote {
        out.push(BackendInfo {
            id: "remote".into(),
            supports_attention_hooks: false,
            codec: Some(remote.codec),
            description: format!("remote denoiser at {}", remote.url),
        });
    }
    out
}

pub fn build_backend(id: &str, settings: &BackendSettings) -> Result<Arc<dyn Backend>> {
    let schedule = settings.schedule.build()?;
    match id {
        "analytic" => Ok(Arc::new(AnalyticGaussianBackend::for_images(schedule))),
        "toy" => Ok(Arc::new(ToyAttnBackend::new(schedule, ToyAttnConfig::default())?)),
        "toy-pool" => Ok(Arc::new(ToyAttnBackend::new(
            schedule,
            ToyAttnConfig {
                codec: Codec::AvgPool2,
                ..ToyAttnConfig::default()
            },
        )?)),
        "remote" => {
            let cfg = settings
                .remote
                .clone()
                .ok_or_else(|| Error::Config("remote backend requested but no endpoint is configured".into()))?;
            Ok(Arc::new(RemoteBackend::new(cfg, schedule)?))
        }
        other => Err(Error::Config(format!(
            "unknown backend '{other}', expected one of {}",
            BACKEND_IDS.join(", ")
        ))),
    }
}
