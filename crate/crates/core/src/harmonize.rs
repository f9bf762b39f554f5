//! Reverse-sampling refinements: weighted prompt composition inside every
//! cross-attention layer, and interpolation guidance of the denoised estimate
//! during the earliest reverse steps.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::backend::attention::attention;
use crate::backend::text::split_explicit_weight;
use crate::backend::{Backend, Conditioning, CrossAttentionHook, CrossAttentionLayer};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::schedule::{predict_previous, tweedie_denoise, Latent, NoiseSchedule};

/// A weighted concept prompt; negative weights steer away from the concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPrompt {
    pub text: String,
    pub alpha_s: f64,
}

impl ConceptPrompt {
    pub fn new(text: impl Into<String>, alpha_s: f64) -> Result<Self> {
        let text = text.into();
        if !alpha_s.is_finite() {
            return Err(Error::Parameter(format!("concept weight for '{text}' is not finite")));
        }
        if text.trim().is_empty() {
            return Err(Error::Parameter("concept text is empty".into()));
        }
        Ok(Self { text, alpha_s })
    }

    /// Parses `"text:weight"`.
    pub fn parse(entry: &str) -> Result<Self> {
        let (text, w) = split_explicit_weight(entry)
            .ok_or_else(|| Error::Config(format!("concept '{entry}' is not of the form 'text:weight'")))?;
        Self::new(text.trim(), w)
    }

    pub fn to_entry(&self) -> String {
        format!("{}:{}", self.text, self.alpha_s)
    }
}

pub const DEFAULT_MAIN_PROMPT: &str = "a photo of a woman";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionConfig {
    /// Also the inversion prompt.
    pub main_prompt: String,
    pub concepts: Vec<ConceptPrompt>,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            main_prompt: DEFAULT_MAIN_PROMPT.into(),
            concepts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceDomain {
    #[default]
    Latent,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda: f64,
    /// Number of earliest reverse steps that are regularized.
    pub apply_steps: usize,
    pub domain: GuidanceDomain,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            apply_steps: 2,
            domain: GuidanceDomain::Latent,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn active_at(&self, step_index: usize) -> bool {
        self.lambda > 0.0 && step_index < self.apply_steps
    }
}

/// Attention output with the spatial query updated by weighted concepts:
///
/// `softmax(Q K_main^T / sqrt d) V_main + (1/M) sum_s alpha_s softmax(Q K_s^T / sqrt d) V_s`
///
/// `M` counts every concept, including those with zero weight.
pub fn compose_cross_attention(
    query: &Array2<f64>,
    main_kv: (&Array2<f64>, &Array2<f64>),
    concept_kvs: &[(Array2<f64>, Array2<f64>, f64)],
    scale_dim: f64,
) -> Result<Array2<f64>> {
    let mut out = attention(query, main_kv.0, main_kv.1, scale_dim)?;
    if concept_kvs.is_empty() {
        return Ok(out);
    }
    let m = concept_kvs.len() as f64;
    for (k, v, alpha) in concept_kvs {
        if v.ncols() != main_kv.1.ncols() {
            return Err(Error::shape(&[v.nrows(), main_kv.1.ncols()], v.shape()));
        }
        if *alpha == 0.0 {
            continue;
        }
        let term = attention(query, k, v, scale_dim)?;
        out.scaled_add(alpha / m, &term);
    }
    Ok(out)
}

/// Installs [`compose_cross_attention`] at every cross-attention layer.
/// Built per job; holds only immutable encoded contexts.
#[derive(Debug, Clone)]
pub struct CompositionHook {
    concepts: Vec<(Array2<f64>, f64)>,
}

impl CompositionHook {
    pub fn new(backend: &dyn Backend, config: &CompositionConfig) -> Result<Self> {
        if !backend.supports_attention_hooks() && !config.concepts.is_empty() {
            return Err(Error::Unsupported(backend.id().to_string()));
        }
        let concepts = config
            .concepts
            .iter()
            .map(|c| Ok((backend.encode_text(&c.text)?.context, c.alpha_s)))
            .collect::<Result<_>>()?;
        Ok(Self { concepts })
    }

    pub fn from_contexts(concepts: Vec<(Array2<f64>, f64)>) -> Self {
        Self { concepts }
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

impl CrossAttentionHook for CompositionHook {
    fn cross_attention(
        &self,
        layer: &CrossAttentionLayer<'_>,
        query: &Array2<f64>,
        main_context: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let (k_main, v_main) = (layer.keys(main_context)?, layer.values(main_context)?);
        let kvs = self
            .concepts
            .iter()
            .map(|(ctx, a)| Ok((layer.keys(ctx)?, layer.values(ctx)?, *a)))
            .collect::<Result<Vec<_>>>()?;
        compose_cross_attention(query, (&k_main, &v_main), &kvs, layer.scale_dim)
    }
}

/// `(1 - lambda) z0_hat + lambda z0_prime`, the minimizer of
/// `|z - z0_hat|^2 + lambda / (1 - lambda) |z - z0_prime|^2`.
pub fn interp_guided_estimate(z0_hat: &Latent, z0_prime: &Latent, lambda: f64) -> Result<Latent> {
    if z0_hat.shape() != z0_prime.shape() {
        return Err(Error::shape(z0_hat.shape(), z0_prime.shape()));
    }
    Ok(Zip::from(z0_hat)
        .and(z0_prime)
        .map_collect(|&a, &b| (1.0 - lambda) * a + lambda * b))
}

/// The makeup-transformed input, in latent form and optionally in pixels.
#[derive(Debug, Clone)]
pub struct GuidanceTarget {
    pub z0_prime: Latent,
    /// Pixel target for [`GuidanceDomain::Pixel`]; decoded from `z0_prime`
    /// when absent.
    pub x0_prime: Option<RasterImage>,
}

impl GuidanceTarget {
    pub fn latent(z0_prime: Latent) -> Self {
        Self {
            z0_prime,
            x0_prime: None,
        }
    }
}

/// Everything a guided reverse step needs besides the current state.
pub struct GuidedSampler<'a> {
    pub backend: &'a dyn Backend,
    pub schedule: &'a NoiseSchedule,
    pub conditioning: &'a Conditioning,
    pub hook: Option<&'a dyn CrossAttentionHook>,
    pub target: Option<&'a GuidanceTarget>,
    pub guidance: GuidanceConfig,
}

impl GuidedSampler<'_> {
    fn guided_estimate(&self, z0_hat: Latent, target: &GuidanceTarget) -> Result<Latent> {
        let lambda = self.guidance.lambda;
        match self.guidance.domain {
            GuidanceDomain::Latent => interp_guided_estimate(&z0_hat, &target.z0_prime, lambda),
            GuidanceDomain::Pixel => {
                let x_hat = self.backend.decode(&z0_hat)?;
                let x_prime = match &target.x0_prime {
                    Some(x) => x.clone(),
                    None => self.backend.decode(&target.z0_prime)?,
                };
                let mixed = interp_guided_estimate(
                    &x_hat.into_data().into_dyn(),
                    &x_prime.into_data().into_dyn(),
                    lambda,
                )?;
                let mixed = mixed
                    .into_dimensionality::<ndarray::Ix3>()
                    .map_err(|e| Error::Numeric(e.to_string()))?;
                self.backend.encode(&RasterImage::new(mixed)?)
            }
        }
    }

    /// One deterministic reverse update `t -> t_prev`. During the first
    /// `apply_steps` steps the denoised estimate is pulled toward the target
    /// before the update; the noise prediction itself is never altered.
    pub fn step(&self, z_t: &Latent, t: usize, t_prev: usize, step_index: usize) -> Result<Latent> {
        if t == 0 || t_prev >= t {
            return Err(Error::Parameter(format!(
                "reverse step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}"
            )));
        }
        let eps = self
            .backend
            .predict_eps(z_t, t, self.conditioning, self.hook)
            .map_err(|e| Error::BackendStep {
                step: step_index,
                source: Box::new(e),
            })?;
        let mut z0_hat = tweedie_denoise(self.schedule, z_t, t, &eps)?;
        if self.guidance.active_at(step_index) {
            let target = self
                .target
                .ok_or_else(|| Error::Parameter("guidance is active but no target latent was given".into()))?;
            z0_hat = self.guided_estimate(z0_hat, target)?;
        }
        Ok(predict_previous(&z0_hat, &eps, self.schedule.alpha_bar(t_prev)))
    }
}

/// Free-function form of [`GuidedSampler::step`].
pub fn guided_reverse_step(
    sampler: &GuidedSampler<'_>,
    z_t: &Latent,
    t: usize,
    t_prev: usize,
    step_index: usize,
) -> Result<Latent> {
    sampler.step(z_t, t, t_prev, step_index)
}
