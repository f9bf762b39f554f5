//! A small deterministic denoiser with real cross-attention layers.
//!
//! The noise prediction is the exact Gaussian-prior residual plus a
//! prompt-dependent cross-attention term:
//!
//! `eps(z, t, c) = eps_prior(z, t) + gain * sqrt(1 - abar_t) * sum_l attn_l(z W_Q,l; c) W_O,l`
//!
//! Every spatial latent cell is one query token. Layers expose their key and
//! value projections to [`CrossAttentionHook`]s.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::analytic::{GaussianPrior, IMAGE_PRIOR_MEAN, IMAGE_PRIOR_STD};
use super::attention::{CrossAttentionHook, CrossAttentionLayer};
use super::{text, Backend, Codec, Conditioning};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::schedule::{Latent, NoiseSchedule};

const CHANNELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyAttnConfig {
    pub codec: Codec,
    pub n_tokens: usize,
    pub context_dim: usize,
    pub attn_dim: usize,
    pub layers: usize,
    pub gain: f64,
    pub seed: u64,
    pub prior_mean: f64,
    pub prior_std: f64,
}

impl Default for ToyAttnConfig {
    fn default() -> Self {
        Self {
            codec: Codec::Identity,
            n_tokens: 8,
            context_dim: 16,
            attn_dim: 8,
            layers: 2,
            gain: 0.02,
            seed: 7,
            prior_mean: IMAGE_PRIOR_MEAN,
            prior_std: IMAGE_PRIOR_STD,
        }
    }
}

#[derive(Debug, Clone)]
struct AttnLayer {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyAttnBackend {
    id: String,
    config: ToyAttnConfig,
    prior: GaussianPrior,
    layers: Vec<AttnLayer>,
    null_context: Array2<f64>,
    schedule: NoiseSchedule,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

impl ToyAttnBackend {
    pub fn new(schedule: NoiseSchedule, config: ToyAttnConfig) -> Result<Self> {
        if config.layers == 0 || config.attn_dim == 0 || config.context_dim == 0 || config.n_tokens == 0 {
            return Err(Error::Parameter("toy backend dimensions must be positive".into()));
        }
        if !(config.prior_std >= 0.0) || !config.gain.is_finite() {
            return Err(Error::Parameter("toy backend prior/gain must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = (0..config.layers)
            .map(|_| AttnLayer {
                w_q: gaussian_matrix(&mut rng, CHANNELS, config.attn_dim),
                w_k: gaussian_matrix(&mut rng, config.context_dim, config.attn_dim),
                w_v: gaussian_matrix(&mut rng, config.context_dim, config.attn_dim),
                w_o: gaussian_matrix(&mut rng, config.attn_dim, CHANNELS),
            })
            .collect();
        let id = match config.codec {
            Codec::Identity => "toy",
            Codec::AvgPool2 => "toy-pool",
        };
        Ok(Self {
            id: id.into(),
            prior: GaussianPrior::Constant {
                mean: config.prior_mean,
                std: config.prior_std,
            },
            null_context: text::toy_null_context(config.n_tokens, config.context_dim),
            layers,
            config,
            schedule,
        })
    }

    pub fn config(&self) -> &ToyAttnConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer projections as seen by hooks.
    pub fn layer(&self, index: usize) -> CrossAttentionLayer<'_> {
        let l = &self.layers[index];
        CrossAttentionLayer {
            index,
            w_k: &l.w_k,
            w_v: &l.w_v,
            scale_dim: self.config.attn_dim as f64,
        }
    }

    /// Spatial query of layer `index` for latent `z`.
    pub fn query(&self, index: usize, z: &Latent) -> Result<Array2<f64>> {
        Ok(self.tokens(z)?.dot(&self.layers[index].w_q))
    }

    fn tokens(&self, z: &Latent) -> Result<Array2<f64>> {
        let shape = z.shape();
        if shape.len() != 3 || shape[2] != CHANNELS {
            return Err(Error::shape(&[0, 0, CHANNELS], shape));
        }
        let p = shape[0] * shape[1];
        z.to_owned()
            .into_shape_with_order((p, CHANNELS))
            .map_err(|e| Error::Numeric(e.to_string()))
    }

    /// Summed cross-attention residual `sum_l attn_l W_O,l`, in latent layout.
    pub fn attention_residual(
        &self,
        z: &Latent,
        context: &Array2<f64>,
        hook: Option<&dyn CrossAttentionHook>,
    ) -> Result<Latent> {
        if context.ncols() != self.config.context_dim {
            return Err(Error::shape(&[context.nrows(), self.config.context_dim], context.shape()));
        }
        let tokens = self.tokens(z)?;
        let mut acc = Array2::<f64>::zeros(tokens.raw_dim());
        for (i, l) in self.layers.iter().enumerate() {
            let q = tokens.dot(&l.w_q);
            let layer = self.layer(i);
            let out = match hook {
                Some(h) => h.cross_attention(&layer, &q, context)?,
                None => layer.attend(&q, context)?,
            };
            if out.dim() != q.dim() {
                return Err(Error::shape(q.shape(), out.shape()));
            }
            acc = acc + out.dot(&l.w_o);
        }
        Ok(ArrayD::from_shape_vec(IxDyn(z.shape()), acc.into_raw_vec_and_offset().0)
            .expect("token count matches latent size"))
    }
}

impl Backend for ToyAttnBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_shape(&self, height: usize, width: usize) -> Vec<usize> {
        self.config.codec.latent_shape(height, width)
    }

    fn encode(&self, image: &RasterImage) -> Result<Latent> {
        self.config.codec.encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<RasterImage> {
        self.config.codec.decode(latent)
    }

    fn codec_tolerance(&self) -> f64 {
        self.config.codec.tolerance()
    }

    fn codec(&self) -> Option<Codec> {
        Some(self.config.codec)
    }

    fn encode_text(&self, prompt: &str) -> Result<Conditioning> {
        text::toy_text_encode(prompt, self.config.n_tokens, self.config.context_dim)
    }

    fn predict_eps(
        &self,
        z: &Latent,
        t: usize,
        cond: &Conditioning,
        hook: Option<&dyn CrossAttentionHook>,
    ) -> Result<Latent> {
        let prior = self.prior.eps(&self.schedule, z, t)?;
        let scale = self.config.gain * (1.0 - self.schedule.alpha_bar(t)).sqrt();
        let cond_res = self.attention_residual(z, &cond.context, hook)?;
        let residual = if cond.guidance_scale > 0.0 {
            let uncond = self.attention_residual(z, &self.null_context, None)?;
            let s = cond.guidance_scale;
            &uncond + &((&cond_res - &uncond) * s)
        } else {
            cond_res
        };
        Ok(prior + residual * scale)
    }

    fn supports_attention_hooks(&self) -> bool {
        true
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::attention::attention_weights;
    use ndarray::Axis;

    fn backend() -> ToyAttnBackend {
        ToyAttnBackend::new(NoiseSchedule::default(), ToyAttnConfig::default()).unwrap()
    }

    fn latent(h: usize, w: usize) -> Latent {
        ArrayD::from_shape_fn(IxDyn(&[h, w, 3]), |i| ((i[0] * 7 + i[1] * 3 + i[2]) % 11) as f64 / 10.0)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let b = backend();
        let cond = b.encode_text("a photo of a woman").unwrap();
        let z = latent(4, 5);
        for i in 0..b.num_layers() {
            let layer = b.layer(i);
            let w = attention_weights(&b.query(i, &z).unwrap(), &layer.keys(&cond.context).unwrap(), layer.scale_dim)
                .unwrap();
            for row in w.axis_iter(Axis(0)) {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_and_prompt_sensitive() {
        let b1 = backend();
        let b2 = backend();
        let z = latent(3, 3);
        let c1 = b1.encode_text("natural lips").unwrap();
        let c2 = b1.encode_text("glossy lips").unwrap();
        let e1 = b1.predict_eps(&z, 200, &c1, None).unwrap();
        let e2 = b2.predict_eps(&z, 200, &c1, None).unwrap();
        assert_eq!(e1, e2);
        let e3 = b1.predict_eps(&z, 200, &c2, None).unwrap();
        assert_ne!(e1, e3);
    }

    #[test]
    fn wrong_context_width_is_a_shape_error() {
        let b = backend();
        let cond = Conditioning::new(Array2::zeros((8, 3)), "x").unwrap();
        assert!(matches!(
            b.predict_eps(&latent(2, 2), 10, &cond, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn guidance_scale_one_equals_conditional() {
        let b = backend();
        let z = latent(2, 3);
        let cond = b.encode_text("fair skin").unwrap();
        let plain = b.predict_eps(&z, 300, &cond, None).unwrap();
        let guided = b
            .predict_eps(&z, 300, &cond.clone().with_guidance_scale(1.0).unwrap(), None)
            .unwrap();
        for (a, g) in plain.iter().zip(guided.iter()) {
            assert!((a - g).abs() < 1e-12);
        }
    }
}
