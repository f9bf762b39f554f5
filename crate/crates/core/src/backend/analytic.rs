use ndarray::Zip;

use super::{text, Backend, Codec, Conditioning, CrossAttentionHook};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::schedule::{Latent, NoiseSchedule};

/// Data prior `N(mu0, sigma0^2 I)` with a constant or per-element mean.
#[derive(Debug, Clone, PartialEq)]
pub enum GaussianPrior {
    Constant { mean: f64, std: f64 },
    Field { mean: Latent, std: f64 },
}

impl GaussianPrior {
    pub fn std(&self) -> f64 {
        match self {
            GaussianPrior::Constant { std, .. } | GaussianPrior::Field { std, .. } => *std,
        }
    }

    /// Exact noise residual of the Gaussian marginal at `t`.
    pub fn eps(&self, schedule: &NoiseSchedule, z_t: &Latent, t: usize) -> Result<Latent> {
        schedule.check_timestep(t)?;
        match self {
            GaussianPrior::Constant { mean, std } => {
                let (sa, s1, den) = coefficients(schedule, t, *std);
                Ok(z_t.mapv(|z| s1 * (z - sa * mean) / den))
            }
            GaussianPrior::Field { mean, std } => analytic_eps(mean, *std, schedule, z_t, t),
        }
    }

    /// Closed-form posterior mean `E[z0 | z_t]`.
    pub fn posterior_mean(&self, schedule: &NoiseSchedule, z_t: &Latent, t: usize) -> Result<Latent> {
        let ab = schedule.alpha_bar(t);
        let var = self.std() * self.std();
        let gain = ab.sqrt() * var / (ab * var + 1.0 - ab);
        match self {
            GaussianPrior::Constant { mean, .. } => Ok(z_t.mapv(|z| mean + gain * (z - ab.sqrt() * mean))),
            GaussianPrior::Field { mean, .. } => {
                check(mean, z_t)?;
                Ok(Zip::from(mean)
                    .and(z_t)
                    .map_collect(|&m, &z| m + gain * (z - ab.sqrt() * m)))
            }
        }
    }
}

fn coefficients(schedule: &NoiseSchedule, t: usize, std: f64) -> (f64, f64, f64) {
    let ab = schedule.alpha_bar(t);
    (ab.sqrt(), (1.0 - ab).sqrt(), ab * std * std + (1.0 - ab))
}

fn check(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// `sqrt(1 - abar_t) (z_t - sqrt(abar_t) mu0) / (abar_t sigma0^2 + 1 - abar_t)`,
/// the minimum-MSE noise prediction for data `N(mu0, sigma0^2 I)`.
pub fn analytic_eps(mu0: &Latent, sigma0: f64, schedule: &NoiseSchedule, z_t: &Latent, t: usize) -> Result<Latent> {
    if !(sigma0 >= 0.0) {
        return Err(Error::Parameter(format!("sigma0 must be >= 0, got {sigma0}")));
    }
    schedule.check_timestep(t)?;
    check(mu0, z_t)?;
    let (sa, s1, den) = coefficients(schedule, t, sigma0);
    Ok(Zip::from(z_t)
        .and(mu0)
        .map_collect(|&z, &m| s1 * (z - sa * m) / den))
}

/// Test oracle whose denoiser is exact for Gaussian data. Identity codec.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianBackend {
    prior: GaussianPrior,
    schedule: NoiseSchedule,
    id: String,
}

/// Pixel prior used by the bundled image backends: centered in the gamut and
/// broad enough that edits survive the reverse trajectory.
pub const IMAGE_PRIOR_MEAN: f64 = 0.5;
pub const IMAGE_PRIOR_STD: f64 = 4.0;

impl AnalyticGaussianBackend {
    pub fn new(prior: GaussianPrior, schedule: NoiseSchedule) -> Result<Self> {
        if !(prior.std() >= 0.0) {
            return Err(Error::Parameter(format!("sigma0 must be >= 0, got {}", prior.std())));
        }
        Ok(Self {
            prior,
            schedule,
            id: "analytic".into(),
        })
    }

    pub fn for_images(schedule: NoiseSchedule) -> Self {
        Self::new(
            GaussianPrior::Constant {
                mean: IMAGE_PRIOR_MEAN,
                std: IMAGE_PRIOR_STD,
            },
            schedule,
        )
        .expect("image prior is valid")
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }
}

impl Backend for AnalyticGaussianBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_shape(&self, height: usize, width: usize) -> Vec<usize> {
        Codec::Identity.latent_shape(height, width)
    }

    fn encode(&self, image: &RasterImage) -> Result<Latent> {
        Codec::Identity.encode(image)
    }

    fn decode(&self, latent: &Latent) -> Result<RasterImage> {
        Codec::Identity.decode(latent)
    }

    fn codec_tolerance(&self) -> f64 {
        0.0
    }

    fn codec(&self) -> Option<Codec> {
        Some(Codec::Identity)
    }

    fn encode_text(&self, prompt: &str) -> Result<Conditioning> {
        text::toy_text_encode(prompt, 8, 16)
    }

    fn predict_eps(
        &self,
        z: &Latent,
        t: usize,
        _cond: &Conditioning,
        hook: Option<&dyn CrossAttentionHook>,
    ) -> Result<Latent> {
        if hook.is_some() {
            return Err(Error::Unsupported(self.id.clone()));
        }
        self.prior.eps(&self.schedule, z, t)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}
