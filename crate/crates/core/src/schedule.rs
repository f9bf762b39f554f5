//! Diffusion-time arithmetic: noise schedules, deterministic DDIM stepping,
//! DDIM inversion, Tweedie denoised estimates and re-noising.
//!
//! Timesteps are integers in `0..=T`. Timestep 0 is the clean latent
//! (`alpha_bar(0) == 1`), and timestep `t >= 1` uses the cumulative product
//! of the first `t` alphas, so the stored `alphas_cumprod[i]` table is
//! `alpha_bar(i + 1)`.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Conditioning};
use crate::error::{Error, Result};

/// Latent arrays are real-valued and of arbitrary shape.
pub type Latent = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// Betas evenly spaced between `beta_start` and `beta_end`.
    Linear,
    /// Square roots of the betas are evenly spaced (Stable Diffusion).
    ScaledLinear,
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            kind: BetaSchedule::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.train_timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

/// The beta / alpha / alpha-bar tables governing all diffusion arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    config: ScheduleConfig,
}

pub fn build_schedule(
    train_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: BetaSchedule,
) -> Result<NoiseSchedule> {
    if train_timesteps < 2 {
        return Err(Error::Parameter(format!(
            "schedule needs at least 2 timesteps, got {train_timesteps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let n = train_timesteps;
    let lerp = |a: f64, b: f64, i: usize| a + (b - a) * (i as f64) / ((n - 1) as f64);
    let betas: Vec<f64> = match kind {
        BetaSchedule::Linear => (0..n).map(|i| lerp(beta_start, beta_end, i)).collect(),
        BetaSchedule::ScaledLinear => (0..n)
            .map(|i| lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2))
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alphas_cumprod = Vec::with_capacity(n);
    let mut acc = 1.0;
    for &a in &alphas {
        acc *= a;
        alphas_cumprod.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alphas_cumprod,
        config: ScheduleConfig {
            train_timesteps,
            beta_start,
            beta_end,
            kind,
        },
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleConfig::default()
            .build()
            .expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    /// Total number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alphas_cumprod[i]` is the product of `alphas[0..=i]`.
    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// Cumulative signal rate at timestep `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    /// Variance increment of the forward step into timestep `t >= 1`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.len() {
            Err(Error::Parameter(format!(
                "timestep {t} outside schedule range 0..={}",
                self.len()
            )))
        } else {
            Ok(())
        }
    }

    /// Posterior variance coefficient for a jump from `t` down to `t_prev`.
    /// For adjacent steps this is `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn beta_tilde(&self, t: usize, t_prev: usize) -> f64 {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    }
}

/// Uniform integer grid `0 = g_0 < g_1 < ... < g_n = t_end`.
pub fn uniform_grid(t_end: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 {
        return Err(Error::Parameter("number of steps must be at least 1".into()));
    }
    if num_steps > t_end {
        return Err(Error::Parameter(format!(
            "{num_steps} steps do not fit in the timestep range 0..={t_end}"
        )));
    }
    Ok((0..=num_steps)
        .map(|i| (i * t_end + num_steps / 2) / num_steps)
        .collect())
}

fn check_same_shape(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn check_finite(z: &Latent, what: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Tweedie denoised estimate `(z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn tweedie_denoise(schedule: &NoiseSchedule, z_t: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
    schedule.check_timestep(t)?;
    check_same_shape(z_t, eps)?;
    let ab = schedule.alpha_bar(t);
    let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(z_t)
        .and(eps)
        .map_collect(|&z, &e| (z - s1 * e) / sa))
}

/// One DDIM update from timestep `t` to `t_prev < t`:
///
/// `z_prev = sqrt(abar_prev) z0_hat + sqrt(1 - abar_prev - eta^2 bt^2) eps + eta bt noise`
///
/// with `bt = beta_tilde(t, t_prev)`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Latent,
    t: usize,
    t_prev: usize,
    eps: &Latent,
    eta: f64,
    noise: Option<&Latent>,
) -> Result<Latent> {
    if t == 0 || t_prev >= t {
        return Err(Error::Parameter(format!(
            "ddim step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Parameter(format!("eta must be in [0, 1], got {eta}")));
    }
    let z0_hat = tweedie_denoise(schedule, z_t, t, eps)?;
    let ab_prev = schedule.alpha_bar(t_prev);
    if eta == 0.0 {
        return Ok(predict_previous(&z0_hat, eps, ab_prev));
    }
    let noise = noise.ok_or_else(|| Error::Parameter("eta > 0 requires a noise sample".into()))?;
    check_same_shape(z_t, noise)?;
    let bt = schedule.beta_tilde(t, t_prev);
    let radicand = 1.0 - ab_prev - eta * eta * bt * bt;
    if radicand < 0.0 {
        return Err(Error::Numeric(format!(
            "negative direction variance {radicand} for eta={eta} at t={t}"
        )));
    }
    let (c0, ce, cn) = (ab_prev.sqrt(), radicand.sqrt(), eta * bt);
    Ok(Zip::from(&z0_hat)
        .and(eps)
        .and(noise)
        .map_collect(|&x, &e, &n| c0 * x + ce * e + cn * n))
}

/// Deterministic DDIM update given a (possibly modified) denoised estimate:
/// `sqrt(abar_prev) z0 + sqrt(1 - abar_prev) eps`.
pub(crate) fn predict_previous(z0: &Latent, eps: &Latent, ab_prev: f64) -> Latent {
    let (c0, ce) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Zip::from(z0).and(eps).map_collect(|&x, &e| c0 * x + ce * e)
}

/// Inversion coefficients `(a, b)` for the jump `t_prev -> t`.
pub fn inversion_coefficients(schedule: &NoiseSchedule, t_prev: usize, t: usize) -> (f64, f64) {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let a = ab_t.sqrt() / ab_prev.sqrt();
    let b = ab_t.sqrt() * ((1.0 / ab_prev - 1.0).sqrt() - (1.0 / ab_t - 1.0).sqrt());
    (a, b)
}

/// One DDIM inversion update `z_t = a z_prev - b eps`, the exact algebraic
/// inverse of [`ddim_step`] with `eta = 0` for the same `eps`.
pub fn ddim_invert_step(
    schedule: &NoiseSchedule,
    z_prev: &Latent,
    t_prev: usize,
    t: usize,
    eps: &Latent,
) -> Result<Latent> {
    if t == 0 {
        return Err(Error::Parameter("timestep 0 has no predecessor".into()));
    }
    if t_prev >= t {
        return Err(Error::Parameter(format!(
            "inversion needs t_prev < t, got t_prev={t_prev}, t={t}"
        )));
    }
    schedule.check_timestep(t)?;
    check_same_shape(z_prev, eps)?;
    let (a, b) = inversion_coefficients(schedule, t_prev, t);
    Ok(Zip::from(z_prev).and(eps).map_collect(|&z, &e| a * z - b * e))
}

/// Output of an early-stopped inversion.
#[derive(Debug, Clone)]
pub struct InversionTrace {
    pub z_tstar: Latent,
    pub t_star: usize,
    /// Denoiser output at `(z_tstar, t_star, conditioning)`, reused when re-noising.
    pub eps_at_tstar: Latent,
    pub conditioning: Conditioning,
    pub grid: Vec<usize>,
    pub per_step_latents: Vec<Latent>,
}

#[derive(Debug, Clone, Copy)]
pub struct InversionPlan {
    pub t_star: usize,
    pub num_steps: usize,
    pub keep_latents: bool,
}

impl InversionPlan {
    pub fn new(t_star: usize, num_steps: usize) -> Self {
        Self {
            t_star,
            num_steps,
            keep_latents: false,
        }
    }
}

/// Inverts `z0` up to `t_star` with `num_steps` uniform steps, re-evaluating
/// the denoiser at every step, and caches the endpoint noise prediction.
pub fn invert_to(
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    z0: &Latent,
    t_star: usize,
    num_steps: usize,
    conditioning: &Conditioning,
) -> Result<InversionTrace> {
    invert_with(
        backend,
        schedule,
        z0,
        InversionPlan::new(t_star, num_steps),
        conditioning,
        &mut |_, _| Ok(()),
    )
}

/// [`invert_to`] with a per-step observer. `on_step(done, total)` may abort
/// the inversion by returning an error.
pub fn invert_with(
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    z0: &Latent,
    plan: InversionPlan,
    conditioning: &Conditioning,
    on_step: &mut dyn FnMut(usize, usize) -> Result<()>,
) -> Result<InversionTrace> {
    if plan.t_star == 0 {
        return Err(Error::Parameter("t_star must be at least 1".into()));
    }
    schedule.check_timestep(plan.t_star)?;
    check_finite(z0, "initial latent")?;
    let grid = uniform_grid(plan.t_star, plan.num_steps)?;
    let mut z = z0.clone();
    let mut kept = Vec::new();
    for (i, pair) in grid.windows(2).enumerate() {
        let (t_prev, t) = (pair[0], pair[1]);
        // Linearization: the noise at the upper timestep is predicted from z_{t_prev}.
        let eps = backend
            .predict_eps(&z, t, conditioning, None)
            .map_err(|e| Error::BackendStep {
                step: i,
                source: Box::new(e),
            })?;
        z = ddim_invert_step(schedule, &z, t_prev, t, &eps)?;
        if plan.keep_latents {
            kept.push(z.clone());
        }
        on_step(i + 1, plan.num_steps)?;
    }
    let eps_at_tstar = backend
        .predict_eps(&z, plan.t_star, conditioning, None)
        .map_err(|e| Error::BackendStep {
            step: plan.num_steps,
            source: Box::new(e),
        })?;
    check_same_shape(&z, &eps_at_tstar)?;
    check_finite(&z, "inverted latent")?;
    Ok(InversionTrace {
        z_tstar: z,
        t_star: plan.t_star,
        eps_at_tstar,
        conditioning: conditioning.clone(),
        grid,
        per_step_latents: kept,
    })
}

/// Re-noises an edited clean latent back to the trace's early-stop time:
/// `sqrt(abar_t*) z0_new + sqrt(1 - abar_t*) eps(z_t*, t*, c)`.
pub fn renoise(schedule: &NoiseSchedule, z0_new: &Latent, trace: &InversionTrace) -> Result<Latent> {
    check_same_shape(&trace.z_tstar, z0_new)?;
    Ok(predict_previous(
        z0_new,
        &trace.eps_at_tstar,
        schedule.alpha_bar(trace.t_star),
    ))
}

/// Plain deterministic DDIM sampling from `z_start` at `t_start` down to 0.
pub fn sample_deterministic(
    backend: &dyn Backend,
    schedule: &NoiseSchedule,
    z_start: &Latent,
    t_start: usize,
    num_steps: usize,
    conditioning: &Conditioning,
) -> Result<Latent> {
    let grid = uniform_grid(t_start, num_steps)?;
    let mut z = z_start.clone();
    for (i, pair) in grid.windows(2).rev().enumerate() {
        let (t_prev, t) = (pair[0], pair[1]);
        let eps = backend
            .predict_eps(&z, t, conditioning, None)
            .map_err(|e| Error::BackendStep {
                step: i,
                source: Box::new(e),
            })?;
        z = ddim_step(schedule, &z, t, t_prev, &eps, 0.0, None)?;
    }
    Ok(z)
}

/// Relative L2 distance `||a - b|| / ||b||`.
pub fn relative_l2(a: &Latent, b: &Latent) -> f64 {
    let num: f64 = Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
