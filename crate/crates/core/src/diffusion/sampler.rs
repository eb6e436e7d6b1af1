//! T-step guided sampler (deterministic DDIM by default, ancestral optional).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::DenoiserModel;
use super::{
    cfg_combine, decode_latent, encode_condition, null_condition, ConditionEncoding, Latent,
    NoiseSchedule, LATENT_CHANNELS, LATENT_FACTOR,
};
use crate::error::{Error, Result};
use crate::gar::ConditionMap;
use crate::raster::RgbImage;

pub const DEFAULT_NUM_STEPS: usize = 30;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Ancestral (η = 1) updates instead of the deterministic default.
    #[serde(default)]
    pub stochastic: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed: 0,
            stochastic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub image: RgbImage,
    pub num_steps: usize,
    pub s_cfg: f64,
    pub seed: u64,
}

/// `T` training timesteps evenly spaced from `T_train` down to 1.
pub fn timestep_sequence(schedule: &NoiseSchedule, num_steps: usize) -> Result<Vec<usize>> {
    let tt = schedule.num_train_steps();
    if num_steps == 0 || num_steps > tt {
        return Err(Error::InvalidSchedule(format!(
            "num_steps must be in 1..={tt}, got {num_steps}"
        )));
    }
    if num_steps == 1 {
        return Ok(vec![tt]);
    }
    Ok((0..num_steps)
        .map(|k| (tt as f64 - k as f64 * (tt - 1) as f64 / (num_steps - 1) as f64).round() as usize)
        .collect())
}

fn initial_latent(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Latent {
    let (lh, lw) = (h / LATENT_FACTOR, w / LATENT_FACTOR);
    let data = (0..LATENT_CHANNELS * lh * lw)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Latent {
        channels: LATENT_CHANNELS,
        height: lh,
        width: lw,
        data,
    }
}

/// One update from `t` to `t_prev` (`t_prev = 0` means the clean latent).
fn step(
    z: &mut Latent,
    eps: &Latent,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    stochastic: bool,
    rng: &mut ChaCha8Rng,
) {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = if stochastic && t_prev > 0 {
        ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
            .max(0.0)
            .sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    for (zi, &ei) in z.data.iter_mut().zip(&eps.data) {
        let x0 = ((*zi - (1.0 - ab).sqrt() * ei) / ab.sqrt()).clamp(-1.0, 1.0);
        // Re-derive the noise consistent with the clamped estimate.
        let e = (*zi - ab.sqrt() * x0) / (1.0 - ab).sqrt();
        *zi = ab_prev.sqrt() * x0 + dir * e;
    }
    if sigma > 0.0 {
        for zi in &mut z.data {
            *zi += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn run(
    schedule: &NoiseSchedule,
    resolution: (usize, usize),
    options: &SamplerOptions,
    mut predict: impl FnMut(&Latent, usize) -> Result<Latent>,
) -> Result<SampleOutput> {
    let ts = timestep_sequence(schedule, options.num_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut z = initial_latent(resolution.0, resolution.1, &mut rng);
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = predict(&z, t)?;
        step(
            &mut z,
            &eps,
            t,
            t_prev,
            schedule,
            options.stochastic,
            &mut rng,
        );
    }
    Ok(SampleOutput {
        image: decode_latent(&z)?,
        num_steps: options.num_steps,
        s_cfg: options.guidance_scale,
        seed: options.seed,
    })
}

fn check_options(options: &SamplerOptions) -> Result<()> {
    if !options.guidance_scale.is_finite() {
        return Err(Error::NonFinite("guidance scale"));
    }
    Ok(())
}

/// Guided sampling from already-encoded conditional and null tokens.
/// Each step evaluates the model on both and combines with [`cfg_combine`].
pub fn sample_with(
    model: &DenoiserModel,
    condition: &ConditionEncoding,
    null: &ConditionEncoding,
    schedule: &NoiseSchedule,
    options: &SamplerOptions,
) -> Result<SampleOutput> {
    check_options(options)?;
    let t = &condition.tensor;
    let resolution = (t.height() * LATENT_FACTOR, t.width() * LATENT_FACTOR);
    run(schedule, resolution, options, |z, step_t| {
        let eps_c = model.predict(z, step_t, condition)?;
        let eps_u = model.predict(z, step_t, null)?;
        cfg_combine(&eps_c, &eps_u, options.guidance_scale)
    })
}

/// Samples an RGB image for the target view described by `condition`.
pub fn sample(
    model: &DenoiserModel,
    condition: &ConditionMap,
    schedule: &NoiseSchedule,
    options: &SamplerOptions,
) -> Result<SampleOutput> {
    let c = encode_condition(condition)?;
    let null = null_condition(condition.shape())?;
    sample_with(model, &c, &null, schedule, options)
}

/// Same update rule with a single model evaluation per step on `condition`
/// (no guidance). The guidance scale in `options` is only recorded.
pub fn sample_single_branch(
    model: &DenoiserModel,
    condition: &ConditionEncoding,
    schedule: &NoiseSchedule,
    options: &SamplerOptions,
) -> Result<SampleOutput> {
    let t = &condition.tensor;
    let resolution = (t.height() * LATENT_FACTOR, t.width() * LATENT_FACTOR);
    run(schedule, resolution, options, |z, step_t| {
        model.predict(z, step_t, condition)
    })
}
