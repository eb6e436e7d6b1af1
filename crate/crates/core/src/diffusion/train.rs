//! Weighted noise-prediction loss, conditional dropout and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{Architecture, DenoiserModel};
use super::{
    add_noise, encode_condition, encode_image, null_condition, Latent, NoiseSchedule,
    LATENT_CHANNELS, LATENT_FACTOR,
};
use crate::artifact::{inject_artifact, MaskLibrary};
use crate::error::{Error, Result};
use crate::gar::ConditionMap;
use crate::raster::RgbImage;

/// Condition map (clean or injected), its supervision image, and a per-sample weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub condition: ConditionMap,
    pub target: RgbImage,
    pub weight: f64,
}

impl TrainingPair {
    pub fn new(condition: ConditionMap, target: RgbImage, weight: f64) -> Result<Self> {
        if condition.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                expected: condition.shape(),
                actual: target.shape(),
            });
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::OutOfRange {
                what: "sample weight",
                value: weight,
            });
        }
        Ok(Self {
            condition,
            target,
            weight,
        })
    }
}

/// Random quantities drawn for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    pub t: usize,
    pub drop_condition: bool,
    pub eps: Latent,
}

/// Draws, in order: timestep uniform in `1..=T_train`, the dropout gate, then
/// standard-normal noise of the latent shape.
pub fn draw_sample_noise<R: Rng + ?Sized>(
    latent_dims: (usize, usize, usize),
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> SampleDraw {
    let t = rng.random_range(1..=schedule.num_train_steps());
    let gate: f64 = rng.random();
    let (c, h, w) = latent_dims;
    let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
    SampleDraw {
        t,
        drop_condition: gate < p_drop,
        eps: Latent {
            channels: c,
            height: h,
            width: w,
            data,
        },
    }
}

/// `w / B · mean((ε − ε̂)²)` and its gradient with respect to `ε̂`.
pub fn weighted_noise_loss(
    eps: &Latent,
    eps_hat: &Latent,
    weight: f64,
    batch_size: usize,
) -> (f64, Vec<f64>) {
    let n = eps.data.len() as f64;
    let scale = weight / batch_size as f64;
    let mut loss = 0.0;
    let grad = eps
        .data
        .iter()
        .zip(&eps_hat.data)
        .map(|(e, p)| {
            let d = p - e;
            loss += d * d;
            2.0 * scale * d / n
        })
        .collect();
    (scale * loss / n, grad)
}

/// Loss and exact gradient for pre-drawn noise, timesteps and dropout gates.
pub fn training_loss_with_draws(
    model: &DenoiserModel,
    batch: &[TrainingPair],
    draws: &[SampleDraw],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if draws.len() != batch.len() {
        return Err(Error::InvalidConfig(format!(
            "{} draws for a batch of {}",
            draws.len(),
            batch.len()
        )));
    }
    let b = batch.len();
    let per_sample: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .zip(draws)
        .map(|(pair, draw)| {
            let z0 = encode_image(&pair.target)?;
            let c = if draw.drop_condition {
                null_condition(pair.condition.shape())?
            } else {
                encode_condition(&pair.condition)?
            };
            let z_t = add_noise(&z0, draw.t, &draw.eps, schedule)?;
            let (eps_hat, cache) = model.forward(&z_t, draw.t, &c)?;
            let (loss, d_out) = weighted_noise_loss(&draw.eps, &eps_hat, pair.weight, b);
            let mut grad = vec![0.0; model.param_count()];
            model.backward(&cache, &d_out, &mut grad);
            Ok((loss, grad))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// `(1/B) Σ w_i · mean‖ε_i − ε_θ([z_t,i ⊕ c_i], t_i)‖²` with conditional
/// dropout to the null token at rate `p_drop`, and its gradient.
pub fn training_loss<R: Rng + ?Sized>(
    model: &DenoiserModel,
    batch: &[TrainingPair],
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::OutOfRange {
            what: "p_drop",
            value: p_drop,
        });
    }
    let draws: Vec<SampleDraw> = batch
        .iter()
        .map(|pair| {
            let (h, w) = pair.target.shape();
            draw_sample_noise(
                (LATENT_CHANNELS, h / LATENT_FACTOR, w / LATENT_FACTOR),
                schedule,
                p_drop,
                rng,
            )
        })
        .collect();
    training_loss_with_draws(model, batch, &draws, schedule)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(param_count: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

fn default_batch_size() -> usize {
    8
}

/// Training configuration (the on-disk training config JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub p_drop: f64,
    pub p_inject: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            p_drop: 0.1,
            p_inject: crate::artifact::DEFAULT_INJECTION_PROBABILITY,
            lr: 2e-3,
            steps: 2000,
            seed: 0,
            batch_size: default_batch_size(),
            weight_decay: 0.0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_train, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("p_drop", self.p_drop), ("p_inject", self.p_inject)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange { what, value: v });
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::OutOfRange {
                what: "lr",
                value: self.lr,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        self.architecture.validate()?;
        self.schedule().map(|_| ())
    }
}

/// Seeds of the independent random streams used by one training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStreams {
    pub init: (u64, u64),
    pub batches: (u64, u64),
    pub noise: (u64, u64),
    pub injection: (u64, u64),
}

impl TrainStreams {
    /// All streams share `seed` and differ by ChaCha stream id.
    pub fn from_seed(seed: u64) -> Self {
        Self {
            init: (seed, 0),
            batches: (seed, 1),
            noise: (seed, 2),
            injection: (seed, 3),
        }
    }

    pub fn rng((seed, stream): (u64, u64)) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }
}

/// FNV-1a over 64-bit words, used to audit which random draws a run consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Digest(u64);

impl Digest {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn push(&mut self, word: u64) {
        for b in word.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub losses: Vec<f64>,
    pub streams: TrainStreams,
    /// Number of batch elements that received an injected mask.
    pub injected: usize,
    /// Digest of batch indices, timesteps, dropout gates and noise.
    pub draw_digest: u64,
    /// Digest of the injection outcomes (mask index or none).
    pub injection_digest: u64,
}

/// Trains a denoiser on `pairs`. When `library` is given, each sample's
/// condition goes through two-stage artifact injection at `p_inject`;
/// otherwise conditions are used as is. The four random streams (init,
/// batch choice, diffusion noise, injection) are independent, so variants
/// that differ only in mask source share every draw outside injection.
pub fn train_denoiser(
    pairs: &[TrainingPair],
    library: Option<&MaskLibrary>,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let schedule = config.schedule()?;
    let streams = TrainStreams::from_seed(config.seed);
    let mut init_rng = TrainStreams::rng(streams.init);
    let mut batch_rng = TrainStreams::rng(streams.batches);
    let mut noise_rng = TrainStreams::rng(streams.noise);
    let mut inject_rng = TrainStreams::rng(streams.injection);

    let mut model = DenoiserModel::init(config.architecture, &mut init_rng)?;
    let mut opt = AdamW::new(model.param_count(), config.lr, config.weight_decay);
    let mut losses = Vec::with_capacity(config.steps);
    let mut injected = 0;
    let mut draw_digest = Digest::new();
    let mut injection_digest = Digest::new();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let index = batch_rng.random_range(0..pairs.len());
            draw_digest.push(index as u64);
            let pair = &pairs[index];
            let condition = match library {
                Some(lib) => {
                    let (c, applied) =
                        inject_artifact(&pair.condition, lib, config.p_inject, &mut inject_rng)?;
                    injection_digest.push(applied.map_or(u64::MAX, |i| i as u64));
                    injected += applied.is_some() as usize;
                    c
                }
                None => pair.condition.clone(),
            };
            batch.push(TrainingPair {
                condition,
                target: pair.target.clone(),
                weight: pair.weight,
            });
        }
        let draws: Vec<SampleDraw> = batch
            .iter()
            .map(|pair| {
                let (h, w) = pair.target.shape();
                draw_sample_noise(
                    (LATENT_CHANNELS, h / LATENT_FACTOR, w / LATENT_FACTOR),
                    &schedule,
                    config.p_drop,
                    &mut noise_rng,
                )
            })
            .collect();
        for d in &draws {
            draw_digest.push(d.t as u64);
            draw_digest.push(d.drop_condition as u64);
            for e in d.eps.as_slice() {
                draw_digest.push(e.to_bits());
            }
        }
        let (loss, grad) = training_loss_with_draws(&model, &batch, &draws, &schedule)?;
        opt.step(model.parameters_mut(), &grad);
        losses.push(loss);
        on_step(step, loss);
    }
    if model.parameters().iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidModel("training diverged".into()));
    }
    Ok(TrainOutcome {
        model,
        losses,
        streams,
        injected,
        draw_digest: draw_digest.0,
        injection_digest: injection_digest.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;
    use approx::assert_abs_diff_eq;

    fn pair(seed: u64, w: usize, h: usize) -> TrainingPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
        let mut condition = ConditionMap::empty(w, h);
        for i in 0..w * h {
            if rng.random_bool(0.6) {
                condition.rgb.as_mut_slice()[i] = target.as_slice()[i];
                condition.validity.as_mut_slice()[i] = true;
                condition.depth.as_mut_slice()[i] = 1.0;
            }
        }
        TrainingPair::new(condition, target, 1.0).unwrap()
    }

    #[test]
    fn zero_model_loss_is_mean_squared_noise() {
        let model = DenoiserModel::zeros(Architecture::tiny()).unwrap();
        let batch = vec![pair(1, 8, 8), pair(2, 8, 8)];
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<_> = (0..2)
            .map(|_| draw_sample_noise((3, 2, 2), &s, 0.1, &mut rng))
            .collect();
        let (loss, _) = training_loss_with_draws(&model, &batch, &draws, &s).unwrap();
        let expected: f64 = draws
            .iter()
            .map(|d| d.eps.as_slice().iter().map(|e| e * e).sum::<f64>() / 12.0)
            .sum::<f64>()
            / 2.0;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn zero_model_loss_expectation_is_one() {
        let model = DenoiserModel::zeros(Architecture::tiny()).unwrap();
        let batch: Vec<_> = (0..64).map(|i| pair(i, 16, 16)).collect();
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (loss, _) = training_loss(&model, &batch, &s, 0.1, &mut rng).unwrap();
        // 64 · 48 standard normals: standard error of the mean ≈ 0.026.
        assert!((loss - 1.0).abs() < 0.1, "{loss}");
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = NoiseSchedule::default();
        let d = draw_sample_noise((3, 2, 2), &s, 0.0, &mut rng);
        let (loss, grad) = weighted_noise_loss(&d.eps, &d.eps, 2.5, 4);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn uniform_weights_reduce_to_plain_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = DenoiserModel::init(Architecture::tiny(), &mut rng).unwrap();
        let s = NoiseSchedule::default();
        let batch = vec![pair(7, 8, 8), pair(8, 8, 8), pair(9, 8, 8)];
        let draws: Vec<_> = (0..3)
            .map(|_| draw_sample_noise((3, 2, 2), &s, 0.0, &mut rng))
            .collect();
        let (loss, _) = training_loss_with_draws(&model, &batch, &draws, &s).unwrap();
        let mut plain = 0.0;
        for (p, d) in batch.iter().zip(&draws) {
            let z0 = encode_image(&p.target).unwrap();
            let zt = add_noise(&z0, d.t, &d.eps, &s).unwrap();
            let pred = model
                .predict(&zt, d.t, &encode_condition(&p.condition).unwrap())
                .unwrap();
            let mse: f64 = pred
                .as_slice()
                .iter()
                .zip(d.eps.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 12.0;
            plain += mse;
        }
        assert_abs_diff_eq!(loss, plain / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn full_dropout_ignores_condition_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = DenoiserModel::init(Architecture::tiny(), &mut rng).unwrap();
        let s = NoiseSchedule::default();
        let a = vec![pair(11, 8, 8), pair(12, 8, 8)];
        let mut b = a.clone();
        for p in &mut b {
            p.condition = ConditionMap::empty(8, 8);
        }
        let (la, ga) =
            training_loss(&model, &a, &s, 1.0, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let (lb, gb) =
            training_loss(&model, &b, &s, 1.0, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        let (lc, _) =
            training_loss(&model, &b, &s, 0.0, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        assert_ne!(la, lc);
    }

    #[test]
    fn rejects_empty_batch_and_bad_weights() {
        let model = DenoiserModel::zeros(Architecture::tiny()).unwrap();
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            training_loss(&model, &[], &s, 0.1, &mut rng),
            Err(Error::EmptyBatch)
        ));
        let p = pair(1, 8, 8);
        assert!(TrainingPair::new(p.condition.clone(), p.target.clone(), 0.0).is_err());
    }

    #[test]
    fn short_training_reduces_loss() {
        let pairs: Vec<_> = (0..6).map(|i| pair(100 + i, 16, 16)).collect();
        let config = TrainConfig {
            steps: 150,
            batch_size: 4,
            architecture: Architecture::tiny(),
            lr: 5e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train_denoiser(&pairs, None, &config, |_, _| {}).unwrap();
        let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = out.losses[130..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(out.injected, 0);
    }
}
