//! Toy-scale conditional latent diffusion.
//!
//! The latent space is a fixed 4× average pool ("latent-lite") instead of a
//! learned autoencoder. Conditioning is early concatenation of the encoded
//! condition map with the noisy latent, with a dedicated indicator channel
//! for the null token used by conditional dropout and classifier-free
//! guidance.

mod network;
mod sampler;
mod train;

pub use network::{Architecture, DenoiserModel, ForwardCache};
pub use sampler::{
    sample, sample_single_branch, sample_with, timestep_sequence, SampleOutput, SamplerOptions,
};
pub use train::{
    draw_sample_noise, train_denoiser, training_loss, training_loss_with_draws,
    weighted_noise_loss, AdamW, SampleDraw, TrainConfig, TrainOutcome, TrainStreams, TrainingPair,
};

use crate::error::{Error, Result};
use crate::gar::ConditionMap;
use crate::raster::{Grid, RgbImage};

/// Spatial down-sampling factor between images and latents.
pub const LATENT_FACTOR: usize = 4;
/// Channels of an image latent.
pub const LATENT_CHANNELS: usize = 3;
/// Channels of a condition encoding: pooled RGB, coverage, null indicator.
pub const CONDITION_CHANNELS: usize = 5;
const COVERAGE_CHANNEL: usize = 3;
const NULL_CHANNEL: usize = 4;

/// Channel-major `C × H × W` real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Latent image (`z_0`, `z_t`, noise and noise predictions).
pub type LatentImage = Latent;

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: (channels * height, width),
                actual: (data.len() / width.max(1), width),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    fn check_same_dims(&self, other: &Latent) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: (self.channels * self.height, self.width),
                actual: (other.channels * other.height, other.width),
            });
        }
        Ok(())
    }
}

/// Encoded condition `c`, or the null token when `is_null`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoding {
    pub tensor: Latent,
    pub is_null: bool,
}

/// Linear-β diffusion schedule with cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced from `beta_start` to `beta_end` over `num_train_steps`.
    pub fn linear(num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_train_steps < 2 {
            return Err(Error::InvalidSchedule(
                "need at least two training steps".into(),
            ));
        }
        let n = num_train_steps;
        let betas = (0..n)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidSchedule(
                "need at least two training steps".into(),
            ));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidSchedule("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule(
                "betas must be strictly increasing".into(),
            ));
        }
        let mut alphas_cumprod = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        if *alphas_cumprod.last().unwrap() >= 0.05 {
            return Err(Error::InvalidSchedule(format!(
                "final cumulative alpha {} is not below 0.05",
                alphas_cumprod.last().unwrap()
            )));
        }
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn num_train_steps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `t` in `1..=T_train`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for `t` in `1..=T_train`; ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_train_steps() {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as f64,
            });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

fn check_latent_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(LATENT_FACTOR) || !w.is_multiple_of(LATENT_FACTOR) {
        return Err(Error::ShapeMismatch {
            expected: (
                h.div_ceil(LATENT_FACTOR).max(1) * LATENT_FACTOR,
                w.div_ceil(LATENT_FACTOR).max(1) * LATENT_FACTOR,
            ),
            actual: (h, w),
        });
    }
    Ok(())
}

/// Mean over a `4×4` block, summed pairwise so equal inputs pool exactly.
#[inline]
fn block_mean(get: impl Fn(usize, usize) -> f64) -> f64 {
    let row = |dy| (get(0, dy) + get(1, dy)) + (get(2, dy) + get(3, dy));
    ((row(0) + row(1)) + (row(2) + row(3))) / 16.0
}

/// 4× average pool per channel, then `[0, 1] → [-1, 1]`.
pub fn encode_image(image: &RgbImage) -> Result<LatentImage> {
    let (h, w) = image.shape();
    check_latent_resolution(h, w)?;
    let (lh, lw) = (h / LATENT_FACTOR, w / LATENT_FACTOR);
    let mut z = Latent::zeros(LATENT_CHANNELS, lh, lw);
    for c in 0..LATENT_CHANNELS {
        for ly in 0..lh {
            for lx in 0..lw {
                let m = block_mean(|dx, dy| {
                    image.get(lx * LATENT_FACTOR + dx, ly * LATENT_FACTOR + dy)[c]
                });
                *z.at_mut(c, ly, lx) = 2.0 * m - 1.0;
            }
        }
    }
    Ok(z)
}

/// Nearest 4× upsample, `[-1, 1] → [0, 1]`, clamped.
pub fn decode_latent(z: &LatentImage) -> Result<RgbImage> {
    if z.channels != LATENT_CHANNELS {
        return Err(Error::ShapeMismatch {
            expected: (LATENT_CHANNELS, 0),
            actual: (z.channels, 0),
        });
    }
    if z.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent"));
    }
    let (w, h) = (z.width * LATENT_FACTOR, z.height * LATENT_FACTOR);
    Ok(Grid::from_fn(w, h, |x, y| {
        let (lx, ly) = (x / LATENT_FACTOR, y / LATENT_FACTOR);
        std::array::from_fn(|c| ((z.at(c, ly, lx) + 1.0) / 2.0).clamp(0.0, 1.0))
    }))
}

/// Pooled RGB (as in [`encode_image`]), pooled validity coverage, and a zero
/// null-indicator channel.
pub fn encode_condition(x: &ConditionMap) -> Result<ConditionEncoding> {
    let rgb = encode_image(&x.rgb)?;
    let (lh, lw) = (rgb.height, rgb.width);
    let mut t = Latent::zeros(CONDITION_CHANNELS, lh, lw);
    t.data[..rgb.data.len()].copy_from_slice(&rgb.data);
    for ly in 0..lh {
        for lx in 0..lw {
            *t.at_mut(COVERAGE_CHANNEL, ly, lx) = block_mean(|dx, dy| {
                if *x
                    .validity
                    .get(lx * LATENT_FACTOR + dx, ly * LATENT_FACTOR + dy)
                {
                    1.0
                } else {
                    0.0
                }
            });
        }
    }
    Ok(ConditionEncoding {
        tensor: t,
        is_null: false,
    })
}

/// The null token: zero content and coverage, indicator channel all one.
/// `resolution` is the image `(height, width)`.
pub fn null_condition(resolution: (usize, usize)) -> Result<ConditionEncoding> {
    let (h, w) = resolution;
    check_latent_resolution(h, w)?;
    let (lh, lw) = (h / LATENT_FACTOR, w / LATENT_FACTOR);
    let mut t = Latent::zeros(CONDITION_CHANNELS, lh, lw);
    let plane = lh * lw;
    t.data[NULL_CHANNEL * plane..].fill(1.0);
    Ok(ConditionEncoding {
        tensor: t,
        is_null: true,
    })
}

/// `z_t = sqrt(ᾱ_t)·z_0 + sqrt(1 − ᾱ_t)·ε`.
pub fn add_noise(
    z0: &LatentImage,
    t: usize,
    eps: &LatentImage,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    schedule.check_timestep(t)?;
    z0.check_same_dims(eps)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z0.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// Classifier-free guidance: `ε_u + s·(ε_c − ε_u)`. At `s = 1` this returns
/// `eps_cond` exactly and at `s = 0` `eps_uncond` exactly.
pub fn cfg_combine(
    eps_cond: &LatentImage,
    eps_uncond: &LatentImage,
    s_cfg: f64,
) -> Result<LatentImage> {
    eps_cond.check_same_dims(eps_uncond)?;
    if s_cfg == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s_cfg == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let mut out = eps_uncond.clone();
    for (o, c) in out.data.iter_mut().zip(&eps_cond.data) {
        *o += s_cfg * (c - *o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn random_latent(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Latent {
        let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
        Latent::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.num_train_steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_abs_diff_eq!(s.beta(1000), 0.02, epsilon = 1e-15);
        assert!(s.alpha_bar(1000) < 0.05);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        assert!(NoiseSchedule::linear(1000, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 0.02).is_err());
    }

    #[test]
    fn constant_half_image_encodes_to_zero() {
        let z = encode_image(&Grid::filled(16, 8, [0.5; 3])).unwrap();
        assert_eq!(z.dims(), (3, 2, 4));
        assert!(z.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_constant_images_round_trip_exactly() {
        // Dyadic values keep the affine map exact.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blocks: Vec<[f64; 3]> = (0..16)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..=256) as f64 / 256.0))
            .collect();
        let img = Grid::from_fn(16, 16, |x, y| blocks[(y / 4) * 4 + x / 4]);
        let back = decode_latent(&encode_image(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn decode_of_encode_is_block_average() {
        let img = random_image(16, 12, 9);
        let back = decode_latent(&encode_image(&img).unwrap()).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                for c in 0..3 {
                    let (bx, by) = (x / 4 * 4, y / 4 * 4);
                    let mut s = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            s += img.get(bx + dx, by + dy)[c];
                        }
                    }
                    assert_abs_diff_eq!(back.get(x, y)[c], s / 16.0, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn decode_edge_values_and_fixed_point() {
        let zero = decode_latent(&Latent::zeros(3, 2, 2)).unwrap();
        assert!(zero.iter().all(|c| *c == [0.5; 3]));
        let one = decode_latent(&Latent::filled(3, 2, 2, 1.0)).unwrap();
        assert!(one.iter().all(|c| *c == [1.0; 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_latent(3, 4, 4, &mut rng);
        let once = decode_latent(&z).unwrap();
        let twice = decode_latent(&encode_image(&once).unwrap()).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            for c in 0..3 {
                assert_abs_diff_eq!(a[c], b[c], epsilon = 1e-15);
            }
        }
        assert!(encode_image(&Grid::filled(6, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn condition_encoding_channels() {
        let mut full = ConditionMap::empty(8, 8);
        full.validity = Grid::filled(8, 8, true);
        full.depth = Grid::filled(8, 8, 1.0);
        let enc = encode_condition(&full).unwrap();
        assert_eq!(enc.tensor.dims(), (5, 2, 2));
        assert!(!enc.is_null);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(enc.tensor.at(3, y, x), 1.0);
                assert_eq!(enc.tensor.at(4, y, x), 0.0);
            }
        }

        let empty = encode_condition(&ConditionMap::empty(8, 8)).unwrap();
        assert!(!empty.is_null);
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    assert_eq!(empty.tensor.at(c, y, x), -1.0);
                }
                assert_eq!(empty.tensor.at(3, y, x), 0.0);
            }
        }

        // Vertical stripes of width 2: each 4×4 block is half valid.
        let mut stripe = ConditionMap::empty(8, 8);
        stripe.validity = Grid::from_fn(8, 8, |x, _| (x / 2) % 2 == 0);
        stripe.depth = stripe.validity.map(|v| if *v { 2.0 } else { 0.0 });
        stripe.rgb = stripe
            .validity
            .map(|v| if *v { [1.0; 3] } else { [0.0; 3] });
        let enc = encode_condition(&stripe).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(enc.tensor.at(3, y, x), 0.5);
                assert_eq!(enc.tensor.at(0, y, x), 0.0);
            }
        }
    }

    #[test]
    fn null_token_differs_from_empty_condition() {
        let null = null_condition((8, 8)).unwrap();
        assert!(null.is_null);
        assert_eq!(null, null_condition((8, 8)).unwrap());
        let empty = encode_condition(&ConditionMap::empty(8, 8)).unwrap();
        assert_ne!(null.tensor, empty.tensor);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(null.tensor.at(4, y, x), 1.0);
                for c in 0..4 {
                    assert_eq!(null.tensor.at(c, y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn add_noise_limits() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = random_latent(3, 4, 4, &mut rng);
        let zero = Latent::zeros(3, 4, 4);
        let zt = add_noise(&z0, 500, &zero, &s).unwrap();
        let a = s.alpha_bar(500).sqrt();
        for (o, z) in zt.as_slice().iter().zip(z0.as_slice()) {
            assert_eq!(*o, a * z);
        }
        let eps = random_latent(3, 4, 4, &mut rng);
        let z1 = add_noise(&z0, 1, &eps, &s).unwrap();
        let norm: f64 = eps.as_slice().iter().map(|e| e * e).sum::<f64>().sqrt();
        let z0_norm: f64 = z0.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = (1.0 - s.alpha_bar(1)).sqrt() * norm + (1.0 - s.alpha_bar(1).sqrt()) * z0_norm;
        let dist: f64 = z1
            .as_slice()
            .iter()
            .zip(z0.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= bound);
        assert!(add_noise(&z0, 0, &eps, &s).is_err());
        assert!(add_noise(&z0, 1001, &eps, &s).is_err());
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = NoiseSchedule::default();
        let t = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = random_latent(3, 2, 2, &mut rng);
        let mean = s.alpha_bar(t).sqrt();
        let n = 10_000;
        let mut sq = vec![0.0; 12];
        for _ in 0..n {
            let eps = random_latent(3, 2, 2, &mut rng);
            let zt = add_noise(&z0, t, &eps, &s).unwrap();
            for ((acc, a), b) in sq.iter_mut().zip(zt.as_slice()).zip(z0.as_slice()) {
                let d = a - mean * b;
                *acc += d * d;
            }
        }
        let expected = 1.0 - s.alpha_bar(t);
        for v in sq {
            let var = v / n as f64;
            assert!(
                (var - expected).abs() / expected < 0.05,
                "{var} vs {expected}"
            );
        }
    }

    #[test]
    fn cfg_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_latent(3, 2, 2, &mut rng);
        let u = random_latent(3, 2, 2, &mut rng);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 1.7).unwrap(), c);
        let two = cfg_combine(&Latent::filled(3, 1, 1, 1.0), &Latent::zeros(3, 1, 1), 2.0).unwrap();
        assert!(two.as_slice().iter().all(|v| *v == 2.0));
        assert!(cfg_combine(&c, &Latent::zeros(3, 1, 2), 1.5).is_err());
    }
}
