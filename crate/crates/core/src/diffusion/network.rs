//! Small convolutional residual denoiser with hand-written reverse mode.
//!
//! ```text
//! x   = [z_t ⊕ c]
//! h   = conv_in(x)
//! per stage:  u = conv1(silu(h)) + W_t·emb(t) + b_t ;  h = h + conv2(silu(u))
//! out = conv_out(silu(h))
//! ```
//!
//! All convolutions are 3×3, stride 1, zero padded. Everything is f64.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConditionEncoding, Latent, CONDITION_CHANNELS, LATENT_CHANNELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_channels: usize,
    pub condition_channels: usize,
    /// Hidden channel width of every stage.
    pub width: usize,
    /// Number of residual stages.
    pub stages: usize,
    /// Sinusoidal timestep embedding size (even).
    pub time_embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_channels: LATENT_CHANNELS,
            condition_channels: CONDITION_CHANNELS,
            width: 16,
            stages: 2,
            time_embed_dim: 32,
        }
    }
}

impl Architecture {
    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            width: 4,
            stages: 1,
            time_embed_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels != LATENT_CHANNELS || self.condition_channels != CONDITION_CHANNELS
        {
            return Err(Error::InvalidModel(format!(
                "expected {LATENT_CHANNELS} latent and {CONDITION_CHANNELS} condition channels"
            )));
        }
        if self.width == 0 || self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidModel(
                "width must be positive and time_embed_dim positive and even".into(),
            ));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.latent_channels + self.condition_channels
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Chebyshev radius (in latent pixels) of the receptive field of one
    /// output pixel: one pixel per 3×3 convolution on the deepest path.
    pub fn receptive_radius(&self) -> usize {
        2 + 2 * self.stages
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (ci, w, e) = (self.input_channels(), self.width, self.time_embed_dim);
        let conv_in = ConvLayout {
            weight: take(w * ci * 9),
            bias: take(w),
        };
        let stages = (0..self.stages)
            .map(|_| StageLayout {
                time_weight: take(w * e),
                time_bias: take(w),
                conv1: ConvLayout {
                    weight: take(w * w * 9),
                    bias: take(w),
                },
                conv2: ConvLayout {
                    weight: take(w * w * 9),
                    bias: take(w),
                },
            })
            .collect();
        let conv_out = ConvLayout {
            weight: take(self.latent_channels * w * 9),
            bias: take(self.latent_channels),
        };
        Layout {
            conv_in,
            stages,
            conv_out,
            total: at,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayout {
    weight: Range<usize>,
    bias: Range<usize>,
}

#[derive(Debug, Clone)]
struct StageLayout {
    time_weight: Range<usize>,
    time_bias: Range<usize>,
    conv1: ConvLayout,
    conv2: ConvLayout,
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: ConvLayout,
    stages: Vec<StageLayout>,
    conv_out: ConvLayout,
    total: usize,
}

/// Noise-prediction network `ε_θ([z_t ⊕ c], t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    architecture: Architecture,
    parameters: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    input: Vec<f64>,
    embedding: Vec<f64>,
    stage_inputs: Vec<Vec<f64>>,
    stage_activations: Vec<Vec<f64>>,
    stage_pre: Vec<Vec<f64>>,
    stage_post: Vec<Vec<f64>>,
    final_hidden: Vec<f64>,
    final_activation: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(architecture: Architecture, parameters: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if parameters.len() != architecture.param_count() {
            return Err(Error::InvalidModel(format!(
                "architecture needs {} parameters, got {}",
                architecture.param_count(),
                parameters.len()
            )));
        }
        if parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self {
            architecture,
            parameters,
        })
    }

    pub fn zeros(architecture: Architecture) -> Result<Self> {
        Self::new(architecture, vec![0.0; architecture.param_count()])
    }

    /// He-style initialization; residual branches and the output layer start small.
    pub fn init<R: Rng + ?Sized>(architecture: Architecture, rng: &mut R) -> Result<Self> {
        architecture.validate()?;
        let layout = architecture.layout();
        let mut p = vec![0.0; layout.total];
        let mut fill = |r: &Range<usize>, std: f64, rng: &mut R| {
            for v in &mut p[r.clone()] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let w = architecture.width as f64;
        fill(
            &layout.conv_in.weight,
            (2.0 / (architecture.input_channels() as f64 * 9.0)).sqrt(),
            rng,
        );
        for s in &layout.stages {
            fill(
                &s.time_weight,
                (1.0 / architecture.time_embed_dim as f64).sqrt(),
                rng,
            );
            fill(&s.conv1.weight, (2.0 / (w * 9.0)).sqrt(), rng);
            fill(&s.conv2.weight, 0.1 * (2.0 / (w * 9.0)).sqrt(), rng);
        }
        fill(&layout.conv_out.weight, 0.1 * (1.0 / (w * 9.0)).sqrt(), rng);
        Self::new(architecture, p)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.parameters
    }

    pub fn param_count(&self) -> usize {
        self.parameters.len()
    }

    fn check_inputs(&self, z_t: &Latent, c: &ConditionEncoding) -> Result<()> {
        let a = &self.architecture;
        if z_t.channels() != a.latent_channels
            || c.tensor.channels() != a.condition_channels
            || z_t.height() != c.tensor.height()
            || z_t.width() != c.tensor.width()
        {
            return Err(Error::ShapeMismatch {
                expected: (z_t.height(), z_t.width()),
                actual: (c.tensor.height(), c.tensor.width()),
            });
        }
        Ok(())
    }

    /// Predicts the noise in `z_t` at timestep `t` given condition `c`.
    pub fn predict(&self, z_t: &Latent, t: usize, c: &ConditionEncoding) -> Result<Latent> {
        Ok(self.forward(z_t, t, c)?.0)
    }

    pub fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        c: &ConditionEncoding,
    ) -> Result<(Latent, ForwardCache)> {
        self.check_inputs(z_t, c)?;
        let arch = &self.architecture;
        let layout = arch.layout();
        let p = &self.parameters;
        let (h, w) = (z_t.height(), z_t.width());
        let hw = h * w;
        let width = arch.width;

        let mut input = Vec::with_capacity(arch.input_channels() * hw);
        input.extend_from_slice(z_t.as_slice());
        input.extend_from_slice(c.tensor.as_slice());
        let embedding = timestep_embedding(t, arch.time_embed_dim);

        let mut hidden = vec![0.0; width * hw];
        conv3x3(
            &input,
            arch.input_channels(),
            h,
            w,
            &p[layout.conv_in.weight.clone()],
            &p[layout.conv_in.bias.clone()],
            width,
            &mut hidden,
        );

        let mut cache = ForwardCache {
            height: h,
            width: w,
            input,
            embedding,
            stage_inputs: Vec::with_capacity(arch.stages),
            stage_activations: Vec::with_capacity(arch.stages),
            stage_pre: Vec::with_capacity(arch.stages),
            stage_post: Vec::with_capacity(arch.stages),
            final_hidden: Vec::new(),
            final_activation: Vec::new(),
        };

        for s in &layout.stages {
            let activated: Vec<f64> = hidden.iter().map(|&v| silu(v)).collect();
            let mut pre = vec![0.0; width * hw];
            conv3x3(
                &activated,
                width,
                h,
                w,
                &p[s.conv1.weight.clone()],
                &p[s.conv1.bias.clone()],
                width,
                &mut pre,
            );
            let tw = &p[s.time_weight.clone()];
            let tb = &p[s.time_bias.clone()];
            for ch in 0..width {
                let row = &tw[ch * arch.time_embed_dim..(ch + 1) * arch.time_embed_dim];
                let shift = tb[ch] + dot(row, &cache.embedding);
                for v in &mut pre[ch * hw..(ch + 1) * hw] {
                    *v += shift;
                }
            }
            let post: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
            let mut residual = vec![0.0; width * hw];
            conv3x3(
                &post,
                width,
                h,
                w,
                &p[s.conv2.weight.clone()],
                &p[s.conv2.bias.clone()],
                width,
                &mut residual,
            );
            let next: Vec<f64> = hidden.iter().zip(&residual).map(|(a, b)| a + b).collect();
            cache
                .stage_inputs
                .push(std::mem::replace(&mut hidden, next));
            cache.stage_activations.push(activated);
            cache.stage_pre.push(pre);
            cache.stage_post.push(post);
        }

        let final_activation: Vec<f64> = hidden.iter().map(|&v| silu(v)).collect();
        let mut out = vec![0.0; arch.latent_channels * hw];
        conv3x3(
            &final_activation,
            width,
            h,
            w,
            &p[layout.conv_out.weight.clone()],
            &p[layout.conv_out.bias.clone()],
            arch.latent_channels,
            &mut out,
        );
        cache.final_hidden = hidden;
        cache.final_activation = final_activation;
        let out = Latent {
            channels: arch.latent_channels,
            height: h,
            width: w,
            data: out,
        };
        Ok((out, cache))
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂out`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let arch = &self.architecture;
        let layout = arch.layout();
        let p = &self.parameters;
        let (h, w) = (cache.height, cache.width);
        let hw = h * w;
        let width = arch.width;
        assert_eq!(grad.len(), p.len());
        assert_eq!(d_out.len(), arch.latent_channels * hw);

        let mut d_act = vec![0.0; width * hw];
        conv3x3_backward(
            &cache.final_activation,
            width,
            h,
            w,
            &p[layout.conv_out.weight.clone()],
            arch.latent_channels,
            d_out,
            grad,
            &layout.conv_out,
            Some(&mut d_act),
        );
        let mut d_hidden: Vec<f64> = d_act
            .iter()
            .zip(&cache.final_hidden)
            .map(|(d, &x)| d * silu_grad(x))
            .collect();

        for (si, s) in layout.stages.iter().enumerate().rev() {
            // The residual add passes d_hidden through unchanged.
            let mut d_post = vec![0.0; width * hw];
            conv3x3_backward(
                &cache.stage_post[si],
                width,
                h,
                w,
                &p[s.conv2.weight.clone()],
                width,
                &d_hidden,
                grad,
                &s.conv2,
                Some(&mut d_post),
            );
            let d_pre: Vec<f64> = d_post
                .iter()
                .zip(&cache.stage_pre[si])
                .map(|(d, &x)| d * silu_grad(x))
                .collect();
            let e = arch.time_embed_dim;
            for ch in 0..width {
                let d_shift: f64 = d_pre[ch * hw..(ch + 1) * hw].iter().sum();
                grad[s.time_bias.start + ch] += d_shift;
                let row =
                    &mut grad[s.time_weight.start + ch * e..s.time_weight.start + (ch + 1) * e];
                for (g, em) in row.iter_mut().zip(&cache.embedding) {
                    *g += d_shift * em;
                }
            }
            let mut d_activated = vec![0.0; width * hw];
            conv3x3_backward(
                &cache.stage_activations[si],
                width,
                h,
                w,
                &p[s.conv1.weight.clone()],
                width,
                &d_pre,
                grad,
                &s.conv1,
                Some(&mut d_activated),
            );
            for ((dh, da), &x) in d_hidden
                .iter_mut()
                .zip(&d_activated)
                .zip(&cache.stage_inputs[si])
            {
                *dh += da * silu_grad(x);
            }
        }

        conv3x3_backward(
            &cache.input,
            arch.input_channels(),
            h,
            w,
            &p[layout.conv_in.weight.clone()],
            width,
            &d_hidden,
            grad,
            &layout.conv_in,
            None,
        );
    }
}

/// Sinusoidal embedding `[sin(t·f_k), cos(t·f_k)]`, `f_k = 10000^(-k/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut emb = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        emb[k] = s;
        emb[half + k] = c;
    }
    emb
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Valid output index range along one axis of length `n` for tap offset `d`.
#[inline]
fn tap_range(n: usize, d: isize) -> Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    let hw = h * w;
    for o in 0..cout {
        let dst_plane = &mut out[o * hw..(o + 1) * hw];
        dst_plane.fill(bias[o]);
        for i in 0..cin {
            let src_plane = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let xr = tap_range(w, dx);
                    let sx = (xr.start as isize + dx) as usize;
                    let n = xr.len();
                    for y in tap_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut dst_plane[y * w + xr.start..y * w + xr.start + n];
                        let src = &src_plane[sy * w + sx..sy * w + sx + n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    d_out: &[f64],
    grad: &mut [f64],
    layout: &ConvLayout,
    mut d_input: Option<&mut [f64]>,
) {
    let hw = h * w;
    for o in 0..cout {
        let g_plane = &d_out[o * hw..(o + 1) * hw];
        grad[layout.bias.start + o] += g_plane.iter().sum::<f64>();
        for i in 0..cin {
            let src_plane = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wi = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = weight[wi];
                    let xr = tap_range(w, dx);
                    let sx = (xr.start as isize + dx) as usize;
                    let n = xr.len();
                    let mut acc = 0.0;
                    for y in tap_range(h, dy) {
                        let sy = (y as isize + dy) as usize;
                        let g = &g_plane[y * w + xr.start..y * w + xr.start + n];
                        let src = &src_plane[sy * w + sx..sy * w + sx + n];
                        acc += dot(g, src);
                        if let Some(di) = d_input.as_deref_mut() {
                            let dst = &mut di[i * hw + sy * w + sx..i * hw + sy * w + sx + n];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    grad[layout.weight.start + wi] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::null_condition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Latent {
        let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
        Latent::from_vec(c, h, w, data).unwrap()
    }

    fn random_condition(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ConditionEncoding {
        ConditionEncoding {
            tensor: random_latent(CONDITION_CHANNELS, h, w, rng),
            is_null: false,
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let model = DenoiserModel::zeros(Architecture::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_latent(3, 6, 5, &mut rng);
        let out = model
            .predict(&z, 17, &random_condition(6, 5, &mut rng))
            .unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_matches_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for arch in [Architecture::tiny(), Architecture::default()] {
            let model = DenoiserModel::init(arch, &mut rng).unwrap();
            let z = random_latent(3, 7, 4, &mut rng);
            let out = model
                .predict(&z, 3, &null_condition((28, 16)).unwrap())
                .unwrap();
            assert_eq!(out.dims(), z.dims());
        }
        let model = DenoiserModel::init(Architecture::tiny(), &mut rng).unwrap();
        let z = random_latent(3, 4, 4, &mut rng);
        assert!(model
            .predict(&z, 3, &random_condition(4, 5, &mut rng))
            .is_err());
    }

    #[test]
    fn receptive_field_bounds_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture {
            width: 6,
            stages: 2,
            time_embed_dim: 8,
            ..Architecture::default()
        };
        let model = DenoiserModel::init(arch, &mut rng).unwrap();
        let (h, w) = (16, 16);
        let z = random_latent(3, h, w, &mut rng);
        let c = random_condition(h, w, &mut rng);
        let base = model.predict(&z, 100, &c).unwrap();
        let r = arch.receptive_radius();
        assert_eq!(r, 6);
        let mut c2 = c.clone();
        *c2.tensor.at_mut(0, 15, 15) += 3.0;
        let moved = model.predict(&z, 100, &c2).unwrap();
        for y in 0..h {
            for x in 0..w {
                let far = 15 - y > r || 15 - x > r;
                for ch in 0..3 {
                    if far {
                        assert_eq!(base.at(ch, y, x), moved.at(ch, y, x), "({y},{x})");
                    }
                }
            }
        }
        // At the radius the change still reaches the output.
        assert_ne!(base.at(0, 15 - r, 15 - r), moved.at(0, 15 - r, 15 - r));
    }

    #[test]
    fn parameter_count_is_checked() {
        let arch = Architecture::tiny();
        assert!(arch.param_count() <= 2000);
        assert!(DenoiserModel::new(arch, vec![0.0; 3]).is_err());
        let mut p = vec![0.0; arch.param_count()];
        p[0] = f64::NAN;
        assert!(DenoiserModel::new(arch, p).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = Architecture {
            width: 3,
            stages: 2,
            time_embed_dim: 4,
            ..Architecture::default()
        };
        let model = DenoiserModel::init(arch, &mut rng).unwrap();
        let z = random_latent(3, 4, 3, &mut rng);
        let c = random_condition(4, 3, &mut rng);
        let r: Vec<f64> = (0..36).map(|_| rng.sample(StandardNormal)).collect();
        let (_, cache) = model.forward(&z, 250, &c).unwrap();
        let mut grad = vec![0.0; model.param_count()];
        model.backward(&cache, &r, &mut grad);
        let objective = |m: &DenoiserModel| dot(m.predict(&z, 250, &c).unwrap().as_slice(), &r);
        let h = 1e-5;
        for (i, &g) in grad.iter().enumerate() {
            let mut plus = model.clone();
            plus.parameters_mut()[i] += h;
            let mut minus = model.clone();
            minus.parameters_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((fd - g).abs() < tol, "param {i}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn embedding_shape() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
