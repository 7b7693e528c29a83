//! FiLM-conditioned 1D U-Net over action sequences.
//!
//! The encoder half ([`ActionEncoder`]) maps a noisy action sequence to the
//! [`Intersection`]: its deepest feature map plus the skip tensors. The
//! decoder half ([`ActionDecoder`]) turns an intersection back into a noise
//! prediction. Splitting the network at the intersection lets the state
//! decoder read the same representation.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::layers::upsample1d_nearest;
use crate::nn::{mish, Conv1d, GroupNorm, Init, Linear, Params};
use crate::schedule::{reverse_process, ReverseOptions, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub action_dim: usize,
    pub horizon: usize,
    pub cond_dim: usize,
    /// Channel width per downsampling stage; the last one is the intersection width C.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|w| *w == 0) {
            return invalid("U-Net needs at least one non-zero stage width");
        }
        let factor = 1usize << self.widths.len();
        if self.horizon == 0 || self.horizon % factor != 0 {
            return invalid(format!(
                "action horizon {} is not divisible by the U-Net downsample factor {factor}",
                self.horizon
            ));
        }
        if self.action_dim == 0 || self.kernel % 2 == 0 {
            return invalid("action dim must be positive and the kernel size odd");
        }
        if self.step_dim() < 2 || self.step_dim() % 2 != 0 {
            return invalid("intersection width must be a multiple of 4 (step embedding is C/2)");
        }
        Ok(())
    }

    pub fn deep_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn deep_len(&self) -> usize {
        self.horizon >> self.widths.len()
    }

    pub fn step_dim(&self) -> usize {
        self.deep_channels() / 2
    }
}

/// Sinusoidal embedding of a diffusion step: `[sin(k f_i)..., cos(k f_i)...]`
/// with geometric frequencies `f_i = 10000^(-i / (E/2 - 1))`.
pub fn embed_step(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |i: usize| {
        if half <= 1 {
            1.0
        } else {
            (-(10000f64).ln() * i as f64 / (half - 1) as f64).exp()
        }
    };
    let mut out: Vec<f64> = (0..half).map(|i| (k as f64 * freq(i)).sin()).collect();
    out.extend((0..half).map(|i| (k as f64 * freq(i)).cos()));
    out
}

fn embed_steps(ks: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = ks.iter().flat_map(|k| embed_step(*k, dim)).collect();
    Ok(Tensor::from_vec(data, (ks.len(), dim), device)?.to_dtype(dtype)?)
}

/// Per-channel affine modulation `gamma_c * x[:, c, :] + delta_c`.
pub fn film(features: &Tensor, gamma: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let c = features.dims()[1];
    if gamma.dims() != [features.dims()[0], c] || gamma.dims() != delta.dims() {
        return invalid(format!(
            "FiLM: features {:?} but gamma {:?} / delta {:?}",
            features.dims(),
            gamma.dims(),
            delta.dims()
        ));
    }
    Ok(features.broadcast_mul(&gamma.unsqueeze(2)?)?.broadcast_add(&delta.unsqueeze(2)?)?)
}

/// Maps the condition vector to per-channel (gamma, delta). The bias starts
/// at gamma = 1, delta = 0 so a zero weight matrix is the identity modulation.
#[derive(Debug, Clone)]
pub struct FilmHead {
    proj: Linear,
    channels: usize,
}

impl FilmHead {
    pub fn new(p: &Params, cond_dim: usize, channels: usize) -> Result<Self> {
        let bias = Init::Split { first: channels, head: 1.0, tail: 0.0 };
        Ok(Self { proj: Linear::with_bias_init(p, cond_dim, 2 * channels, bias)?, channels })
    }

    pub fn forward(&self, features: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let gd = self.proj.forward(&mish(cond)?)?;
        let gamma = gd.narrow(1, 0, self.channels)?;
        let delta = gd.narrow(1, self.channels, self.channels)?;
        film(features, &gamma, &delta)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    norm1: GroupNorm,
    film: FilmHead,
    step_proj: Linear,
    conv2: Conv1d,
    norm2: GroupNorm,
    residual: Option<Conv1d>,
}

impl ResBlock {
    fn new(p: &Params, c_in: usize, c_out: usize, cfg: &UnetConfig) -> Result<Self> {
        let pad = cfg.kernel / 2;
        Ok(Self {
            conv1: Conv1d::new(&p.pp("conv1"), c_in, c_out, cfg.kernel, 1, pad)?,
            norm1: GroupNorm::new(&p.pp("norm1"), c_out)?,
            film: FilmHead::new(&p.pp("film"), cfg.cond_dim, c_out)?,
            step_proj: Linear::new(&p.pp("step_proj"), cfg.step_dim(), c_out)?,
            conv2: Conv1d::new(&p.pp("conv2"), c_out, c_out, cfg.kernel, 1, pad)?,
            norm2: GroupNorm::new(&p.pp("norm2"), c_out)?,
            residual: if c_in == c_out { None } else { Some(Conv1d::new(&p.pp("residual"), c_in, c_out, 1, 1, 0)?) },
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor, step: &Tensor) -> Result<Tensor> {
        let h = mish(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let h = self.film.forward(&h, cond)?;
        let h = h.broadcast_add(&self.step_proj.forward(&mish(step)?)?.unsqueeze(2)?)?;
        let h = mish(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        let res = match &self.residual {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + res)?)
    }
}

/// The deepest denoiser representation and the encoder skips.
#[derive(Debug, Clone)]
pub struct Intersection {
    /// (B, C, T)
    pub deep: Tensor,
    /// One (B, C_i, T_i) tensor per encoder stage, shallowest first.
    pub skips: Vec<Tensor>,
    /// Step embedding after the MLP, (B, C/2). The decoder blocks need it too.
    pub step: Tensor,
}

impl Intersection {
    /// `deep[:, :, i]` as (B, C).
    pub fn vector(&self, i: usize) -> Result<Tensor> {
        Ok(self.deep.narrow(2, i, 1)?.squeeze(2)?)
    }
}

#[derive(Debug, Clone)]
struct StepMlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone)]
pub struct ActionEncoder {
    cfg: UnetConfig,
    step_mlp: StepMlp,
    stages: Vec<(ResBlock, ResBlock, Conv1d)>,
    mid: Vec<ResBlock>,
}

impl ActionEncoder {
    pub fn new(p: &Params, cfg: &UnetConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.step_dim();
        let step_mlp = StepMlp {
            l1: Linear::new(&p.pp("step_mlp.l1"), e, 4 * e)?,
            l2: Linear::new(&p.pp("step_mlp.l2"), 4 * e, e)?,
        };
        let mut stages = Vec::new();
        let mut c = cfg.action_dim;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let sp = p.pp(format!("down{i}"));
            stages.push((
                ResBlock::new(&sp.pp("res0"), c, w, cfg)?,
                ResBlock::new(&sp.pp("res1"), w, w, cfg)?,
                Conv1d::new(&sp.pp("downsample"), w, w, 3, 2, 1)?,
            ));
            c = w;
        }
        let mid = (0..2).map(|i| ResBlock::new(&p.pp(format!("mid{i}")), c, c, cfg)).collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), step_mlp, stages, mid })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    /// `actions`: (B, T_a, A) noisy actions, `cond`: (B, D_h), one step per batch row.
    pub fn forward(&self, actions: &Tensor, cond: &Tensor, ks: &[usize]) -> Result<Intersection> {
        let (b, t, a) = actions.dims3()?;
        if t != self.cfg.horizon || a != self.cfg.action_dim {
            return invalid(format!("actions {:?}, model expects (B, {}, {})", actions.dims(), self.cfg.horizon, a));
        }
        if cond.dims() != [b, self.cfg.cond_dim] {
            return invalid(format!("condition {:?}, model expects ({b}, {})", cond.dims(), self.cfg.cond_dim));
        }
        if ks.len() != b {
            return invalid(format!("{} diffusion steps for a batch of {b}", ks.len()));
        }
        let emb = embed_steps(ks, self.cfg.step_dim(), actions.dtype(), actions.device())?;
        let step = self.step_mlp.l2.forward(&mish(&self.step_mlp.l1.forward(&emb)?)?)?;
        let mut x = actions.transpose(1, 2)?.contiguous()?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for (r0, r1, down) in &self.stages {
            x = r0.forward(&x, cond, &step)?;
            x = r1.forward(&x, cond, &step)?;
            skips.push(x.clone());
            x = down.forward(&x)?;
        }
        for r in &self.mid {
            x = r.forward(&x, cond, &step)?;
        }
        Ok(Intersection { deep: x, skips, step })
    }
}

#[derive(Debug, Clone)]
pub struct ActionDecoder {
    cfg: UnetConfig,
    stages: Vec<(Conv1d, ResBlock, ResBlock)>,
    final_conv: Conv1d,
    final_norm: GroupNorm,
    out: Conv1d,
}

impl ActionDecoder {
    pub fn new(p: &Params, cfg: &UnetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut c = cfg.deep_channels();
        for (i, &w) in cfg.widths.iter().enumerate().rev() {
            let sp = p.pp(format!("up{i}"));
            stages.push((
                Conv1d::new(&sp.pp("upsample"), c, c, 3, 1, 1)?,
                ResBlock::new(&sp.pp("res0"), c + w, w, cfg)?,
                ResBlock::new(&sp.pp("res1"), w, w, cfg)?,
            ));
            c = w;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            final_conv: Conv1d::new(&p.pp("final_conv"), c, c, cfg.kernel, 1, cfg.kernel / 2)?,
            final_norm: GroupNorm::new(&p.pp("final_norm"), c)?,
            out: Conv1d::new(&p.pp("out"), c, cfg.action_dim, 1, 1, 0)?,
        })
    }

    /// Noise prediction (B, T_a, A).
    pub fn forward(&self, x: &Intersection, cond: &Tensor) -> Result<Tensor> {
        if x.skips.len() != self.stages.len() {
            return invalid(format!("{} skip tensors for a {}-stage decoder", x.skips.len(), self.stages.len()));
        }
        let mut h = x.deep.clone();
        for ((up, r0, r1), skip) in self.stages.iter().zip(x.skips.iter().rev()) {
            h = up.forward(&upsample1d_nearest(&h)?)?;
            h = Tensor::cat(&[&h, skip], 1)?;
            h = r0.forward(&h, cond, &x.step)?;
            h = r1.forward(&h, cond, &x.step)?;
        }
        let h = mish(&self.final_norm.forward(&self.final_conv.forward(&h)?)?)?;
        let out = self.out.forward(&h)?;
        debug_assert_eq!(out.dims()[1], self.cfg.action_dim);
        Ok(out.transpose(1, 2)?.contiguous()?)
    }
}

/// Encoder and decoder halves used together.
#[derive(Debug, Clone)]
pub struct ConditionalUnet {
    pub encoder: ActionEncoder,
    pub decoder: ActionDecoder,
}

impl ConditionalUnet {
    pub fn new(enc: &Params, dec: &Params, cfg: &UnetConfig) -> Result<Self> {
        Ok(Self { encoder: ActionEncoder::new(enc, cfg)?, decoder: ActionDecoder::new(dec, cfg)? })
    }

    pub fn config(&self) -> &UnetConfig {
        self.encoder.config()
    }

    pub fn predict_noise(&self, actions: &Tensor, cond: &Tensor, ks: &[usize]) -> Result<Tensor> {
        let x = self.encoder.forward(actions, cond, ks)?;
        self.decoder.forward(&x, cond)
    }
}

/// Draws a clean action sequence for every row of `cond` by running the
/// reverse chain over `steps`. The result is (B, T_a, A), clipped to [-1, 1].
pub fn denoise_sequence<R: Rng>(
    net: &ConditionalUnet,
    cond: &Tensor,
    sched: &Schedule,
    steps: &[usize],
    opts: ReverseOptions,
    rng: &mut R,
) -> Result<Tensor> {
    let n = cond.dims()[0] * net.config().horizon * net.config().action_dim;
    denoise_with(net, cond, sched, steps, opts, |_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Like [`denoise_sequence`], but row `i` draws all of its noise from
/// `rngs[i]`, so each row's result does not depend on what else is batched
/// with it.
pub fn denoise_rows<R: Rng>(
    net: &ConditionalUnet,
    cond: &Tensor,
    sched: &Schedule,
    steps: &[usize],
    opts: ReverseOptions,
    rngs: &mut [R],
) -> Result<Tensor> {
    if rngs.len() != cond.dims()[0] {
        return invalid(format!("{} generators for {} rows", rngs.len(), cond.dims()[0]));
    }
    let per_row = net.config().horizon * net.config().action_dim;
    denoise_with(net, cond, sched, steps, opts, |_| {
        rngs.iter_mut().flat_map(|r| (0..per_row).map(|_| r.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()).collect()
    })
}

/// `draw(k)` supplies the initial sample (k = None) and the DDPM noise.
fn denoise_with(
    net: &ConditionalUnet,
    cond: &Tensor,
    sched: &Schedule,
    steps: &[usize],
    opts: ReverseOptions,
    mut draw: impl FnMut(Option<usize>) -> Vec<f64>,
) -> Result<Tensor> {
    if steps.is_empty() {
        return invalid("empty step list");
    }
    let cfg = net.config();
    let b = cond.dims()[0];
    let shape = (b, cfg.horizon, cfg.action_dim);
    let x = draw(None);
    let (dtype, device) = (cond.dtype(), cond.device().clone());
    let out = reverse_process(
        sched,
        steps,
        opts,
        x,
        |x, k| {
            let xt = Tensor::from_slice(x, shape, &device)?.to_dtype(dtype)?;
            let eps = net.predict_noise(&xt, cond, &vec![k; b])?;
            Ok(eps.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        },
        |k| draw(Some(k)),
        None,
    )?;
    let clipped: Vec<f64> = out.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(Tensor::from_vec(clipped, shape, &device)?.to_dtype(dtype)?)
}
