//! State decoder: intersection transforms and per-source reconstruction heads.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::augment::resize_bilinear;
use crate::data::window::future_state_indices;
use crate::data::Episode;
use crate::denoiser::Intersection;
use crate::error::{invalid, Result};
use crate::nn::{mish, sigmoid, Conv2d, ConvTranspose2x, Linear, Params};
use crate::perception::ResBlock2d;

/// Which representation feeds the state decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Design {
    /// First intersection vector, split into four folds forming a 2x2 block.
    #[default]
    A,
    /// First C/2 channels of every intersection vector, projected.
    B,
    /// Every intersection vector, projected.
    C,
    /// The observation condition h, projected; bypasses the action encoder.
    D,
}

/// Sinusoidal pixel-coordinate embedding, laid out (P, H, W): the first P/2
/// channels encode the row, the rest the column. Within each half, channel
/// `j` is `sin` (even `j`) or `cos` (odd `j`) of `pos / 10000^(2 floor(j/2) / (P/2))`.
pub fn pixel_pos_embedding(h: usize, w: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || p % 2 != 0 {
        return invalid(format!("positional embedding width {p} must be even and positive"));
    }
    let half = p / 2;
    let enc = |pos: usize, j: usize| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / half as f64);
        let a = pos as f64 * freq;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut out = Vec::with_capacity(p * h * w);
    for ch in 0..p {
        for y in 0..h {
            for x in 0..w {
                out.push(if ch < half { enc(y, ch) } else { enc(x, ch - half) });
            }
        }
    }
    Ok(out)
}

fn pos_embedding_tensor(hw: (usize, usize), p: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v = pixel_pos_embedding(hw.0, hw.1, p)?;
    Ok(Tensor::from_vec(v, (1, p, hw.0, hw.1), device)?.to_dtype(dtype)?)
}

fn concat_pe(x: &Tensor, pe: &Tensor) -> Result<Tensor> {
    let b = x.dims()[0];
    let (_, p, h, w) = pe.dims4()?;
    Ok(Tensor::cat(&[x, &pe.broadcast_as((b, p, h, w))?], 1)?)
}

/// The (B, C/4, 2, 2) block each design tiles over the decoder's input grid.
pub fn block_source(x: &Intersection, h: &Tensor, design: Design, proj: Option<&Linear>) -> Result<Tensor> {
    let (b, c, _) = x.deep.dims3()?;
    if c % 4 != 0 {
        return invalid(format!("intersection width {c} is not divisible by 4"));
    }
    let q = c / 4;
    let need_proj = || proj.ok_or_else(|| crate::Error::InvalidArgument(format!("design {design:?} needs a projection layer")));
    let per_cell = |v: Tensor| -> Result<Tensor> { Ok(v.reshape((b, q, 1, 1))?.broadcast_as((b, q, 2, 2))?) };
    match design {
        Design::A => {
            // Fold j holds channels j*C/4 .. (j+1)*C/4 and fills cell (j / 2, j % 2).
            let v = x.vector(0)?;
            Ok(v.reshape((b, 4, q))?.transpose(1, 2)?.reshape((b, q, 2, 2))?)
        }
        Design::B | Design::C => {
            let proj = need_proj()?;
            let take = if design == Design::B { c / 2 } else { c };
            let vecs = x.deep.narrow(1, 0, take)?.transpose(1, 2)?.contiguous()?;
            let t = vecs.dims()[1];
            let projected = proj.forward(&vecs.reshape((b * t, take))?)?.reshape((b, t, q))?;
            per_cell(projected.mean(1)?)
        }
        Design::D => per_cell(need_proj()?.forward(h)?),
    }
}

/// Tiles the design's 2x2 block over `block_hw` so that
/// `out[c, y, x] = block[c, y mod 2, x mod 2]`, before positional embedding.
pub fn tile_block(block: &Tensor, block_hw: (usize, usize)) -> Result<Tensor> {
    let (b, q, _, _) = block.dims4()?;
    let (h, w) = block_hw;
    let (ny, nx) = (h.div_ceil(2), w.div_ceil(2));
    let tiled = block
        .reshape(vec![b, q, 1, 2, 1, 2])?
        .broadcast_as(vec![b, q, ny, 2, nx, 2])?
        .reshape((b, q, 2 * ny, 2 * nx))?;
    Ok(tiled.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?)
}

/// Decoder input: tiled block plus pixel positional embedding,
/// (B, C/4 + P, H, W).
pub fn transform_intersection(
    x: &Intersection,
    h: &Tensor,
    design: Design,
    block_hw: (usize, usize),
    pe_dim: usize,
    proj: Option<&Linear>,
) -> Result<Tensor> {
    let tiled = tile_block(&block_source(x, h, design, proj)?, block_hw)?;
    let pe = pos_embedding_tensor(block_hw, pe_dim, tiled.dtype(), tiled.device())?;
    concat_pe(&tiled, &pe)
}

/// Input of the low-dim decoder: the first intersection vector (A), the
/// time-average of the selected channels (B, C), or h (D).
pub fn lowdim_source(x: &Intersection, h: &Tensor, design: Design) -> Result<Tensor> {
    let c = x.deep.dims()[1];
    Ok(match design {
        Design::A => x.vector(0)?,
        Design::B => x.deep.narrow(1, 0, c / 2)?.mean(2)?,
        Design::C => x.deep.mean(2)?,
        Design::D => h.clone(),
    })
}

pub fn lowdim_source_dim(design: Design, channels: usize, cond_dim: usize) -> usize {
    match design {
        Design::A | Design::C => channels,
        Design::B => channels / 2,
        Design::D => cond_dim,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualDecoderConfig {
    /// Intersection width C.
    pub channels: usize,
    pub pe_dim: usize,
    /// Output resolution (RecRes).
    pub rec_hw: (usize, usize),
    /// Frames reconstructed per sample (T_s).
    pub frames: usize,
    /// One upsampling stage instead of two.
    pub shallow: bool,
}

impl VisualDecoderConfig {
    fn factor(&self) -> usize {
        if self.shallow {
            2
        } else {
            4
        }
    }

    pub fn block_hw(&self) -> (usize, usize) {
        (self.rec_hw.0 / self.factor(), self.rec_hw.1 / self.factor())
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor();
        if self.channels % 8 != 0 || self.channels == 0 {
            return invalid(format!("visual decoder needs C divisible by 8, got {}", self.channels));
        }
        if self.rec_hw.0 % f != 0 || self.rec_hw.1 % f != 0 || self.rec_hw.0 < f {
            return invalid(format!("reconstruction size {:?} is not divisible by {f}", self.rec_hw));
        }
        if self.pe_dim == 0 || self.pe_dim % 2 != 0 || self.frames == 0 {
            return invalid("positional embedding width must be even and frames positive");
        }
        Ok(())
    }
}

/// Residual conv stages with x2 transposed-conv upsampling, positional
/// embedding after every upsample, and a sigmoid output of 3 x frames channels.
#[derive(Debug, Clone)]
pub struct VisualDecoder {
    cfg: VisualDecoderConfig,
    stages: Vec<(ResBlock2d, ResBlock2d, ConvTranspose2x)>,
    pes: Vec<Tensor>,
    out: Conv2d,
}

impl VisualDecoder {
    pub fn new(p: &Params, cfg: &VisualDecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let widths: &[usize] = if cfg.shallow { &[cfg.channels / 4] } else { &[cfg.channels / 4, cfg.channels / 8] };
        let mut c_in = cfg.channels / 4 + cfg.pe_dim;
        let mut hw = cfg.block_hw();
        let mut stages = Vec::new();
        let mut pes = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let sp = p.pp(format!("stage{i}"));
            stages.push((
                ResBlock2d::new(&sp.pp("res0"), c_in, w, 1)?,
                ResBlock2d::new(&sp.pp("res1"), w, w, 1)?,
                ConvTranspose2x::new(&sp.pp("up"), w, w)?,
            ));
            hw = (hw.0 * 2, hw.1 * 2);
            pes.push(pos_embedding_tensor(hw, cfg.pe_dim, p.dtype(), p.device())?);
            c_in = w + cfg.pe_dim;
        }
        Ok(Self { cfg: cfg.clone(), stages, pes, out: Conv2d::new(&p.pp("out"), c_in, 3 * cfg.frames, 3, 1, 1)? })
    }

    pub fn config(&self) -> &VisualDecoderConfig {
        &self.cfg
    }

    /// (B, C/4 + P, RecRes/4, RecRes/4) -> (B, 3 T_s, RecRes, RecRes) in (0, 1).
    pub fn forward(&self, block: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = block.dims4()?;
        if (h, w) != self.cfg.block_hw() || c != self.cfg.channels / 4 + self.cfg.pe_dim {
            return invalid(format!("decoder input {:?}, expected (B, {}, {:?})", block.dims(), self.cfg.channels / 4 + self.cfg.pe_dim, self.cfg.block_hw()));
        }
        let mut x = block.clone();
        for ((r0, r1, up), pe) in self.stages.iter().zip(&self.pes) {
            x = r1.forward(&r0.forward(&x)?)?;
            x = concat_pe(&up.forward(&x)?, pe)?;
        }
        Ok(sigmoid(&self.out.forward(&x)?)?)
    }
}

/// Three-layer MLP with hidden widths 4n and 2n for an n-wide target.
#[derive(Debug, Clone)]
pub struct LowdimDecoder {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl LowdimDecoder {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&p.pp("l1"), in_dim, 4 * out_dim)?,
            l2: Linear::new(&p.pp("l2"), 4 * out_dim, 2 * out_dim)?,
            l3: Linear::new(&p.pp("l3"), 2 * out_dim, out_dim)?,
        })
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.l1.out_dim(), self.l2.out_dim(), self.l3.out_dim()]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = mish(&self.l1.forward(x)?)?;
        let h = mish(&self.l2.forward(&h)?)?;
        Ok(self.l3.forward(&h)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDecoderConfig {
    pub design: Design,
    pub visual: VisualDecoderConfig,
    pub cameras: usize,
    /// T_s x L; zero disables the low-dim head.
    pub lowdim_out: usize,
    pub cond_dim: usize,
}

/// Outputs of [`StateDecoder::forward`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Per camera, (B, 3 T_s, RecRes, RecRes).
    pub images: Vec<Tensor>,
    /// (B, T_s L) in normalized units.
    pub lowdim: Option<Tensor>,
}

/// D_S: a dedicated decoder per source, fed through the design's transform.
#[derive(Debug, Clone)]
pub struct StateDecoder {
    cfg: StateDecoderConfig,
    proj: Option<Linear>,
    cameras: Vec<VisualDecoder>,
    lowdim: Option<LowdimDecoder>,
    calls: Arc<AtomicUsize>,
}

impl StateDecoder {
    pub fn new(p: &Params, cfg: &StateDecoderConfig) -> Result<Self> {
        let c = cfg.visual.channels;
        let proj = match cfg.design {
            Design::A => None,
            Design::B => Some(Linear::new(&p.pp("proj"), c / 2, c / 4)?),
            Design::C => Some(Linear::new(&p.pp("proj"), c, c / 4)?),
            Design::D => Some(Linear::new(&p.pp("proj"), cfg.cond_dim, c / 4)?),
        };
        let cameras = (0..cfg.cameras).map(|i| VisualDecoder::new(&p.pp(format!("cam{i}")), &cfg.visual)).collect::<Result<_>>()?;
        let lowdim = if cfg.lowdim_out > 0 {
            let in_dim = lowdim_source_dim(cfg.design, c, cfg.cond_dim);
            Some(LowdimDecoder::new(&p.pp("lowdim"), in_dim, cfg.lowdim_out)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), proj, cameras, lowdim, calls: Arc::new(AtomicUsize::new(0)) })
    }

    pub fn config(&self) -> &StateDecoderConfig {
        &self.cfg
    }

    /// Counts calls into `counter` instead of a private one.
    pub fn with_counter(mut self, counter: Arc<AtomicUsize>) -> Self {
        self.calls = counter;
        self
    }

    /// Shared handle on the number of [`forward`](Self::forward) calls.
    pub fn call_counter(&self) -> Arc<AtomicUsize> {
        self.calls.clone()
    }

    pub fn forward(&self, x: &Intersection, h: &Tensor) -> Result<Reconstruction> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let block = transform_intersection(x, h, self.cfg.design, self.cfg.visual.block_hw(), self.cfg.visual.pe_dim, self.proj.as_ref())?;
        let images = self.cameras.iter().map(|d| d.forward(&block)).collect::<Result<_>>()?;
        let lowdim = match &self.lowdim {
            Some(d) => Some(d.forward(&lowdim_source(x, h, self.cfg.design)?)?),
            None => None,
        };
        Ok(Reconstruction { images, lowdim })
    }
}

/// What the state decoder should reproduce for the window ending at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionTarget {
    /// Per camera, T_s HWC frames at the reconstruction resolution.
    pub images: Vec<Vec<f32>>,
    /// T_s rows of raw low-dim state.
    pub lowdim: Vec<f32>,
    pub offset: usize,
}

/// States `offset` steps after the window at `t` (clamped to the episode
/// end), full frames resized to `rec_hw`.
pub fn build_target(ep: &Episode, t: usize, history: usize, offset: usize, rec_hw: (usize, usize)) -> ReconstructionTarget {
    let idx = future_state_indices(ep.len, t, history, offset);
    let images = (0..ep.cameras())
        .map(|c| idx.iter().flat_map(|&s| resize_bilinear(ep.frame(c, s), ep.image_hw, rec_hw)).collect())
        .collect();
    let lowdim = idx.iter().flat_map(|&s| ep.lowdim_at(s).iter().copied()).collect();
    ReconstructionTarget { images, lowdim, offset }
}

/// Writes an HWC image with values in [0, 1] as an 8-bit RGB PNG.
pub fn save_png(path: &Path, hwc: &[f32], hw: (usize, usize)) -> Result<()> {
    if hwc.len() != hw.0 * hw.1 * 3 {
        return invalid(format!("{} values for a {}x{} RGB image", hwc.len(), hw.0, hw.1));
    }
    let bytes: Vec<u8> = hwc.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(hw.1 as u32, hw.0 as u32, bytes).expect("length checked");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
