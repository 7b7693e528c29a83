//! State encoder: per-camera residual CNNs and the observation condition.

use std::ops::Range;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{silu, Conv2d, GroupNorm, Linear, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Expected (x, y) image coordinate of every feature channel.
    #[default]
    SpatialSoftmax,
    GlobalAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    /// Input frame size (H, W) after cropping.
    pub input_hw: (usize, usize),
    /// Base channel width; the last blocks use twice this.
    pub channels: usize,
    pub embed: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock2d {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<Conv2d>,
}

impl ResBlock2d {
    pub(crate) fn new(p: &Params, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut =
            if c_in == c_out && stride == 1 { None } else { Some(Conv2d::new(&p.pp("shortcut"), c_in, c_out, 1, stride, 0)?) };
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, stride, 1)?,
            norm1: GroupNorm::new(&p.pp("norm1"), c_out)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            norm2: GroupNorm::new(&p.pp("norm2"), c_out)?,
            shortcut,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok(silu(&(h + s)?)?)
    }
}

/// Softmax over each channel's spatial map, reduced to its expected (x, y)
/// coordinate in [-1, 1]. (B, C, H, W) -> (B, 2C) laid out as [x..., y...].
pub fn spatial_softmax(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let probs = candle_nn::ops::softmax(&x.reshape((b, c, h * w))?, D::Minus1)?;
    let coord = |n: usize, i: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let xs: Vec<f64> = (0..h * w).map(|i| coord(w, i % w)).collect();
    let ys: Vec<f64> = (0..h * w).map(|i| coord(h, i / w)).collect();
    let grid = Tensor::from_vec([xs, ys].concat(), (2, h * w), x.device())?.to_dtype(x.dtype())?;
    // (B, C, HW) x (HW, 2) -> (B, C, 2)
    let e = probs.broadcast_matmul(&grid.t()?)?;
    Ok(e.transpose(1, 2)?.reshape((b, 2 * c))?)
}

/// One camera's encoder: stem, four residual blocks, pooling, projection.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    cfg: VisionConfig,
    stem: Conv2d,
    stem_norm: GroupNorm,
    blocks: Vec<ResBlock2d>,
    proj: Linear,
}

impl VisualEncoder {
    pub fn new(p: &Params, cfg: &VisionConfig) -> Result<Self> {
        let v = cfg.channels;
        if v == 0 || cfg.embed == 0 || cfg.input_hw.0 < 8 || cfg.input_hw.1 < 8 {
            return invalid("vision encoder needs positive widths and frames of at least 8x8");
        }
        let blocks = vec![
            ResBlock2d::new(&p.pp("block0"), v, v, 2)?,
            ResBlock2d::new(&p.pp("block1"), v, 2 * v, 2)?,
            ResBlock2d::new(&p.pp("block2"), 2 * v, 2 * v, 1)?,
            ResBlock2d::new(&p.pp("block3"), 2 * v, 2 * v, 1)?,
        ];
        let pooled = match cfg.pooling {
            Pooling::SpatialSoftmax => 4 * v,
            Pooling::GlobalAverage => 2 * v,
        };
        Ok(Self {
            cfg: cfg.clone(),
            stem: Conv2d::new(&p.pp("stem"), 3, v, 3, 2, 1)?,
            stem_norm: GroupNorm::new(&p.pp("stem_norm"), v)?,
            blocks,
            proj: Linear::new(&p.pp("proj"), pooled, cfg.embed)?,
        })
    }

    /// (N, 3, H, W) frames in [0, 1] -> (N, embed).
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 || (h, w) != self.cfg.input_hw {
            return invalid(format!("frames {:?}, encoder expects (N, 3, {}, {})", frames.dims(), self.cfg.input_hw.0, self.cfg.input_hw.1));
        }
        // Center pixel values around zero.
        let x = ((frames * 2.0)? - 1.0)?;
        let mut x = silu(&self.stem_norm.forward(&self.stem.forward(&x)?)?)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let pooled = match self.cfg.pooling {
            Pooling::SpatialSoftmax => spatial_softmax(&x)?,
            Pooling::GlobalAverage => x.mean(D::Minus1)?.mean(D::Minus1)?,
        };
        Ok(self.proj.forward(&pooled)?)
    }
}

/// Slice boundaries of the observation condition: for each history step,
/// every camera embedding in camera order followed by the low-dim state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionLayout {
    pub history: usize,
    pub camera_widths: Vec<usize>,
    pub lowdim: usize,
}

impl ConditionLayout {
    fn step_width(&self) -> usize {
        self.camera_widths.iter().sum::<usize>() + self.lowdim
    }

    pub fn dim(&self) -> usize {
        self.history * self.step_width()
    }

    pub fn camera(&self, t: usize, cam: usize) -> Range<usize> {
        let start = t * self.step_width() + self.camera_widths[..cam].iter().sum::<usize>();
        start..start + self.camera_widths[cam]
    }

    pub fn lowdim(&self, t: usize) -> Range<usize> {
        let start = t * self.step_width() + self.camera_widths.iter().sum::<usize>();
        start..start + self.lowdim
    }
}

/// The observation condition h for a batch: (B, D_h) plus its layout.
#[derive(Debug, Clone)]
pub struct ConditionVector {
    pub values: Tensor,
    pub layout: ConditionLayout,
}

/// Concatenates per-camera embeddings `(B, T_s, E_c)` and low-dim states
/// `(B, T_s, L)` timestep-major.
pub fn assemble_condition(h_img: &[Tensor], lowdim: &Tensor) -> Result<ConditionVector> {
    let (b, t, l) = lowdim.dims3()?;
    let mut widths = Vec::with_capacity(h_img.len());
    for h in h_img {
        let (hb, ht, e) = h.dims3()?;
        if (hb, ht) != (b, t) {
            return invalid(format!("camera embedding {:?} not aligned with low-dim {:?}", h.dims(), lowdim.dims()));
        }
        widths.push(e);
    }
    let layout = ConditionLayout { history: t, camera_widths: widths, lowdim: l };
    let mut parts: Vec<Tensor> = h_img.to_vec();
    if l > 0 {
        parts.push(lowdim.to_dtype(h_img.first().map(|h| h.dtype()).unwrap_or(lowdim.dtype()))?);
    }
    if parts.is_empty() {
        return invalid("condition has no inputs");
    }
    let values = Tensor::cat(&parts, 2)?.reshape((b, layout.dim()))?;
    Ok(ConditionVector { values, layout })
}

/// E_S: one dedicated [`VisualEncoder`] per camera.
#[derive(Debug, Clone)]
pub struct StateEncoder {
    cameras: Vec<VisualEncoder>,
}

impl StateEncoder {
    pub fn new(p: &Params, cfg: &VisionConfig, n_cameras: usize) -> Result<Self> {
        let cameras = (0..n_cameras).map(|i| VisualEncoder::new(&p.pp(format!("cam{i}")), cfg)).collect::<Result<_>>()?;
        Ok(Self { cameras })
    }

    pub fn n_cameras(&self) -> usize {
        self.cameras.len()
    }

    /// Per camera: (B, T_s, 3, H, W) -> (B, T_s, E).
    pub fn encode_visual(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        if images.len() != self.cameras.len() {
            return invalid(format!("{} image streams for {} camera encoders", images.len(), self.cameras.len()));
        }
        images
            .iter()
            .zip(&self.cameras)
            .map(|(img, enc)| {
                let (b, t, c, h, w) = img.dims5()?;
                let e = enc.forward(&img.reshape((b * t, c, h, w))?)?;
                Ok(e.reshape((b, t, ()))?)
            })
            .collect()
    }

    pub fn condition(&self, images: &[Tensor], lowdim: &Tensor) -> Result<ConditionVector> {
        let h_img = self.encode_visual(images)?;
        assemble_condition(&h_img, &lowdim.to_dtype(images.first().map(|i| i.dtype()).unwrap_or(DType::F32))?)
    }
}
