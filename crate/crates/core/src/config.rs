//! Run configuration: task geometry, model, training and evaluation settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::Pooling;
use crate::reconstruction::Design;
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Noise prediction plus state reconstruction from the intersection.
    #[default]
    Crossway,
    /// Like `Crossway` but only images are reconstructed.
    VisualOnly,
    /// Noise prediction plus a contrastive loss on the intersection.
    Curl,
    /// Noise prediction only.
    Baseline,
}

impl Variant {
    pub fn has_state_decoder(self) -> bool {
        matches!(self, Variant::Crossway | Variant::VisualOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Crossway => "crossway",
            Variant::VisualOnly => "visual_only",
            Variant::Curl => "curl",
            Variant::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub image_hw: (usize, usize),
    pub crop_hw: (usize, usize),
    pub rec_hw: (usize, usize),
    pub cameras: usize,
    pub action_dim: usize,
    pub lowdim_dim: usize,
    pub max_steps: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            image_hw: (96, 96),
            crop_hw: (84, 84),
            rec_hw: (96, 96),
            cameras: 1,
            action_dim: 2,
            lowdim_dim: 2,
            max_steps: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub design: Design,
    /// Weight of the reconstruction loss.
    pub alpha: f64,
    /// Reconstruct the states this many steps ahead (0 = the observed ones).
    pub offset: usize,
    /// Observation history T_s.
    pub history: usize,
    /// Action horizon T_a.
    pub horizon: usize,
    /// U-Net stage widths; the last is the intersection width C.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Base width of each camera encoder.
    pub vision_channels: usize,
    /// Per-camera embedding width.
    pub embed: usize,
    pub pooling: Pooling,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub pe_dim: usize,
    pub shallow_decoder: bool,
    pub curl_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Crossway,
            design: Design::A,
            alpha: 0.1,
            offset: 0,
            history: 2,
            horizon: 8,
            widths: vec![256, 512],
            kernel: 5,
            vision_channels: 64,
            embed: 64,
            pooling: Pooling::SpatialSoftmax,
            diffusion_steps: 100,
            schedule: ScheduleKind::SquaredCosine,
            pe_dim: 64,
            shallow_decoder: false,
            curl_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Steps over which the EMA decay ramps linearly from 0.
    pub ema_warmup: usize,
    pub seed: u64,
    /// Train in 64-bit floats (tests); 32-bit otherwise.
    pub f64: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-6,
            betas: (0.95, 0.999),
            adam_eps: 1e-8,
            ema_decay: 0.999,
            ema_warmup: 200,
            seed: 0,
            f64: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Reverse steps at inference; equal to the diffusion steps means full DDPM.
    pub ddim_steps: usize,
    pub clip_x0: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 50, seeds: vec![0, 1, 2], ddim_steps: 100, clip_x0: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl RunConfig {
    /// Small model for a laptop-scale run on the toy task.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.task.rec_hw = (48, 48);
        c.model.widths = vec![64, 128];
        c.model.vision_channels = 16;
        c.model.embed = 64;
        c.train.epochs = 50;
        c
    }

    /// Minimal 64-bit configuration for property tests and smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.task.image_hw = (20, 20);
        c.task.crop_hw = (16, 16);
        c.task.rec_hw = (8, 8);
        c.model.widths = vec![16];
        c.model.vision_channels = 4;
        c.model.embed = 8;
        c.model.pe_dim = 4;
        c.model.diffusion_steps = 10;
        c.eval.ddim_steps = 10;
        c.train.batch_size = 4;
        c.train.f64 = true;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `section.key=value` overrides, where the value is TOML
    /// (bare words are taken as strings). Unknown keys are errors.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let Some((key, raw)) = o.split_once('=') else {
                return config_err(format!("override `{o}` is not key=value"));
            };
            let (key, raw) = (key.trim(), raw.trim());
            let path: Vec<&str> = if key.contains('.') { key.split('.').collect() } else { shorthand(key) };
            let value = parse_value(raw);
            let mut table = &mut doc;
            for part in &path[..path.len() - 1] {
                table = match table.get_mut(*part) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return config_err(format!("unknown config section in `{key}`")),
                };
            }
            let last = path[path.len() - 1];
            if !table.contains_key(last) {
                return config_err(format!("unknown config key `{key}`"));
            }
            table.insert(last.to_string(), value);
        }
        let c: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, m) = (&self.task, &self.model);
        if t.crop_hw.0 > t.image_hw.0 || t.crop_hw.1 > t.image_hw.1 || t.crop_hw.0 < 8 || t.crop_hw.1 < 8 {
            return config_err(format!("crop {:?} must be at least 8x8 and fit in the image {:?}", t.crop_hw, t.image_hw));
        }
        let f = if m.shallow_decoder { 2 } else { 4 };
        if t.rec_hw.0 % f != 0 || t.rec_hw.1 % f != 0 || t.rec_hw.0 == 0 || t.rec_hw.1 == 0 {
            return config_err(format!("reconstruction size {:?} must be divisible by {f}", t.rec_hw));
        }
        if m.widths.is_empty() || m.widths.iter().any(|w| *w == 0) {
            return config_err("model.widths needs at least one positive width");
        }
        let factor = 1 << m.widths.len();
        if m.horizon == 0 || m.horizon % factor != 0 {
            return config_err(format!("action horizon {} is not divisible by the U-Net downsample factor {factor}", m.horizon));
        }
        let c = *m.widths.last().unwrap();
        if c % 8 != 0 {
            return config_err(format!("intersection width {c} must be divisible by 8"));
        }
        if m.history == 0 || m.diffusion_steps == 0 || t.cameras == 0 || t.action_dim == 0 {
            return config_err("history, diffusion steps, cameras and action dim must be positive");
        }
        if !(m.alpha >= 0.0) || !(m.curl_weight >= 0.0) {
            return config_err("loss weights must be non-negative");
        }
        if m.pe_dim == 0 || m.pe_dim % 2 != 0 {
            return config_err("pe_dim must be even and positive");
        }
        let tr = &self.train;
        if tr.batch_size == 0 || (m.variant == Variant::Curl && tr.batch_size < 2) {
            return config_err("batch size must be positive (at least 2 for the contrastive variant)");
        }
        if !(0.0..=1.0).contains(&tr.ema_decay) || !(tr.lr > 0.0) {
            return config_err("ema decay must lie in [0, 1] and lr be positive");
        }
        let e = &self.eval;
        if e.ddim_steps == 0 || e.ddim_steps > m.diffusion_steps {
            return config_err(format!("eval.ddim_steps must lie in [1, {}]", m.diffusion_steps));
        }
        Ok(())
    }
}

fn shorthand(key: &str) -> Vec<&str> {
    let section = match key {
        "variant" | "design" | "alpha" | "offset" | "widths" | "history" | "horizon" | "diffusion_steps" => "model",
        "epochs" | "batch_size" | "lr" | "seed" => "train",
        "episodes" | "seeds" | "ddim_steps" => "eval",
        _ => return vec![key],
    };
    vec![section, key]
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
