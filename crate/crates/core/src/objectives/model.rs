//! The trainable policy and its exponential-moving-average shadow.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Tensor};

use crate::config::{RunConfig, Variant};
use crate::denoiser::{ConditionalUnet, UnetConfig};
use crate::error::{invalid, Result};
use crate::nn::{Init, ParamStore, Params};
use crate::perception::{StateEncoder, VisionConfig};
use crate::reconstruction::{StateDecoder, StateDecoderConfig, VisualDecoderConfig};
use crate::schedule::{make_schedule, Schedule};

pub const STATE_ENCODER: &str = "enc_state";
pub const ACTION_ENCODER: &str = "enc_action";
pub const ACTION_DECODER: &str = "dec_action";
pub const STATE_DECODER: &str = "dec_state";
pub const CURL_HEAD: &str = "curl";

pub fn cond_dim(cfg: &RunConfig) -> usize {
    cfg.model.history * (cfg.task.cameras * cfg.model.embed + cfg.task.lowdim_dim)
}

pub fn unet_config(cfg: &RunConfig) -> UnetConfig {
    UnetConfig {
        action_dim: cfg.task.action_dim,
        horizon: cfg.model.horizon,
        cond_dim: cond_dim(cfg),
        widths: cfg.model.widths.clone(),
        kernel: cfg.model.kernel,
    }
}

pub fn vision_config(cfg: &RunConfig) -> VisionConfig {
    VisionConfig {
        input_hw: cfg.task.crop_hw,
        channels: cfg.model.vision_channels,
        embed: cfg.model.embed,
        pooling: cfg.model.pooling,
    }
}

pub fn state_decoder_config(cfg: &RunConfig) -> StateDecoderConfig {
    let m = &cfg.model;
    StateDecoderConfig {
        design: m.design,
        visual: VisualDecoderConfig {
            channels: *m.widths.last().unwrap(),
            pe_dim: m.pe_dim,
            rec_hw: cfg.task.rec_hw,
            frames: m.history,
            shallow: m.shallow_decoder,
        },
        cameras: cfg.task.cameras,
        lowdim_out: if m.variant == Variant::Crossway { m.history * cfg.task.lowdim_dim } else { 0 },
        cond_dim: cond_dim(cfg),
    }
}

/// E_S, E_A, D_A and, depending on the variant, D_S or the contrastive head.
#[derive(Debug, Clone)]
pub struct Networks {
    pub state_encoder: StateEncoder,
    pub unet: ConditionalUnet,
    pub state_decoder: Option<StateDecoder>,
    /// Bilinear (C, C) matrix of the contrastive variant.
    pub curl_w: Option<Tensor>,
}

impl Networks {
    pub fn build(p: &Params, cfg: &RunConfig, ds_calls: Arc<AtomicUsize>) -> Result<Self> {
        let unet = ConditionalUnet::new(&p.pp(ACTION_ENCODER), &p.pp(ACTION_DECODER), &unet_config(cfg))?;
        let state_encoder = StateEncoder::new(&p.pp(STATE_ENCODER), &vision_config(cfg), cfg.task.cameras)?;
        let state_decoder = if cfg.model.variant.has_state_decoder() {
            Some(StateDecoder::new(&p.pp(STATE_DECODER), &state_decoder_config(cfg))?.with_counter(ds_calls))
        } else {
            None
        };
        let curl_w = if cfg.model.variant == Variant::Curl {
            let c = *cfg.model.widths.last().unwrap();
            Some(p.pp(CURL_HEAD).get(&[c, c], "w", Init::fan_in(c))?)
        } else {
            None
        };
        Ok(Self { state_encoder, unet, state_decoder, curl_w })
    }

    /// Observation condition h, (B, D_h). `images` per camera (B, T_s, 3, H, W),
    /// `lowdim` (B, T_s, L) normalized.
    pub fn condition(&self, images: &[Tensor], lowdim: &Tensor) -> Result<Tensor> {
        Ok(self.state_encoder.condition(images, lowdim)?.values)
    }
}

/// Parameters, their EMA shadow, and networks built over both.
///
/// Both network sets alias the stores' variables, so optimizer and EMA
/// updates are visible without rebuilding. The EMA networks are built from
/// detached views and never enter an autodiff graph.
pub struct PolicyModel {
    cfg: RunConfig,
    params: ParamStore,
    ema: ParamStore,
    pub net: Networks,
    pub ema_net: Networks,
    sched: Schedule,
    ds_calls: Arc<AtomicUsize>,
}

impl PolicyModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = if cfg.train.f64 { DType::F64 } else { DType::F32 };
        let params = ParamStore::new(dtype, cfg.train.seed);
        let ds_calls = Arc::new(AtomicUsize::new(0));
        let net = Networks::build(&params.root(), cfg, ds_calls.clone())?;
        let ema = params.deep_copy()?;
        let ema_net = Networks::build(&ema.root_detached(), cfg, ds_calls.clone())?;
        ema.check_all_used()?;
        let sched = make_schedule(cfg.model.diffusion_steps, cfg.model.schedule)?;
        Ok(Self { cfg: cfg.clone(), params, ema, net, ema_net, sched, ds_calls })
    }

    /// Rebuilds a model over restored stores; every stored parameter must be used.
    pub fn from_stores(cfg: &RunConfig, params: ParamStore, ema: ParamStore, sched: Schedule) -> Result<Self> {
        cfg.validate()?;
        if params.names() != ema.names() {
            return invalid("EMA parameter names differ from the model's");
        }
        if sched.steps() != cfg.model.diffusion_steps {
            return invalid("schedule length differs from the configured diffusion steps");
        }
        let ds_calls = Arc::new(AtomicUsize::new(0));
        let net = Networks::build(&params.root(), cfg, ds_calls.clone())?;
        let ema_net = Networks::build(&ema.root_detached(), cfg, ds_calls.clone())?;
        params.check_all_used()?;
        ema.check_all_used()?;
        Ok(Self { cfg: cfg.clone(), params, ema, net, ema_net, sched, ds_calls })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.model.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn ema_params(&self) -> &ParamStore {
        &self.ema
    }

    pub fn schedule(&self) -> &Schedule {
        &self.sched
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Number of state-decoder forward passes made by either network set.
    pub fn state_decoder_calls(&self) -> usize {
        self.ds_calls.load(Ordering::Relaxed)
    }

    pub fn state_decoder_counter(&self) -> Arc<AtomicUsize> {
        self.ds_calls.clone()
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::config::{RunConfig, Variant};
    use crate::data::augment::resize_bilinear;
    use crate::data::dataset::{generate_demos, DemoDataset};
    use crate::data::Episode;

    pub(crate) fn tiny(variant: Variant) -> RunConfig {
        RunConfig::tiny().with_overrides(&[format!("variant={}", variant.name())]).unwrap()
    }

    /// Expert demos re-rendered at the tiny configuration's resolution.
    pub(crate) fn small_demos(n: usize) -> DemoDataset {
        let full = generate_demos(n, 3).unwrap();
        let eps = full
            .episodes
            .iter()
            .map(|e| {
                let images = vec![resize_bilinear(&e.images[0], e.image_hw, (20, 20))];
                Episode::new((20, 20), images, 2, e.lowdim.clone(), 2, e.actions.clone()).unwrap()
            })
            .collect();
        DemoDataset::new(eps, 3).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::tiny;
    use super::*;

    #[test]
    fn ema_mirrors_parameter_set() {
        for v in [Variant::Crossway, Variant::VisualOnly, Variant::Curl, Variant::Baseline] {
            let m = PolicyModel::new(&tiny(v)).unwrap();
            assert_eq!(m.params().names(), m.ema_params().names());
            for (name, var) in m.params().vars() {
                let e = m.ema_params().get_var(&name).unwrap();
                assert_eq!(var.as_tensor().dims(), e.as_tensor().dims());
            }
            let has_ds = m.params().names().iter().any(|n| n.starts_with(STATE_DECODER));
            assert_eq!(has_ds, v.has_state_decoder(), "{v:?}");
            assert_eq!(m.params().names().iter().any(|n| n.starts_with(CURL_HEAD)), v == Variant::Curl);
        }
    }

    #[test]
    fn shared_names_start_identical_across_variants() {
        let a = PolicyModel::new(&tiny(Variant::Crossway)).unwrap();
        let b = PolicyModel::new(&tiny(Variant::Baseline)).unwrap();
        for name in b.params().names() {
            let x = a.params().get_var(&name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let y = b.params().get_var(&name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn lowdim_head_only_for_full_variant() {
        assert_eq!(state_decoder_config(&tiny(Variant::Crossway)).lowdim_out, 4);
        assert_eq!(state_decoder_config(&tiny(Variant::VisualOnly)).lowdim_out, 0);
    }
}
