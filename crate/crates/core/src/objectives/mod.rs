//! Training objectives: noise prediction, state reconstruction, the
//! contrastive alternative, EMA tracking, and the training loop.

pub mod batch;
pub mod model;
pub mod optim;
pub mod train;

use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::Variant;
use crate::denoiser::Intersection;
use crate::error::{invalid, Result};
use crate::nn::{mse, ParamStore};
use crate::reconstruction::Reconstruction;
use crate::schedule::Schedule;

pub use batch::{assemble_batch, Batch, CropMode, ReconTargets};
pub use model::{Networks, PolicyModel};

/// Everything produced by one noise-prediction pass.
#[derive(Debug, Clone)]
pub struct DdpmPass {
    pub loss: Tensor,
    pub intersection: Intersection,
    /// Diffusion step of every batch row.
    pub ks: Vec<usize>,
    /// The noisy actions fed to the encoder, (B, T_a, A).
    pub noisy: Tensor,
}

/// Draws one step per row uniformly from `[0, K)` and unit Gaussian noise
/// shaped like `a0`. Steps are drawn before the noise.
pub fn draw_noise<R: Rng>(a0: &Tensor, steps: usize, rng: &mut R) -> Result<(Vec<usize>, Tensor)> {
    let b = a0.dims()[0];
    let ks: Vec<usize> = (0..b).map(|_| rng.random_range(0..steps)).collect();
    let eps: Vec<f64> = (0..a0.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::from_vec(eps, a0.dims(), a0.device())?.to_dtype(a0.dtype())?;
    Ok((ks, eps))
}

/// Row-wise forward corruption of a batch of (B, ...) tensors.
pub fn q_sample_batch(sched: &Schedule, a0: &Tensor, ks: &[usize], eps: &Tensor) -> Result<Tensor> {
    let b = a0.dims()[0];
    if ks.len() != b {
        return invalid(format!("{} steps for a batch of {b}", ks.len()));
    }
    if ks.iter().any(|k| *k >= sched.steps()) {
        return invalid("diffusion step outside the schedule");
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, a0.rank() - 1));
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = ks.iter().map(|k| f(sched.alpha_bars()[*k])).collect();
        Ok(Tensor::from_vec(v, shape.as_slice(), a0.device())?.to_dtype(a0.dtype())?)
    };
    let a = coef(&|ab| ab.sqrt())?;
    let s = coef(&|ab| (1.0 - ab).sqrt())?;
    Ok((a0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Noise-prediction loss: corrupt `a0` at random steps and regress the noise
/// through E_A and D_A conditioned on `h`.
pub fn loss_ddpm<R: Rng>(net: &Networks, h: &Tensor, a0: &Tensor, sched: &Schedule, rng: &mut R) -> Result<DdpmPass> {
    let (ks, eps) = draw_noise(a0, sched.steps(), rng)?;
    let noisy = q_sample_batch(sched, a0, &ks, &eps)?;
    let intersection = net.unet.encoder.forward(&noisy, h, &ks)?;
    let pred = net.unet.decoder.forward(&intersection, h)?;
    Ok(DdpmPass { loss: mse(&pred, &eps)?, intersection, ks, noisy })
}

/// Sum of per-source mean squared errors. Low-dim terms are skipped when
/// `with_lowdim` is false or the decoder has no low-dim head.
pub fn loss_recon(pred: &Reconstruction, target: &ReconTargets, with_lowdim: bool) -> Result<Tensor> {
    if pred.images.len() != target.images.len() {
        return invalid(format!("{} reconstructed cameras for {} targets", pred.images.len(), target.images.len()));
    }
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(acc) => (acc + t)?,
            None => t,
        });
        Ok(())
    };
    for (p, t) in pred.images.iter().zip(&target.images) {
        add(mse(p, t)?)?;
    }
    if with_lowdim {
        if let Some(p) = &pred.lowdim {
            add(mse(p, &target.lowdim)?)?;
        }
    }
    total.ok_or_else(|| crate::Error::InvalidArgument("nothing to reconstruct".into()))
}

pub fn loss_crossway(l_ddpm: &Tensor, l_recon: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok((l_ddpm + l_recon.affine(alpha, 0.0)?)?)
}

/// Bilinear contrastive loss between anchors `x1` (B, C) and keys `x2`
/// (B, C): row `i` of `x1 W x2^T` is classified against label `i`. The keys
/// are detached.
pub fn loss_curl(x1: &Tensor, x2: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c) = x1.dims2()?;
    if b < 2 {
        return invalid("the contrastive loss needs a batch of at least 2");
    }
    if x2.dims() != [b, c] || w.dims() != [c, c] {
        return invalid(format!("contrastive shapes {:?}, {:?}, {:?}", x1.dims(), x2.dims(), w.dims()));
    }
    let logits = x1.matmul(w)?.matmul(&x2.detach().t()?)?;
    let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
    Ok((logp * eye)?.sum_all()?.affine(-1.0 / b as f64, 0.0)?)
}

/// Per-row contrastive terms, for inspection.
pub fn curl_row_terms(x1: &Tensor, x2: &Tensor, w: &Tensor) -> Result<Vec<f64>> {
    let logits = x1.matmul(w)?.matmul(&x2.t()?)?;
    let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(logp.iter().enumerate().map(|(i, row)| -row[i]).collect())
}

/// `ema <- decay ema + (1 - decay) params`, matched by parameter name.
pub fn ema_update(ema: &ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if ema.names() != params.names() {
        return invalid("EMA and parameter stores hold different names");
    }
    for (name, p) in params.vars() {
        let e = ema.get_var(&name).expect("names checked");
        let next = (e.as_tensor().affine(decay, 0.0)? + p.as_tensor().detach().affine(1.0 - decay, 0.0)?)?;
        e.set(&next)?;
    }
    Ok(())
}

/// EMA decay after `step` updates: ramps linearly from 0 over `warmup` steps.
pub fn ema_decay_at(decay: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 {
        decay
    } else {
        decay * (step as f64 / warmup as f64).min(1.0)
    }
}

/// Losses of one training step. `total` carries the graph.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub ddpm: Tensor,
    pub recon: Option<Tensor>,
    pub curl: Option<Tensor>,
    pub total: Tensor,
}

/// The variant's training loss on a batch.
pub fn variant_loss<R: Rng>(model: &PolicyModel, batch: &Batch, rng: &mut R) -> Result<StepLoss> {
    let net = &model.net;
    let h = net.condition(&batch.images, &batch.lowdim)?;
    let pass = loss_ddpm(net, &h, &batch.actions, model.schedule(), rng)?;
    let m = &model.config().model;
    match model.variant() {
        Variant::Baseline => Ok(StepLoss { total: pass.loss.clone(), ddpm: pass.loss, recon: None, curl: None }),
        Variant::Crossway | Variant::VisualOnly => {
            let dec = net.state_decoder.as_ref().expect("variant builds a state decoder");
            let target = batch.targets.as_ref().ok_or_else(|| crate::Error::InvalidArgument("batch has no reconstruction targets".into()))?;
            let pred = dec.forward(&pass.intersection, &h)?;
            let recon = loss_recon(&pred, target, model.variant() == Variant::Crossway)?;
            let total = loss_crossway(&pass.loss, &recon, m.alpha)?;
            Ok(StepLoss { ddpm: pass.loss, recon: Some(recon), curl: None, total })
        }
        Variant::Curl => {
            let view2 = batch.second_view.as_ref().ok_or_else(|| crate::Error::InvalidArgument("batch has no second view".into()))?;
            let ema = &model.ema_net;
            let h2 = ema.condition(view2, &batch.lowdim)?;
            let x2 = ema.unet.encoder.forward(&pass.noisy, &h2, &pass.ks)?.vector(0)?;
            let x1 = pass.intersection.vector(0)?;
            let curl = loss_curl(&x1, &x2, net.curl_w.as_ref().expect("variant builds the head"))?;
            let total = (&pass.loss + curl.affine(m.curl_weight, 0.0)?)?;
            Ok(StepLoss { ddpm: pass.loss, recon: None, curl: Some(curl), total })
        }
    }
}

/// Target and EMA reconstruction of the newest history frame of the first
/// camera for each sample, as HWC images at the reconstruction resolution.
/// The intersection comes from noisy expert actions at a random step, as in
/// training.
pub fn preview_reconstructions<R: Rng>(
    model: &PolicyModel,
    ds: &crate::data::dataset::DemoDataset,
    samples: &[(usize, usize)],
    rng: &mut R,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let net = &model.ema_net;
    let dec = net.state_decoder.as_ref().ok_or_else(|| crate::Error::NoStateDecoder(model.variant().name().into()))?;
    let batch = assemble_batch(ds, samples, model.config(), model.dtype(), CropMode::Center, rng)?;
    let h = net.condition(&batch.images, &batch.lowdim)?;
    let (ks, eps) = draw_noise(&batch.actions, model.schedule().steps(), rng)?;
    let noisy = q_sample_batch(model.schedule(), &batch.actions, &ks, &eps)?;
    let pred = dec.forward(&net.unet.encoder.forward(&noisy, &h, &ks)?, &h)?;
    let target = batch.targets.as_ref().expect("variant builds targets");
    let ts = model.config().model.history;
    let newest_hwc = |t: &Tensor| -> Result<Vec<Vec<f32>>> {
        let frames = t.narrow(1, 3 * (ts - 1), 3)?.permute((0, 2, 3, 1))?.to_dtype(DType::F32)?;
        Ok(frames.flatten_from(1)?.to_vec2::<f32>()?)
    };
    Ok(newest_hwc(&target.images[0])?.into_iter().zip(newest_hwc(&pred.images[0])?).collect())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::objectives::model::tests_support::{small_demos, tiny};
    use crate::schedule::{make_schedule, ScheduleKind};
    use candle_core::{Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn previews_need_a_state_decoder() {
        let ds = small_demos(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = PolicyModel::new(&tiny(Variant::Baseline)).unwrap();
        assert!(matches!(preview_reconstructions(&base, &ds, &[(0, 1)], &mut rng), Err(crate::Error::NoStateDecoder(_))));
        let cross = PolicyModel::new(&tiny(Variant::Crossway)).unwrap();
        let out = preview_reconstructions(&cross, &ds, &[(0, 1), (0, 2)], &mut rng).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0.len(), 8 * 8 * 3);
        assert_eq!(out[0].1.len(), 8 * 8 * 3);
        assert!(out[0].1.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crossway_combination() {
        let f = |a: f64, b: f64, alpha| scalar(&loss_crossway(&t(vec![a], &[]), &t(vec![b], &[]), alpha).unwrap()).unwrap();
        assert!((f(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(f(0.7, 123.0, 0.0), 0.7);
        assert_eq!(f(0.0, 0.0, 0.1), 0.0);
    }

    #[test]
    fn zero_noise_prediction_has_unit_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a0 = Tensor::zeros((4096, 8, 2), DType::F64, &Device::Cpu).unwrap();
        let (_, eps) = draw_noise(&a0, 100, &mut rng).unwrap();
        let l = scalar(&mse(&eps.zeros_like().unwrap(), &eps).unwrap()).unwrap();
        assert!((l - 1.0).abs() < 0.05, "{l}");
        assert_eq!(scalar(&mse(&eps, &eps).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn batched_corruption_matches_scalar_form() {
        let sched = make_schedule(50, ScheduleKind::SquaredCosine).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = Tensor::rand(-1f64, 1.0, (3, 4, 2), &Device::Cpu).unwrap();
        let (ks, eps) = draw_noise(&a0, 50, &mut rng).unwrap();
        let got = q_sample_batch(&sched, &a0, &ks, &eps).unwrap().to_vec3::<f64>().unwrap();
        let x0 = a0.to_vec3::<f64>().unwrap();
        let e = eps.to_vec3::<f64>().unwrap();
        for b in 0..3 {
            let want = sched.q_sample(&x0[b].concat(), ks[b], &e[b].concat()).unwrap();
            assert_eq!(got[b].concat(), want);
        }
    }

    fn recon(img: f64, low: f64) -> Reconstruction {
        Reconstruction {
            images: vec![Tensor::full(img, (1, 3, 96, 96), &Device::Cpu).unwrap()],
            lowdim: Some(Tensor::full(low, (1, 4), &Device::Cpu).unwrap()),
        }
    }

    fn target(img: f64, low: f64) -> ReconTargets {
        ReconTargets {
            images: vec![Tensor::full(img, (1, 3, 96, 96), &Device::Cpu).unwrap()],
            lowdim: Tensor::full(low, (1, 4), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        assert_eq!(scalar(&loss_recon(&recon(0.5, 0.2), &target(0.5, 0.2), true).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&loss_recon(&recon(0.0, 0.0), &target(1.0, 0.0), true).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&loss_recon(&recon(0.0, 0.0), &target(0.0, 2.0), true).unwrap()).unwrap(), 4.0);
        assert_eq!(scalar(&loss_recon(&recon(0.0, 0.0), &target(0.0, 2.0), false).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn curl_with_zero_matrix_is_log_batch() {
        let x = Tensor::rand(-1f64, 1.0, (5, 8), &Device::Cpu).unwrap();
        let w = Tensor::zeros((8, 8), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&loss_curl(&x, &x, &w).unwrap()).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(loss_curl(&x.narrow(0, 0, 1).unwrap(), &x.narrow(0, 0, 1).unwrap(), &w).is_err());
    }

    #[test]
    fn curl_with_matched_orthonormal_keys_vanishes() {
        let x = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap();
        let w = (Tensor::eye(4, DType::F64, &Device::Cpu).unwrap() * 50.0).unwrap();
        // Direct evaluation: each row is softmax(50, 0, 0, 0) at the label.
        let want = -(50f64 - (50f64.exp() + 3.0).ln());
        let l = scalar(&loss_curl(&x, &x, &w).unwrap()).unwrap();
        assert!((l - want).abs() < 1e-12 && l < 1e-20);
    }

    #[test]
    fn curl_keys_receive_no_gradient() {
        let x1 = Var::from_tensor(&Tensor::rand(-1f64, 1.0, (4, 6), &Device::Cpu).unwrap()).unwrap();
        let x2 = Var::from_tensor(&Tensor::rand(-1f64, 1.0, (4, 6), &Device::Cpu).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::rand(-1f64, 1.0, (6, 6), &Device::Cpu).unwrap()).unwrap();
        let g = loss_curl(x1.as_tensor(), x2.as_tensor(), w.as_tensor()).unwrap().backward().unwrap();
        assert!(g.get(x1.as_tensor()).is_some() && g.get(w.as_tensor()).is_some());
        if let Some(gx2) = g.get(x2.as_tensor()) {
            assert!(gx2.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn curl_mean_is_permutation_invariant() {
        let x1 = Tensor::rand(-1f64, 1.0, (6, 5), &Device::Cpu).unwrap();
        let x2 = Tensor::rand(-1f64, 1.0, (6, 5), &Device::Cpu).unwrap();
        let w = Tensor::rand(-1f64, 1.0, (5, 5), &Device::Cpu).unwrap();
        let perm: Vec<u32> = vec![3, 0, 5, 1, 4, 2];
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let (p1, p2) = (x1.index_select(&idx, 0).unwrap(), x2.index_select(&idx, 0).unwrap());
        let rows = curl_row_terms(&x1, &x2, &w).unwrap();
        let prows = curl_row_terms(&p1, &p2, &w).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((prows[j] - rows[i as usize]).abs() < 1e-12);
        }
        let a = scalar(&loss_curl(&x1, &x2, &w).unwrap()).unwrap();
        let b = scalar(&loss_curl(&p1, &p2, &w).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn store_with(v: f64) -> ParamStore {
        let s = ParamStore::new(DType::F64, 0);
        s.root().get(&[3], "x", Init::Const(v)).unwrap();
        s
    }

    fn value(s: &ParamStore) -> f64 {
        s.get_var("x").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn ema_examples() {
        let (ema, params) = (store_with(1.0), store_with(0.0));
        ema_update(&ema, &params, 0.999).unwrap();
        assert!((value(&ema) - 0.999).abs() < 1e-15);
        ema_update(&ema, &params, 0.0).unwrap();
        assert_eq!(value(&ema), 0.0);
    }

    #[test]
    fn ema_geometric_convergence() {
        let (ema, params) = (store_with(1.0), store_with(0.0));
        for _ in 0..1000 {
            ema_update(&ema, &params, 0.999).unwrap();
        }
        let bound = 0.999f64.powi(1000);
        assert!(value(&ema).abs() <= bound * (1.0 + 1e-9));
        assert_eq!(ema_decay_at(0.999, 200, 0), 0.0);
        assert_eq!(ema_decay_at(0.999, 200, 100), 0.4995);
        assert_eq!(ema_decay_at(0.999, 200, 5000), 0.999);
    }

    #[test]
    fn ddpm_loss_is_finite_and_non_negative() {
        let cfg = model::tests_support::tiny(Variant::Baseline);
        let m = PolicyModel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Tensor::rand(-1f64, 1.0, (3, model::cond_dim(&cfg)), &Device::Cpu).unwrap();
        let a0 = Tensor::rand(-1f64, 1.0, (3, 8, 2), &Device::Cpu).unwrap();
        let l = scalar(&loss_ddpm(&m.net, &h, &a0, m.schedule(), &mut rng).unwrap().loss).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }
}
