//! Training batches: windows, crops, normalization and reconstruction targets.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::config::{RunConfig, Variant};
use crate::data::augment::{center_crop, random_crop};
use crate::data::dataset::DemoDataset;
use crate::data::window::window;
use crate::data::NormStats;
use crate::error::{invalid, Result};
use crate::reconstruction::build_target;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Random,
    Center,
}

/// Reconstruction targets, shaped like the state decoder's outputs.
#[derive(Debug, Clone)]
pub struct ReconTargets {
    /// Per camera, (B, 3 T_s, R, R) in [0, 1], frame-major channels.
    pub images: Vec<Tensor>,
    /// (B, T_s L), normalized.
    pub lowdim: Tensor,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// Per camera, (B, T_s, 3, h, w) cropped frames.
    pub images: Vec<Tensor>,
    /// (B, T_s, L), normalized.
    pub lowdim: Tensor,
    /// (B, T_a, A), normalized.
    pub actions: Tensor,
    pub targets: Option<ReconTargets>,
    /// Independently cropped copy of `images` for the contrastive variant.
    pub second_view: Option<Vec<Tensor>>,
}

/// Stacks `n` HWC frame groups of `frames` frames each into (n, frames, 3, H, W).
pub fn frames_to_tensor(data: Vec<f32>, n: usize, frames: usize, hw: (usize, usize), dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(data, (n, frames, hw.0, hw.1, 3), &Device::Cpu)?;
    Ok(t.permute((0, 1, 4, 2, 3))?.contiguous()?.to_dtype(dtype)?)
}

fn normalized(stats: &NormStats, raw: &[f32]) -> Vec<f64> {
    stats.normalize(&raw.iter().map(|v| *v as f64).collect::<Vec<_>>())
}

/// Builds a batch from `(episode, t)` samples. Every camera of a sample gets
/// one crop offset shared by its history frames. Random draws happen in
/// sample order: first the crops of every sample, then (for the contrastive
/// variant) the second-view crops.
pub fn assemble_batch<R: Rng>(
    ds: &DemoDataset,
    samples: &[(usize, usize)],
    cfg: &RunConfig,
    dtype: DType,
    crop: CropMode,
    rng: &mut R,
) -> Result<Batch> {
    let (t, m) = (&cfg.task, &cfg.model);
    if samples.is_empty() {
        return invalid("empty batch");
    }
    if ds.image_hw() != t.image_hw || ds.cameras() != t.cameras || ds.action_dim() != t.action_dim || ds.lowdim_dim() != t.lowdim_dim {
        return invalid("dataset shapes do not match the task configuration");
    }
    let b = samples.len();
    let windows: Vec<_> = samples
        .iter()
        .map(|&(e, step)| {
            let ep = ds.episodes.get(e).ok_or_else(|| crate::Error::InvalidArgument(format!("no episode {e}")))?;
            if step >= ep.len {
                return invalid(format!("step {step} outside episode {e}"));
            }
            Ok(window(ep, step, m.history, m.horizon))
        })
        .collect::<Result<_>>()?;

    let crop_views = |rng: &mut R| -> Result<Vec<Tensor>> {
        let mut per_cam = vec![Vec::new(); t.cameras];
        for w in &windows {
            for (c, frames) in w.images.iter().enumerate() {
                let cropped = match crop {
                    CropMode::Random => random_crop(frames, t.image_hw, t.crop_hw, rng)?,
                    CropMode::Center => center_crop(frames, t.image_hw, t.crop_hw)?,
                };
                per_cam[c].extend(cropped);
            }
        }
        per_cam.into_iter().map(|d| frames_to_tensor(d, b, m.history, t.crop_hw, dtype)).collect()
    };
    let images = crop_views(rng)?;
    let second_view = if m.variant == Variant::Curl { Some(crop_views(rng)?) } else { None };

    let lowdim: Vec<f64> = windows.iter().flat_map(|w| normalized(&ds.stats.lowdim, &w.lowdim)).collect();
    let lowdim = Tensor::from_vec(lowdim, (b, m.history, t.lowdim_dim), &Device::Cpu)?.to_dtype(dtype)?;
    let actions: Vec<f64> = windows.iter().flat_map(|w| normalized(&ds.stats.actions, &w.actions)).collect();
    let actions = Tensor::from_vec(actions, (b, m.horizon, t.action_dim), &Device::Cpu)?.to_dtype(dtype)?;

    let targets = if m.variant.has_state_decoder() {
        let built: Vec<_> =
            samples.iter().map(|&(e, step)| build_target(&ds.episodes[e], step, m.history, m.offset, t.rec_hw)).collect();
        let images = (0..t.cameras)
            .map(|c| {
                let data: Vec<f32> = built.iter().flat_map(|tg| tg.images[c].iter().copied()).collect();
                Ok(frames_to_tensor(data, b, m.history, t.rec_hw, dtype)?.reshape((b, 3 * m.history, t.rec_hw.0, t.rec_hw.1))?)
            })
            .collect::<Result<_>>()?;
        let low: Vec<f64> = built.iter().flat_map(|tg| normalized(&ds.stats.lowdim, &tg.lowdim)).collect();
        let lowdim = Tensor::from_vec(low, (b, m.history * t.lowdim_dim), &Device::Cpu)?.to_dtype(dtype)?;
        Some(ReconTargets { images, lowdim })
    } else {
        None
    };
    Ok(Batch { images, lowdim, actions, targets, second_view })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Episode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(cfg: &RunConfig) -> DemoDataset {
        let (h, w) = cfg.task.image_hw;
        let eps = (0..2)
            .map(|e| {
                let len = 6 + e;
                let images = vec![(0..len * h * w * 3).map(|i| ((i * 7 + e) % 97) as f32 / 96.0).collect()];
                let lowdim = (0..len * 2).map(|i| i as f32 * 0.1).collect();
                let actions = (0..len * 2).map(|i| (i as f32).sin()).collect();
                Episode::new((h, w), images, 2, lowdim, 2, actions).unwrap()
            })
            .collect();
        DemoDataset::new(eps, 0).unwrap()
    }

    #[test]
    fn shapes_and_ranges() {
        let cfg = RunConfig::tiny();
        let ds = dataset(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = assemble_batch(&ds, &[(0, 0), (1, 6), (0, 3)], &cfg, DType::F64, CropMode::Random, &mut rng).unwrap();
        assert_eq!(b.images[0].dims(), &[3, 2, 3, 16, 16]);
        assert_eq!(b.lowdim.dims(), &[3, 2, 2]);
        assert_eq!(b.actions.dims(), &[3, 8, 2]);
        let tg = b.targets.unwrap();
        assert_eq!(tg.images[0].dims(), &[3, 6, 8, 8]);
        assert_eq!(tg.lowdim.dims(), &[3, 4]);
        let a = b.actions.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        let img = b.images[0].flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(b.second_view.is_none());
    }

    #[test]
    fn center_crop_matches_direct_slicing() {
        let cfg = RunConfig::tiny();
        let ds = dataset(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = assemble_batch(&ds, &[(1, 4)], &cfg, DType::F64, CropMode::Center, &mut rng).unwrap();
        let img = b.images[0].to_dtype(DType::F64).unwrap();
        // Frame index 1 of the history is step 4; offset (2, 2); pixel (y, x, ch).
        let ep = &ds.episodes[1];
        for (y, x, ch) in [(0, 0, 0), (5, 9, 2), (15, 15, 1)] {
            let got = img.get(0).unwrap().get(1).unwrap().get(ch).unwrap().get(y).unwrap().get(x).unwrap().to_scalar::<f64>().unwrap();
            let want = ep.frame(0, 4)[((y + 2) * 20 + x + 2) * 3 + ch] as f64;
            assert_eq!(got, want);
        }
    }

    #[test]
    fn baseline_batches_skip_targets_and_curl_gets_second_view() {
        let base = RunConfig::tiny().with_overrides(&["variant=baseline"]).unwrap();
        let ds = dataset(&base);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(assemble_batch(&ds, &[(0, 1)], &base, DType::F64, CropMode::Random, &mut rng).unwrap().targets.is_none());
        let curl = RunConfig::tiny().with_overrides(&["variant=curl"]).unwrap();
        assert!(assemble_batch(&ds, &[(0, 1), (1, 2)], &curl, DType::F64, CropMode::Random, &mut rng).unwrap().second_view.is_some());
    }
}
