//! Demonstrations: episode storage, normalization, windowing, augmentation,
//! and the toy pushing environment with its scripted expert.

pub mod augment;
pub mod dataset;
pub mod env;
pub mod expert;
pub mod window;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One demonstration. Images are stored per camera as `len` HWC frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub len: usize,
    pub image_hw: (usize, usize),
    pub images: Vec<Vec<f32>>,
    pub lowdim_dim: usize,
    pub lowdim: Vec<f32>,
    pub action_dim: usize,
    pub actions: Vec<f32>,
}

impl Episode {
    pub fn new(
        image_hw: (usize, usize),
        images: Vec<Vec<f32>>,
        lowdim_dim: usize,
        lowdim: Vec<f32>,
        action_dim: usize,
        actions: Vec<f32>,
    ) -> Result<Self> {
        if action_dim == 0 || actions.is_empty() || actions.len() % action_dim != 0 {
            return invalid("episode needs at least one action of positive dimension");
        }
        let len = actions.len() / action_dim;
        let frame = image_hw.0 * image_hw.1 * 3;
        if images.iter().any(|cam| cam.len() != len * frame) || lowdim.len() != len * lowdim_dim {
            return invalid(format!("episode arrays disagree on length {len}"));
        }
        let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
        if !finite(&actions) || !finite(&lowdim) || !images.iter().all(|c| finite(c)) {
            return invalid("episode contains non-finite values");
        }
        Ok(Self { len, image_hw, images, lowdim_dim, lowdim, action_dim, actions })
    }

    pub fn cameras(&self) -> usize {
        self.images.len()
    }

    pub fn frame_len(&self) -> usize {
        self.image_hw.0 * self.image_hw.1 * 3
    }

    /// HWC frame `t` of camera `cam`.
    pub fn frame(&self, cam: usize, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.images[cam][t * n..(t + 1) * n]
    }

    pub fn lowdim_at(&self, t: usize) -> &[f32] {
        &self.lowdim[t * self.lowdim_dim..(t + 1) * self.lowdim_dim]
    }

    pub fn action_at(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }
}

/// Per-dimension range used to map values to [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.iter().zip(&max).any(|(lo, hi)| !(hi > lo)) {
            return invalid("normalization range needs max > min in every dimension");
        }
        Ok(Self { min, max })
    }

    /// Range of `dim`-wide rows in `data`. A dimension that never varies
    /// gets a unit half-width around its value so the map stays invertible.
    pub fn fit(data: impl IntoIterator<Item = f64>, dim: usize) -> Result<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        let mut n = 0;
        for (i, v) in data.into_iter().enumerate() {
            let d = i % dim;
            min[d] = min[d].min(v);
            max[d] = max[d].max(v);
            n += 1;
        }
        if n == 0 || n % dim != 0 {
            return invalid("cannot fit normalization to an empty or ragged array");
        }
        for d in 0..dim {
            if max[d] <= min[d] {
                min[d] -= 1.0;
                max[d] += 1.0;
            }
        }
        Self::new(min, max)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// `2 (a - min) / (max - min) - 1`, applied to rows of width `dim`.
    /// Evaluated as `(2a - (min + max)) / (max - min)`, which is exact for the
    /// [-1, 1] identity range. Values inside the range stay inside [-1, 1]
    /// despite rounding; values outside it map linearly past the ends.
    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = i % self.dim();
                let (lo, hi) = (self.min[d], self.max[d]);
                let r = (2.0 * v - (lo + hi)) / (hi - lo);
                if (lo..=hi).contains(v) {
                    r.clamp(-1.0, 1.0)
                } else {
                    r
                }
            })
            .collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = i % self.dim();
                (v * (self.max[d] - self.min[d]) + self.min[d] + self.max[d]) / 2.0
            })
            .collect()
    }
}

/// Normalization for both actions and low-dim observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub actions: NormStats,
    pub lowdim: NormStats,
}

impl DatasetStats {
    pub fn fit(episodes: &[Episode]) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| crate::Error::InvalidArgument("no episodes".into()))?;
        let actions = NormStats::fit(episodes.iter().flat_map(|e| e.actions.iter().map(|v| *v as f64)), first.action_dim)?;
        let lowdim = if first.lowdim_dim == 0 {
            NormStats { min: vec![], max: vec![] }
        } else {
            NormStats::fit(episodes.iter().flat_map(|e| e.lowdim.iter().map(|v| *v as f64)), first.lowdim_dim)?
        };
        Ok(Self { actions, lowdim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_examples() {
        let id = NormStats::new(vec![-1.0], vec![1.0]).unwrap();
        assert_eq!(id.normalize(&[0.3, -0.7]), vec![0.3, -0.7]);
        let s = NormStats::new(vec![2.0, -5.0], vec![4.0, 5.0]).unwrap();
        assert_eq!(s.normalize(&[2.0, -5.0, 4.0, 5.0]), vec![-1.0, -1.0, 1.0, 1.0]);
        assert!(NormStats::new(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let s = NormStats::new(vec![0.1, -3.0], vec![0.9, 7.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..10_000).map(|i| if i % 2 == 0 { rng.random_range(0.1..0.9) } else { rng.random_range(-3.0..7.5) }).collect();
        let back = s.denormalize(&s.normalize(&a));
        assert!(a.iter().zip(&back).all(|(x, y)| (x - y).abs() <= 1e-6));
    }

    #[test]
    fn fit_handles_constant_dimension() {
        let s = NormStats::fit([1.0, 5.0, 2.0, 5.0], 2).unwrap();
        assert_eq!(s.min, vec![1.0, 4.0]);
        assert_eq!(s.max, vec![2.0, 6.0]);
    }

    #[test]
    fn episode_length_checks() {
        assert!(Episode::new((2, 2), vec![vec![0.0; 24]], 1, vec![0.0; 2], 2, vec![0.0; 4]).is_ok());
        assert!(Episode::new((2, 2), vec![vec![0.0; 12]], 1, vec![0.0; 2], 2, vec![0.0; 4]).is_err());
        assert!(Episode::new((2, 2), vec![vec![0.0; 24]], 1, vec![f32::NAN; 2], 2, vec![0.0; 4]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn fitted_stats_map_data_into_the_unit_box(seed in 0u64..10_000, dim in 1usize..5, rows in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..dim * rows).map(|_| rng.random_range(-50.0..50.0)).collect();
            let s = NormStats::fit(data.iter().copied(), dim).unwrap();
            let n = s.normalize(&data);
            proptest::prop_assert!(n.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = s.denormalize(&n);
            proptest::prop_assert!(data.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 1e-9));
        }
    }
}
