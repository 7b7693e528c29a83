//! Diffusion-process constants and the forward / reverse sampling arithmetic.
//!
//! All arithmetic here is on flat `f64` slices: one reverse step touches a
//! (batch x horizon x action-dim) array, which is tiny next to a network
//! forward pass, and keeping it on the host makes every step exactly
//! reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha_bar(t) = cos^2((t + 0.008) / 1.008 * pi / 2)`, betas capped at 0.999.
    SquaredCosine,
    /// Betas evenly spaced from `beta_start` to `beta_end`.
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::SquaredCosine
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<Schedule> {
    if steps == 0 {
        return invalid("diffusion step count must be at least 1");
    }
    let betas = match kind {
        ScheduleKind::SquaredCosine => {
            let alpha_bar = |t: f64| ((t + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps)
                .map(|i| {
                    let t1 = i as f64 / steps as f64;
                    let t2 = (i + 1) as f64 / steps as f64;
                    (1.0 - alpha_bar(t2) / alpha_bar(t1)).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Linear { beta_start, beta_end } => {
            if steps == 1 {
                vec![beta_start]
            } else {
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
    };
    Schedule::from_betas(kind, betas)
}

impl Schedule {
    /// Rebuilds every derived constant from the betas (checkpoint loading).
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return invalid("schedule needs at least one beta");
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return invalid(format!("beta {b} outside [0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        // sigma_k^2 = (1 - abar_{k-1}) / (1 - abar_k) * beta_k, the DDPM posterior variance.
        let sigmas = (0..betas.len())
            .map(|k| {
                if k == 0 {
                    return 0.0;
                }
                let denom = 1.0 - alpha_bars[k];
                if denom <= 0.0 {
                    0.0
                } else {
                    ((1.0 - alpha_bars[k - 1]) / denom * betas[k]).sqrt()
                }
            })
            .collect();
        Ok(Self { kind, betas, alphas, alpha_bars, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return invalid(format!("step {k} outside [0, {})", self.steps()));
        }
        Ok(())
    }

    /// Closed-form forward corruption `sqrt(abar_k) x0 + sqrt(1 - abar_k) eps`.
    pub fn q_sample(&self, x0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(k)?;
        same_len(x0, eps)?;
        let a = self.alpha_bars[k].sqrt();
        let s = (1.0 - self.alpha_bars[k]).sqrt();
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// One reverse step of the DDPM chain from step `k` to `k - 1`.
    pub fn ddpm_step(&self, xk: &[f64], eps_pred: &[f64], k: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_step(k)?;
        same_len(xk, eps_pred)?;
        same_len(xk, z)?;
        if k == 0 && z.iter().any(|v| *v != 0.0) {
            return invalid("the final reverse step (k = 0) takes no noise");
        }
        let inv_sqrt_alpha = 1.0 / self.alphas[k].sqrt();
        let one_minus_alpha = 1.0 - self.alphas[k];
        // A zero-beta step is the identity; guard the 0/0 when abar_k is also 1.
        let eps_coef = if one_minus_alpha == 0.0 { 0.0 } else { one_minus_alpha / (1.0 - self.alpha_bars[k]).sqrt() };
        let sigma = self.sigmas[k];
        Ok(xk
            .iter()
            .zip(eps_pred)
            .zip(z)
            .map(|((x, e), z)| inv_sqrt_alpha * (x - eps_coef * e) + sigma * z)
            .collect())
    }

    /// Deterministic (eta = 0) DDIM update from `k_from` to `k_to`.
    /// `k_to = None` is the clean endpoint where `abar = 1`.
    pub fn ddim_step(&self, xk: &[f64], eps_pred: &[f64], k_from: usize, k_to: Option<usize>) -> Result<Vec<f64>> {
        self.check_step(k_from)?;
        same_len(xk, eps_pred)?;
        let ab_to = match k_to {
            Some(k) if k >= k_from => return invalid(format!("DDIM target step {k} must precede {k_from}")),
            Some(k) => self.alpha_bars[k],
            None => 1.0,
        };
        let x0 = self.predict_x0(xk, eps_pred, k_from)?;
        let a = ab_to.sqrt();
        let s = (1.0 - ab_to).sqrt();
        Ok(x0.iter().zip(eps_pred).map(|(x, e)| a * x + s * e).collect())
    }

    /// `x0_hat = (x_k - sqrt(1 - abar_k) eps) / sqrt(abar_k)`
    pub fn predict_x0(&self, xk: &[f64], eps: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_step(k)?;
        same_len(xk, eps)?;
        let a = self.alpha_bars[k].sqrt();
        let s = (1.0 - self.alpha_bars[k]).sqrt();
        Ok(xk.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect())
    }

    /// The noise consistent with `x_k` and a (possibly clipped) clean estimate.
    fn eps_from_x0(&self, xk: &[f64], x0: &[f64], k: usize) -> Vec<f64> {
        let a = self.alpha_bars[k].sqrt();
        let s = (1.0 - self.alpha_bars[k]).sqrt();
        xk.iter().zip(x0).map(|(x, x0)| (x - a * x0) / s).collect()
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return invalid(format!("shape mismatch: {} vs {} elements", a.len(), b.len()));
    }
    Ok(())
}

/// `n` evenly spaced, strictly decreasing step indices from `total - 1` to 0.
pub fn subsample_steps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || total == 0 {
        return invalid("step counts must be positive");
    }
    if n > total {
        return invalid(format!("cannot take {n} steps out of {total}"));
    }
    if n == 1 {
        return Ok(vec![total - 1]);
    }
    let last = (total - 1) as f64;
    Ok((0..n)
        .map(|i| (last * (n - 1 - i) as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

/// Options for [`reverse_process`].
#[derive(Debug, Clone, Copy)]
pub struct ReverseOptions {
    pub sampler: Sampler,
    /// Clip each clean-sample estimate to [-1, 1] and re-derive the noise
    /// from it before stepping.
    pub clip_x0: bool,
}

/// Runs the reverse chain over `steps` starting from `x`.
///
/// `eps_fn(x, k)` predicts noise; `noise(k)` supplies the DDPM `z` for every
/// `k > 0` (never called for DDIM). When `trace` is given, the clean-sample
/// estimate of every step is pushed to it.
pub fn reverse_process<F, N>(
    sched: &Schedule,
    steps: &[usize],
    opts: ReverseOptions,
    mut x: Vec<f64>,
    mut eps_fn: F,
    mut noise: N,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
    N: FnMut(usize) -> Vec<f64>,
{
    if steps.is_empty() {
        return invalid("empty step list");
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return invalid("steps must be strictly decreasing");
    }
    if opts.sampler == Sampler::Ddpm {
        let full: Vec<usize> = (0..sched.steps()).rev().collect();
        if steps != full.as_slice() && !(steps.len() == 1 && steps[0] == 0) {
            return invalid("DDPM sampling walks every step; use DDIM for a subsampled schedule");
        }
    }
    for (i, &k) in steps.iter().enumerate() {
        let mut eps = eps_fn(&x, k)?;
        if eps.len() != x.len() {
            return invalid("noise prediction has the wrong size");
        }
        let x0 = sched.predict_x0(&x, &eps, k)?;
        let x0 = if opts.clip_x0 && sched.alpha_bars()[k] < 1.0 {
            let clipped: Vec<f64> = x0.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            if clipped != x0 {
                eps = sched.eps_from_x0(&x, &clipped, k);
            }
            clipped
        } else {
            x0
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(x0);
        }
        x = match opts.sampler {
            Sampler::Ddpm => {
                let z = if k > 0 { noise(k) } else { vec![0.0; x.len()] };
                sched.ddpm_step(&x, &eps, k, &z)?
            }
            Sampler::Ddim => sched.ddim_step(&x, &eps, k, steps.get(i + 1).copied())?,
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn linear(k: usize) -> Schedule {
        make_schedule(k, ScheduleKind::Linear { beta_start: 1e-4, beta_end: 0.02 }).unwrap()
    }

    #[test]
    fn hundred_step_cosine_schedule() {
        let s = make_schedule(100, ScheduleKind::SquaredCosine).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.sigmas()[0], 0.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alphas().iter().all(|a| *a > 0.0 && *a < 1.0));
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(make_schedule(0, ScheduleKind::SquaredCosine).is_err());
    }

    #[test]
    fn degenerate_no_noise_schedule() {
        let s = make_schedule(1, ScheduleKind::Linear { beta_start: 0.0, beta_end: 0.0 }).unwrap();
        assert_eq!(s.alphas(), &[1.0]);
        assert_eq!(s.alpha_bars(), &[1.0]);
        assert_eq!(s.sigmas(), &[0.0]);
    }

    #[test]
    fn cumulative_product_oracle() {
        let s = linear(10);
        let betas: Vec<f64> = (0..10).map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / 9.0).collect();
        let mut prod = 1.0;
        for (k, b) in betas.iter().enumerate() {
            prod *= 1.0 - b;
            let rel = (s.alpha_bars()[k] - prod).abs() / prod;
            assert!(rel <= 1e-12, "k={k}: {rel}");
        }
        assert!((s.alpha_bars()[9] - prod).abs() <= 1e-12 * prod);
    }

    #[test]
    fn q_sample_trivial_cases() {
        let s = linear(5);
        assert_eq!(s.q_sample(&[0.0; 4], 3, &[0.0; 4]).unwrap(), vec![0.0; 4]);
        let id = make_schedule(3, ScheduleKind::Linear { beta_start: 0.0, beta_end: 0.0 }).unwrap();
        let x0 = [0.3, -0.7, 1.0];
        assert_eq!(id.q_sample(&x0, 2, &[5.0, -2.0, 1.0]).unwrap(), x0.to_vec());
        assert!(s.q_sample(&[0.0; 3], 0, &[0.0; 2]).is_err());
        assert!(s.q_sample(&[0.0; 2], 5, &[0.0; 2]).is_err());
    }

    #[test]
    fn zero_beta_ddpm_step_is_identity() {
        let s = make_schedule(2, ScheduleKind::Linear { beta_start: 0.0, beta_end: 0.0 }).unwrap();
        let x = [0.25, -1.5];
        assert_eq!(s.ddpm_step(&x, &[9.0, 9.0], 1, &[0.0, 0.0]).unwrap(), x.to_vec());
        assert_eq!(s.ddpm_step(&x, &[9.0, 9.0], 0, &[0.0, 0.0]).unwrap(), x.to_vec());
    }

    #[test]
    fn ddpm_step_inverts_first_corruption() {
        let s = make_schedule(100, ScheduleKind::SquaredCosine).unwrap();
        let x0 = [0.4, -0.9, 0.1, 0.0];
        let eps = [1.2, -0.3, 0.5, -2.0];
        let xk = s.q_sample(&x0, 0, &eps).unwrap();
        let back = s.ddpm_step(&xk, &eps, 0, &[0.0; 4]).unwrap();
        for (a, b) in back.iter().zip(x0) {
            assert!((a - b).abs() < 1e-6);
        }
        let again = s.ddpm_step(&xk, &eps, 0, &[0.0; 4]).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn ddpm_step_errors() {
        let s = linear(4);
        assert!(s.ddpm_step(&[0.0], &[0.0], 4, &[0.0]).is_err());
        assert!(s.ddpm_step(&[0.0], &[0.0], 0, &[1.0]).is_err());
    }

    #[test]
    fn ddim_direct_substitution() {
        let s = linear(10);
        let x = [0.5, -2.0];
        let out = s.ddim_step(&x, &[0.0, 0.0], 6, None).unwrap();
        let a = s.alpha_bars()[6].sqrt();
        assert!((out[0] - 0.5 / a).abs() < 1e-15);
        assert!((out[1] + 2.0 / a).abs() < 1e-15);
        assert!(s.ddim_step(&x, &[0.0, 0.0], 3, Some(3)).is_err());
        assert!(s.ddim_step(&x, &[0.0, 0.0], 3, Some(5)).is_err());
    }

    #[test]
    fn ten_step_ddim_is_finite() {
        let s = make_schedule(100, ScheduleKind::SquaredCosine).unwrap();
        let steps: Vec<usize> = (0..10).rev().map(|i| 9 + 10 * i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let opts = ReverseOptions { sampler: Sampler::Ddim, clip_x0: false };
        let out = reverse_process(&s, &steps, opts, x, |x, _| Ok(x.iter().map(|v| 0.5 * v).collect()), |_| unreachable!(), None).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample_steps(100, 100).unwrap(), (0..100).rev().collect::<Vec<_>>());
        let ten = subsample_steps(100, 10).unwrap();
        assert_eq!(ten.len(), 10);
        assert_eq!(*ten.last().unwrap(), 0);
        assert_eq!(ten[0], 99);
        assert_eq!(subsample_steps(4, 2).unwrap(), vec![3, 0]);
        assert!(subsample_steps(4, 5).is_err());
    }

    /// Brute force: among all strictly decreasing n-subsets of [0, K) that
    /// start at K-1 and end at 0, the rule's output is the one whose entries
    /// are each within half a step of the ideal real-valued grid.
    #[test]
    fn subsample_matches_enumeration_oracle() {
        fn subsets(k: usize, n: usize) -> Vec<Vec<usize>> {
            let mut out = Vec::new();
            let inner: Vec<usize> = (1..k - 1).collect();
            let m = n - 2;
            for mask in 0u32..(1 << inner.len()) {
                if mask.count_ones() as usize != m {
                    continue;
                }
                let mut v = vec![k - 1];
                for (i, s) in inner.iter().enumerate().rev() {
                    if mask & (1 << i) != 0 {
                        v.push(*s);
                    }
                }
                v.push(0);
                out.push(v);
            }
            out
        }
        for k in 2..=12 {
            for n in 2..=k {
                let ideal: Vec<f64> = (0..n).map(|i| (k - 1) as f64 * (n - 1 - i) as f64 / (n - 1) as f64).collect();
                let best: Vec<Vec<usize>> = subsets(k, n)
                    .into_iter()
                    .filter(|s| s.iter().zip(&ideal).all(|(a, b)| (*a as f64 - b).abs() <= 0.5))
                    .collect();
                let got = subsample_steps(k, n).unwrap();
                assert!(best.contains(&got), "K={k} n={n}: {got:?} not in {best:?}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn schedules_are_valid_for_any_length(k in 1usize..400, linear_kind in proptest::bool::ANY) {
            let kind = if linear_kind { ScheduleKind::Linear { beta_start: 1e-4, beta_end: 0.02 } } else { ScheduleKind::SquaredCosine };
            let s = make_schedule(k, kind).unwrap();
            proptest::prop_assert!(s.betas().iter().all(|b| *b > 0.0 && *b <= MAX_BETA));
            proptest::prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            proptest::prop_assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
            proptest::prop_assert_eq!(s.sigmas()[0], 0.0);
        }

        #[test]
        fn ddim_to_the_clean_end_recovers_x0(seed in 0u64..10_000, k in 0usize..100) {
            let s = make_schedule(100, ScheduleKind::SquaredCosine).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let eps: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xk = s.q_sample(&x0, k, &eps).unwrap();
            let back = s.ddim_step(&xk, &eps, k, None).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                proptest::prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{} vs {}", a, b);
            }
        }
    }
}
