//! Closed-loop receding-horizon evaluation on the toy pushing task, and the
//! sampling-step sweep.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::augment::center_crop;
use crate::data::dataset::episode_seed;
use crate::data::env::{coverage, render, reset, toy_step, ToyEnvState, Vec2, SUCCESS_COVERAGE};
use crate::data::expert::scripted_expert;
use crate::data::DatasetStats;
use crate::denoiser::denoise_rows;
use crate::error::{invalid, Result};
use crate::objectives::batch::frames_to_tensor;
use crate::objectives::PolicyModel;
use crate::schedule::{subsample_steps, ReverseOptions, Sampler};

/// Final coverage that counts as a success in [`EvalReport::success_rate`].
/// Lower than the coverage that ends an episode early.
pub const SUCCESS_THRESHOLD: f64 = 0.8;

const ENV_SALT: u64 = 0x5eed_e5a1_0000_0001;
const NOISE_SALT: u64 = 0x5eed_e5a1_0000_0002;

/// Initial-state seed of episode `i` under evaluation seed `seed`. Depends on
/// nothing else, so every evaluated model faces the same start states.
pub fn env_seed(seed: u64, i: usize) -> u64 {
    episode_seed(seed ^ ENV_SALT, i as u64)
}

/// Seed of the sampling noise stream of episode `i`.
pub fn noise_seed(seed: u64, i: usize) -> u64 {
    episode_seed(seed ^ NOISE_SALT, i as u64)
}

/// What a planner sees of one running episode.
pub struct PlanRequest<'a> {
    pub state: &'a ToyEnvState,
    /// The last `T_s` states, oldest first; replicated at the episode start.
    pub history: &'a VecDeque<ToyEnvState>,
    pub rng: &'a mut ChaCha8Rng,
}

/// Produces an action plan (environment units) for every request.
pub trait Planner {
    fn history(&self) -> usize;
    fn plan(&mut self, requests: &mut [PlanRequest<'_>]) -> Result<Vec<Vec<Vec2>>>;
}

/// Scripted expert behind the planner interface: it rolls a copy of the
/// environment forward and returns the expert's next `horizon` commands.
pub struct ExpertPlanner {
    pub horizon: usize,
}

impl Planner for ExpertPlanner {
    fn history(&self) -> usize {
        1
    }

    fn plan(&mut self, requests: &mut [PlanRequest<'_>]) -> Result<Vec<Vec<Vec2>>> {
        Ok(requests
            .iter()
            .map(|r| {
                let mut s = *r.state;
                (0..self.horizon)
                    .map(|_| {
                        let a = scripted_expert(&s);
                        s = toy_step(&s, a);
                        a
                    })
                    .collect()
            })
            .collect())
    }
}

/// Diffusion policy planner using the EMA networks.
pub struct PolicyPlanner<'m> {
    model: &'m PolicyModel,
    stats: &'m DatasetStats,
    steps: Vec<usize>,
    opts: ReverseOptions,
}

impl<'m> PolicyPlanner<'m> {
    /// Without an explicit `sampler`, samples with the full DDPM chain when
    /// `steps` equals the number of diffusion steps and with DDIM over `steps`
    /// subsampled steps otherwise.
    pub fn new(model: &'m PolicyModel, stats: &'m DatasetStats, steps: usize, clip_x0: bool, sampler: Option<Sampler>) -> Result<Self> {
        let cfg = model.config();
        if cfg.task.cameras != 1 || cfg.task.lowdim_dim != 2 || cfg.task.action_dim != 2 {
            return invalid("the toy task has one camera, a 2-d agent position and 2-d actions");
        }
        if stats.actions.dim() != cfg.task.action_dim || stats.lowdim.dim() != cfg.task.lowdim_dim {
            return invalid("normalization statistics do not match the task");
        }
        let k = model.schedule().steps();
        let sampler = sampler.unwrap_or(if steps == k { Sampler::Ddpm } else { Sampler::Ddim });
        if sampler == Sampler::Ddpm && steps != k {
            return invalid(format!("DDPM sampling runs all {k} steps, not {steps}"));
        }
        Ok(Self { model, stats, steps: subsample_steps(k, steps)?, opts: ReverseOptions { sampler, clip_x0 } })
    }

    pub fn sampler(&self) -> Sampler {
        self.opts.sampler
    }
}

impl Planner for PolicyPlanner<'_> {
    fn history(&self) -> usize {
        self.model.config().model.history
    }

    fn plan(&mut self, requests: &mut [PlanRequest<'_>]) -> Result<Vec<Vec<Vec2>>> {
        let cfg = self.model.config();
        let (t, ts, b) = (&cfg.task, cfg.model.history, requests.len());
        let mut frames = Vec::with_capacity(b * ts * t.crop_hw.0 * t.crop_hw.1 * 3);
        let mut lowdim = Vec::with_capacity(b * ts * 2);
        for r in requests.iter() {
            for s in r.history {
                frames.extend(center_crop(&render(s, t.image_hw), t.image_hw, t.crop_hw)?);
                lowdim.extend(self.stats.lowdim.normalize(&s.agent));
            }
        }
        let dtype = self.model.dtype();
        let images = frames_to_tensor(frames, b, ts, t.crop_hw, dtype)?;
        let lowdim = Tensor::from_vec(lowdim, (b, ts, 2), &Device::Cpu)?.to_dtype(dtype)?;
        let net = &self.model.ema_net;
        let cond = net.condition(&[images], &lowdim)?;
        let mut rngs: Vec<&mut ChaCha8Rng> = requests.iter_mut().map(|r| &mut *r.rng).collect();
        let actions = denoise_rows(&net.unet, &cond, self.model.schedule(), &self.steps, self.opts, &mut rngs)?;
        let actions = actions.to_dtype(candle_core::DType::F64)?.to_vec3::<f64>()?;
        Ok(actions
            .into_iter()
            .map(|seq| seq.into_iter().map(|a| {
                let d = self.stats.actions.denormalize(&a);
                [d[0], d[1]]
            }).collect())
            .collect())
    }
}

struct Running {
    state: ToyEnvState,
    history: VecDeque<ToyEnvState>,
    rng: ChaCha8Rng,
    done: bool,
}

fn finished(s: &ToyEnvState, max_steps: usize) -> bool {
    s.step >= max_steps || coverage(s) >= SUCCESS_COVERAGE
}

/// Runs episodes in lockstep, one planner call per round for all unfinished
/// ones. Episode `i` starts from `env_seeds[i]` and samples from its own
/// stream seeded with `noise_seeds[i]`, so a score does not depend on which
/// other episodes share its batch. Returns the final coverage of each.
pub fn run_episodes(planner: &mut dyn Planner, env_seeds: &[u64], noise_seeds: &[u64], max_steps: usize) -> Result<Vec<f64>> {
    if env_seeds.len() != noise_seeds.len() {
        return invalid("one noise seed per episode is required");
    }
    let ts = planner.history().max(1);
    let mut eps: Vec<Running> = env_seeds
        .iter()
        .zip(noise_seeds)
        .map(|(&e, &n)| {
            let state = reset(&mut ChaCha8Rng::seed_from_u64(e));
            Running { state, history: std::iter::repeat_n(state, ts).collect(), rng: ChaCha8Rng::seed_from_u64(n), done: finished(&state, max_steps) }
        })
        .collect();
    loop {
        let mut requests: Vec<PlanRequest<'_>> = eps
            .iter_mut()
            .filter(|e| !e.done)
            .map(|e| PlanRequest { state: &e.state, history: &e.history, rng: &mut e.rng })
            .collect();
        if requests.is_empty() {
            break;
        }
        let plans = planner.plan(&mut requests)?;
        drop(requests);
        if plans.len() != eps.iter().filter(|e| !e.done).count() {
            return invalid("planner returned the wrong number of plans");
        }
        for (e, plan) in eps.iter_mut().filter(|e| !e.done).zip(plans) {
            if plan.is_empty() {
                return invalid("planner returned an empty plan");
            }
            for a in plan {
                e.state = toy_step(&e.state, a);
                e.history.pop_front();
                e.history.push_back(e.state);
                if finished(&e.state, max_steps) {
                    break;
                }
            }
            e.done = finished(&e.state, max_steps);
        }
    }
    Ok(eps.iter().map(|e| coverage(&e.state)).collect())
}

/// Runs one episode and returns its final coverage.
pub fn run_episode(planner: &mut dyn Planner, env_seed: u64, noise_seed: u64, max_steps: usize) -> Result<f64> {
    Ok(run_episodes(planner, &[env_seed], &[noise_seed], max_steps)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    /// Episodes per seed.
    pub episodes: usize,
    pub ddim_steps: usize,
    pub sampler: Sampler,
    /// Per seed, the initial-state seed of every episode.
    pub env_seeds: Vec<Vec<u64>>,
    /// Per seed, the final coverage of every episode.
    pub scores: Vec<Vec<f64>>,
    pub per_seed_means: Vec<f64>,
    /// Mean over all episodes.
    pub mean: f64,
    /// Population standard deviation of the per-seed means; absent for one seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    /// Fraction of episodes ending at or above [`SUCCESS_THRESHOLD`].
    pub success_rate: f64,
}

impl EvalReport {
    pub fn from_scores(seeds: Vec<u64>, ddim_steps: usize, sampler: Sampler, env_seeds: Vec<Vec<u64>>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if seeds.is_empty() || scores.len() != seeds.len() || env_seeds.len() != seeds.len() {
            return invalid("need one score list per seed");
        }
        let episodes = scores[0].len();
        if episodes == 0 || scores.iter().any(|s| s.len() != episodes) {
            return invalid("every seed needs the same nonzero number of episodes");
        }
        let per_seed_means: Vec<f64> = scores.iter().map(|s| s.iter().sum::<f64>() / episodes as f64).collect();
        let all: Vec<f64> = scores.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let std = (seeds.len() > 1).then(|| {
            let m = per_seed_means.iter().sum::<f64>() / per_seed_means.len() as f64;
            (per_seed_means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per_seed_means.len() as f64).sqrt()
        });
        let success_rate = all.iter().filter(|v| **v >= SUCCESS_THRESHOLD).count() as f64 / all.len() as f64;
        Ok(Self { seeds, episodes, ddim_steps, sampler, env_seeds, scores, per_seed_means, mean, std, success_rate })
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub ddim_steps: usize,
    pub clip_x0: bool,
    pub max_steps: usize,
    /// Overrides the automatic sampler choice of [`PolicyPlanner::new`].
    pub sampler: Option<Sampler>,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let e = &cfg.eval;
        Self { episodes: e.episodes, seeds: e.seeds.clone(), ddim_steps: e.ddim_steps, clip_x0: e.clip_x0, max_steps: cfg.task.max_steps, sampler: None }
    }
}

/// Evaluates the EMA policy: `episodes` episodes for each seed.
pub fn evaluate(model: &PolicyModel, stats: &DatasetStats, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.episodes == 0 || opts.seeds.is_empty() {
        return invalid("evaluation needs at least one episode and one seed");
    }
    let mut planner = PolicyPlanner::new(model, stats, opts.ddim_steps, opts.clip_x0, opts.sampler)?;
    let mut env_seeds = Vec::new();
    let mut scores = Vec::new();
    for &seed in &opts.seeds {
        let envs: Vec<u64> = (0..opts.episodes).map(|i| env_seed(seed, i)).collect();
        let noise: Vec<u64> = (0..opts.episodes).map(|i| noise_seed(seed, i)).collect();
        let s = run_episodes(&mut planner, &envs, &noise, opts.max_steps)?;
        log::info!("seed {seed}: mean coverage {:.4}", s.iter().sum::<f64>() / s.len() as f64);
        env_seeds.push(envs);
        scores.push(s);
    }
    EvalReport::from_scores(opts.seeds.clone(), opts.ddim_steps, planner.sampler(), env_seeds, scores)
}

/// Sampling-step counts 10, 20, ..., 100.
pub fn default_sweep_steps() -> Vec<usize> {
    (1..=10).map(|i| i * 10).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

/// One [`evaluate`] per step count.
pub fn ddim_sweep(model: &PolicyModel, stats: &DatasetStats, steps: &[usize], opts: &EvalOptions) -> Result<Vec<(SweepRow, EvalReport)>> {
    steps
        .iter()
        .map(|&n| {
            let report = evaluate(model, stats, &EvalOptions { ddim_steps: n, ..opts.clone() })?;
            Ok((SweepRow { steps: n, mean: report.mean, std: report.std }, report))
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Line plot of mean score against step count.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let max_steps = rows.iter().map(|r| r.steps).max().unwrap_or(1).max(1) as f64;
    let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / max_steps;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, pad - 6.0, y(v) + 4.0);
    }
    for r in rows {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(r.steps), h - pad + 16.0, r.steps);
    }
    let points: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", x(r.steps), y(r.mean))).collect();
    let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, points.join(" "));
    for r in rows {
        let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, x(r.steps), y(r.mean));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">sampling steps</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">mean coverage</text>"#, h / 2.0, h / 2.0);
    svg.push_str("</svg>\n");
    svg
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_sweep_csv(&dir.join("sweep.csv"), rows)?;
    fs::write(dir.join("sweep.svg"), sweep_svg(rows))?;
    Ok(())
}
