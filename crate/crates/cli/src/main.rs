use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossway_core::checkpoint::{latest_checkpoint, Checkpoint};
use crossway_core::config::RunConfig;
use crossway_core::data::dataset::{generate_demos, load_dataset, save_dataset};
use crossway_core::objectives::preview_reconstructions;
use crossway_core::objectives::train::{all_samples, train};
use crossway_core::reconstruction::save_png;
use crossway_core::rollout::{ddim_sweep, default_sweep_steps, evaluate, write_sweep, EvalOptions, SweepRow};
use crossway_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable that overrides the configured training seed.
const SEED_ENV: &str = "CROSSWAY_SEED";

#[derive(Parser)]
#[command(name = "crossway", version, about = "Diffusion visuomotor policies with state reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations on the toy pushing task.
    GenDemos {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy, writing a checkpoint per epoch and a loss log.
    Train {
        /// A TOML config file or a `key=value` override; repeatable, applied in order.
        #[arg(long)]
        config: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Closed-loop evaluation; prints the report as JSON.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate at several sampling-step counts; writes sweep.csv and sweep.svg.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated step counts; defaults to 10, 20, ..., 100.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write original/reconstructed image pairs from a model's state decoder.
    Recon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// A checkpoint directory, or a training directory (its latest checkpoint is used).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Sampling steps; equal to the diffusion steps means the full DDPM chain.
    #[arg(long)]
    ddim_steps: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_) | Error::Config(_) | Error::NoStateDecoder(_)) => 2,
        Some(Error::Integrity(_) | Error::Io(_) | Error::Json(_) | Error::Image(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenDemos { n, seed, out } => {
            let ds = generate_demos(n, seed)?;
            save_dataset(&ds, &out)?;
            log::info!("wrote {} episodes ({} steps) to {}", ds.episodes.len(), ds.total_steps(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let cfg = build_config(&config)?;
            let ds = load_dataset(&data)?;
            log::info!("training variant {} on {} episodes", cfg.model.variant.name(), ds.episodes.len());
            let summary = train(&cfg, &ds, &out, resume)?;
            log::info!("finished epoch {} after {} steps", summary.final_epoch, summary.steps);
        }
        Command::Eval { eval, report } => {
            let (ck, opts) = eval_setup(&eval)?;
            let model = ck.to_model()?;
            let r = evaluate(&model, &ck.stats, &opts)?;
            let json = serde_json::to_string_pretty(&r)?;
            if let Some(path) = report {
                std::fs::write(&path, &json).map_err(Error::from)?;
            }
            println!("{json}");
        }
        Command::Sweep { eval, steps, out } => {
            let (ck, opts) = eval_setup(&eval)?;
            let model = ck.to_model()?;
            let steps = if steps.is_empty() { default_sweep_steps() } else { steps };
            let rows: Vec<SweepRow> = ddim_sweep(&model, &ck.stats, &steps, &opts)?.into_iter().map(|(row, _)| row).collect();
            write_sweep(&out, &rows)?;
            for r in &rows {
                println!("{} {:.4}", r.steps, r.mean);
            }
        }
        Command::Recon { ckpt, data, n, out, seed } => {
            let ck = Checkpoint::load(&resolve_checkpoint(&ckpt)?)?;
            let model = ck.to_model()?;
            let ds = load_dataset(&data)?;
            if ds.stats != ck.stats {
                log::warn!("dataset normalization differs from the checkpoint's");
            }
            let all = all_samples(&ds);
            let stride = (all.len() / n.max(1)).max(1);
            let samples: Vec<_> = all.iter().step_by(stride).take(n).copied().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = preview_reconstructions(&model, &ds, &samples, &mut rng)?;
            std::fs::create_dir_all(&out)?;
            let hw = model.config().task.rec_hw;
            for (i, (orig, pred)) in pairs.iter().enumerate() {
                save_png(&out.join(format!("recon_{i}_orig.png")), orig, hw)?;
                save_png(&out.join(format!("recon_{i}_pred.png")), pred, hw)?;
            }
            log::info!("wrote {} pairs to {}", pairs.len(), out.display());
        }
    }
    Ok(())
}

/// Applies `--config` items in order on top of the defaults. An item naming
/// an existing file replaces the whole configuration; anything else must be
/// a `key=value` override.
fn build_config(items: &[String]) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for item in items {
        let path = Path::new(item);
        if path.is_file() {
            cfg = RunConfig::load(path)?;
        } else if item.contains('=') {
            cfg = cfg.with_overrides(&[item.as_str()])?;
        } else {
            return Err(Error::Config(format!("`{item}` is neither a config file nor a key=value override")).into());
        }
    }
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg = cfg.with_overrides(&[format!("train.seed={seed}")])?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_checkpoint(path: &Path) -> anyhow::Result<PathBuf> {
    if path.join("manifest.json").is_file() {
        return Ok(path.to_path_buf());
    }
    match latest_checkpoint(path)? {
        Some((_, dir)) => Ok(dir),
        None => Err(Error::Integrity(format!("no checkpoint found in {}", path.display())).into()),
    }
}

fn eval_setup(args: &EvalArgs) -> anyhow::Result<(Checkpoint, EvalOptions)> {
    let ck = Checkpoint::load(&resolve_checkpoint(&args.ckpt)?)?;
    let mut opts = EvalOptions::from_config(&ck.config);
    if let Some(e) = args.episodes {
        opts.episodes = e;
    }
    if !args.seeds.is_empty() {
        opts.seeds = args.seeds.clone();
    }
    if let Some(s) = args.ddim_steps {
        opts.ddim_steps = s;
    }
    Ok((ck, opts))
}
