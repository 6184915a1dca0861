use std::path::PathBuf;

use clap::Args;
use fdgan_core::synth::FileDataset;
use fdgan_core::variant::Variant;

use crate::pipeline::{effective_config, run_stem, train_into, ConfigOverrides, PoisonAfter};
use crate::run_dir::{fresh_dir, RunManifest, CONFIG_FILE, MANIFEST_FILE};
use crate::{CmdResult, Failure, OutputArgs};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `make-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Withhold captions from the generator (unconditional ablation).
    #[arg(long)]
    pub unconditional: bool,
    /// Override any config field, e.g. `--set model.base_channels=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Training is always single-threaded and reproducible; the flag is
    /// accepted so scripts can state the requirement.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value = "cpu", value_parser = crate::parse_device)]
    pub device: String,
    /// Print a progress line every this many steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Test fixture: images become NaN after this many reads.
    #[arg(long, hide = true)]
    pub poison_after: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

pub fn run(args: TrainArgs) -> CmdResult {
    let overrides = ConfigOverrides {
        variant: args.variant,
        steps: args.steps,
        seed: args.seed,
        unconditional: args.unconditional,
        set: args.set.clone(),
    };
    let config = effective_config(args.config.as_deref(), &overrides)?;
    let data = FileDataset::load(&args.data).map_err(|e| Failure::usage(format!("dataset {}: {e}", args.data.display())))?;
    let run_dir = fresh_dir(args.output.out.as_deref(), &args.output.out_root, &run_stem(&config))?;
    let mut manifest = RunManifest::new(&run_dir, "train", config.seed);
    manifest.device = args.device.clone();
    manifest.dataset = Some(args.data.clone());
    manifest.layout = vec![
        CONFIG_FILE.into(),
        MANIFEST_FILE.into(),
        fdgan_core::training::METRICS_FILE.into(),
        format!("{}/step_NNNNNN.fdckpt", fdgan_core::training::CHECKPOINT_DIR),
    ];
    eprintln!("training {} for {} steps into {}", config.variant, config.steps, run_dir.display());
    let log_every = args.log_every;
    let progress = |r: &fdgan_core::training::LossRecord| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!(
                "step {:>6}  d_uncond {:.4}  d_cond {}  g {:.4}  matching {:.4}",
                r.step,
                r.d_loss_uncond,
                r.d_loss_cond.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")),
                r.g_loss,
                r.matching_loss
            );
        }
    };
    let outcome = match args.poison_after {
        Some(limit) => train_into(&config, &PoisonAfter::new(&data, limit), &run_dir, &manifest, progress)?,
        None => train_into(&config, &data, &run_dir, &manifest, progress)?,
    };
    let last = outcome.records.last();
    println!(
        "run {} finished at step {}: d_uncond {} g {} matching {}; checkpoint {}",
        run_dir.display(),
        outcome.checkpoint.step,
        last.map_or_else(|| "-".into(), |r| format!("{:.4}", r.d_loss_uncond)),
        last.map_or_else(|| "-".into(), |r| format!("{:.4}", r.g_loss)),
        last.map_or_else(|| "-".into(), |r| format!("{:.4}", r.matching_loss)),
        outcome.checkpoint_path.as_ref().map_or_else(|| "-".into(), |p| p.display().to_string())
    );
    Ok(())
}
