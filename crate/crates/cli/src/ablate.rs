use std::path::{Path, PathBuf};

use clap::Args;
use fdgan_core::evaluation::EvalConfig;
use fdgan_core::matching::MatcherConfig;
use fdgan_core::probe::ProbeConfig;
use fdgan_core::synth::FileDataset;
use fdgan_core::training::TrainConfig;
use fdgan_core::variant::Variant;

use crate::pipeline::{ablation_markdown, effective_config, score_checkpoint, train_into, AblationRow, ConfigOverrides, EvalResources};
use crate::run_dir::{fresh_dir, slug, RunManifest, CONFIG_FILE};
use crate::{CmdResult, Failure, OutputArgs};

pub const TABLE_FILE: &str = "ablation.md";
pub const TABLE_JSON: &str = "ablation.json";

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Train the variants on separate threads.
    #[arg(long, conflicts_with = "deterministic")]
    pub parallel: bool,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value = "cpu", value_parser = crate::parse_device)]
    pub device: String,
    #[arg(long, default_value_t = EvalConfig::default().fid_samples)]
    pub fid_samples: usize,
    #[arg(long, default_value_t = EvalConfig::default().r_queries)]
    pub r_queries: usize,
    #[arg(long, default_value_t = EvalConfig::default().pool_size)]
    pub pool_size: usize,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = MatcherConfig::default().steps)]
    pub matcher_steps: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn one_variant(base: &TrainConfig, variant: Variant, data: &FileDataset, root: &Path, resources: &EvalResources, eval: &EvalConfig) -> AblationRow {
    let config = TrainConfig { variant, ..base.clone() };
    let dir = root.join(slug(variant.name()));
    let result = (|| -> Result<_, Failure> {
        std::fs::create_dir_all(&dir).map_err(|e| fdgan_core::Error::io(&dir, e))?;
        let mut manifest = RunManifest::new(&dir, "train", config.seed);
        manifest.dataset = Some(data.root.clone());
        let outcome = train_into(&config, data, &dir, &manifest, |_| {})?;
        let (ckpt, model) = fdgan_core::checkpoint::load(outcome.checkpoint_path.as_deref().expect("run dir given"))?;
        Ok(score_checkpoint(variant.name(), &ckpt, &model, resources, data, eval, false)?)
    })();
    match result {
        Ok(report) => AblationRow { variant, run_dir: Some(dir), report: Some(report), failure: None },
        Err(f) => AblationRow { variant, run_dir: Some(dir), report: None, failure: Some(format!("{f:?}")) },
    }
}

pub fn run(args: AblateArgs) -> CmdResult {
    let overrides = ConfigOverrides { steps: args.steps, seed: args.seed, set: args.set.clone(), ..ConfigOverrides::default() };
    let base = effective_config(args.config.as_deref(), &overrides)?;
    let data = FileDataset::load(&args.data).map_err(|e| Failure::usage(format!("dataset {}: {e}", args.data.display())))?;
    let root = fresh_dir(args.output.out.as_deref(), &args.output.out_root, &format!("ablate-seed{}-steps{}", base.seed, base.steps))?;
    std::fs::write(root.join(CONFIG_FILE), base.to_toml()).map_err(|e| fdgan_core::Error::io(root.join(CONFIG_FILE), e))?;
    let mut manifest = RunManifest::new(&root, "ablate", base.seed);
    manifest.dataset = Some(args.data.clone());
    manifest.layout = vec![CONFIG_FILE.into(), TABLE_FILE.into(), TABLE_JSON.into()];
    manifest.layout.extend(Variant::ALL.map(|v| format!("{}/", slug(v.name()))));
    manifest.write(&root)?;

    let eval = EvalConfig { fid_samples: args.fid_samples, r_queries: args.r_queries, pool_size: args.pool_size, seed: base.seed, ..EvalConfig::default() };
    let resources = EvalResources::build(
        &data,
        &ProbeConfig { epochs: args.probe_epochs, ..ProbeConfig::default() },
        &MatcherConfig { steps: args.matcher_steps, ..MatcherConfig::default() },
    )?;
    resources.probe.ensure_trusted().map_err(|e| Failure::Check(e.to_string()))?;

    let rows: Vec<AblationRow> = if args.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> =
                Variant::ALL.into_iter().map(|v| { let (base, data, root, resources, eval) = (&base, &data, &root, &resources, &eval); s.spawn(move || one_variant(base, v, data, root, resources, eval)) }).collect();
            handles.into_iter().map(|h| h.join().expect("variant thread panicked")).collect()
        })
    } else {
        Variant::ALL
            .into_iter()
            .map(|v| {
                eprintln!("ablation: training {v}");
                one_variant(&base, v, &data, &root, &resources, &eval)
            })
            .collect()
    };
    let table = ablation_markdown(&rows);
    std::fs::write(root.join(TABLE_FILE), &table).map_err(|e| fdgan_core::Error::io(root.join(TABLE_FILE), e))?;
    std::fs::write(root.join(TABLE_JSON), serde_json::to_string_pretty(&rows).map_err(anyhow::Error::from)?)
        .map_err(|e| fdgan_core::Error::io(root.join(TABLE_JSON), e))?;
    print!("{table}");
    let failed = rows.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} variants failed", rows.len())));
    }
    Ok(())
}
