use std::path::PathBuf;

use clap::Args;
use fdgan_core::checkpoint;
use fdgan_core::evaluation::{evaluation_captions, factor_grid, noise_matrix, CaptionToImage, EvalConfig, OracleRenderer};
use fdgan_core::matching::MatcherConfig;
use fdgan_core::probe::ProbeConfig;
use fdgan_core::synth::FileDataset;
use fdgan_core::variant::Variant;

use crate::pipeline::{effective_config, generator_of, score_checkpoint, ConfigOverrides, EvalResources};
use crate::run_dir::{fresh_dir, slug, RunManifest};
use crate::{CmdResult, Failure, OutputArgs};

pub const REPORT_FILE: &str = "metrics.json";
pub const GRID_FILE: &str = "grid.png";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub rows: usize,
    pub columns: usize,
}

impl std::str::FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid {s:?} is not of the form RxC"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("grid {s:?} needs positive integers"));
        Ok(Self { rows: parse(r)?, columns: parse(c)? })
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the renderer itself instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Image size of the oracle renderer.
    #[arg(long, default_value_t = 128, requires = "oracle")]
    pub oracle_resolution: usize,
    /// Dataset directory supplying captions and real images.
    #[arg(long)]
    pub data: PathBuf,
    /// Expected training config; a checkpoint trained differently is rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Expected variant of the checkpoint.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Draw a factor grid of R captions by C noise vectors.
    #[arg(long, value_name = "RxC")]
    pub grid: Option<GridSpec>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = EvalConfig::default().fid_samples)]
    pub fid_samples: usize,
    #[arg(long, default_value_t = EvalConfig::default().r_queries)]
    pub r_queries: usize,
    #[arg(long, default_value_t = EvalConfig::default().pool_size)]
    pub pool_size: usize,
    /// Use the raw generator weights instead of the averaged ones.
    #[arg(long)]
    pub live: bool,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = MatcherConfig::default().steps)]
    pub matcher_steps: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

impl EvalArgs {
    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            fid_samples: self.fid_samples,
            r_queries: self.r_queries,
            pool_size: self.pool_size,
            seed: self.seed,
            ..EvalConfig::default()
        }
    }
}

pub fn run(args: EvalArgs) -> CmdResult {
    let data = FileDataset::load(&args.data).map_err(|e| Failure::usage(format!("dataset {}: {e}", args.data.display())))?;
    let loaded = match &args.checkpoint {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::usage(format!("checkpoint {} does not exist", path.display())));
            }
            let (ckpt, model) = match &args.config {
                Some(cfg) => checkpoint::load_matching(path, &effective_config(Some(cfg), &ConfigOverrides::default())?)?,
                None => checkpoint::load(path)?,
            };
            if let Some(v) = args.variant.filter(|v| *v != ckpt.config.variant) {
                return Err(Failure::usage(format!("checkpoint holds variant {}, not {v}", ckpt.config.variant)));
            }
            Some((ckpt, model))
        }
        None => None,
    };
    let stem = match &loaded {
        Some((c, _)) => format!("eval-{}-step{}-seed{}", slug(c.config.variant.name()), c.step, args.seed),
        None => format!("eval-oracle-seed{}", args.seed),
    };
    let dir = fresh_dir(args.output.out.as_deref(), &args.output.out_root, &stem)?;
    let mut manifest = RunManifest::new(&dir, "eval", args.seed);
    manifest.dataset = Some(args.data.clone());
    manifest.layout = vec![REPORT_FILE.into()];
    if args.grid.is_some() {
        manifest.layout.extend([GRID_FILE.into(), "grid.json".into()]);
    }
    manifest.write(&dir)?;

    let probe_cfg = ProbeConfig { epochs: args.probe_epochs, ..ProbeConfig::default() };
    let matcher_cfg = MatcherConfig { steps: args.matcher_steps, ..MatcherConfig::default() };
    eprintln!("training evaluation probe and retrieval matcher");
    let resources = EvalResources::build(&data, &probe_cfg, &matcher_cfg)?;
    resources.probe.ensure_trusted().map_err(|e| Failure::Check(e.to_string()))?;

    let oracle;
    let trained;
    let (report, generator): (_, &dyn CaptionToImage) = match &loaded {
        Some((ckpt, model)) => {
            let label = format!("{}@{}", ckpt.config.variant, ckpt.step);
            let r = score_checkpoint(&label, ckpt, model, &resources, &data, &args.eval_config(), args.live)?;
            trained = generator_of(ckpt, model, args.live);
            (r, &trained)
        }
        None => {
            oracle = OracleRenderer { resolution: args.oracle_resolution, noise_dim: fdgan_core::variant::ModelDims::default().z_dim };
            let r = fdgan_core::evaluation::evaluate("oracle", &oracle, &data, &resources.probe, &resources.matcher, &args.eval_config())?;
            (r, &oracle)
        }
    };
    report.write_json(&dir.join(REPORT_FILE))?;
    println!(
        "{}: fid_like {:.4}  r_precision {:.4}  content_consistency {:.4}  caption_accuracy {:.4}  (probe {:.4})",
        report.label,
        report.fid_like,
        report.r_precision,
        report.disent_content_consistency,
        report.disent_caption_accuracy,
        report.probe_held_out_accuracy
    );
    if let Some(spec) = args.grid {
        let captions = evaluation_captions(spec.rows);
        let noise = noise_matrix(spec.columns, generator.noise_dim(), args.seed.wrapping_add(7));
        let grid = factor_grid(generator, &captions, &noise)?;
        let sidecar = grid.write(&dir.join(GRID_FILE))?;
        println!("grid {}x{} written to {} ({})", spec.rows, spec.columns, dir.join(GRID_FILE).display(), sidecar.display());
    }
    println!("report written to {}", dir.join(REPORT_FILE).display());
    Ok(())
}
