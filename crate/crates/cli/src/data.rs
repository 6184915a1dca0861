use std::path::PathBuf;

use clap::Args;
use fdgan_core::synth::{class_histogram, export_dataset, make_dataset, Content, RENDER_RESOLUTION};
use serde::Serialize;

use crate::run_dir::fresh_dir;
use crate::{CmdResult, Failure, OutputArgs};

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 2400)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stored image size; must divide the render size.
    #[arg(long, default_value_t = RENDER_RESOLUTION)]
    pub resolution: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Serialize)]
struct DatasetInfo {
    n: usize,
    seed: u64,
    resolution: usize,
    version: &'static str,
    class_counts: Vec<(String, usize)>,
}

pub fn run(args: MakeDataArgs) -> CmdResult {
    if args.n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    if args.resolution == 0 || RENDER_RESOLUTION % args.resolution != 0 {
        return Err(Failure::usage(format!("--resolution must divide {RENDER_RESOLUTION}, got {}", args.resolution)));
    }
    let stem = format!("shapes-n{}-s{}-r{}", args.n, args.seed, args.resolution);
    let dir: PathBuf = fresh_dir(args.output.out.as_deref(), &args.output.out_root, &stem)?;
    let records = make_dataset(args.n, args.seed)?;
    export_dataset(&records, args.resolution, &dir)?;
    let hist = class_histogram(records.iter().map(|r| &r.content));
    let class_counts: Vec<(String, usize)> =
        hist.iter().enumerate().map(|(i, &c)| (Content::from_class_index(i).expect("class").to_string(), c)).collect();
    let info = DatasetInfo { n: args.n, seed: args.seed, resolution: args.resolution, version: env!("CARGO_PKG_VERSION"), class_counts };
    std::fs::write(dir.join(DATASET_FILE), serde_json::to_string_pretty(&info).map_err(anyhow::Error::from)?)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("writing {}: {e}", dir.join(DATASET_FILE).display())))?;
    println!("wrote {} samples at {}px to {}", args.n, args.resolution, dir.display());
    for (name, count) in &info.class_counts {
        println!("  {name:<16} {count}");
    }
    Ok(())
}
