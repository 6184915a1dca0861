//! Building blocks shared by the commands: effective configs, training
//! into a run directory, and scoring checkpoints.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use fdgan_core::checkpoint::Checkpoint;
use fdgan_core::error::{Error, Result};
use fdgan_core::evaluation::{evaluate, EvalConfig, MetricReport, TrainedGenerator};
use fdgan_core::matching::{train_matcher, Matcher, MatcherConfig};
use fdgan_core::probe::{train_probe, Probe, ProbeConfig};
use fdgan_core::synth::{make_dataset, Content, ImageCaptionSource};
use fdgan_core::tensor::Tensor;
use fdgan_core::training::{train, LossRecord, TrainConfig, TrainOutcome};
use fdgan_core::variant::{Model, ParamCensus, Variant};

use crate::overrides::apply_override;
use crate::run_dir::{RunManifest, CONFIG_FILE};
use crate::Failure;

/// The probe is trained on freshly rendered images, never on the dataset
/// under evaluation.
pub const PROBE_DATA_SEED: u64 = 0x5eed_0b5e;
pub const PROBE_DATA_SIZE: usize = 2400;

/// Flags that override fields of a config file.
#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides {
    pub variant: Option<Variant>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub unconditional: bool,
    /// `key=value` assignments applied last.
    pub set: Vec<String>,
}

/// Defaults, then the file, then flags, then `key=value` assignments.
pub fn effective_config(file: Option<&Path>, o: &ConfigOverrides) -> Result<TrainConfig> {
    let mut c = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = o.variant {
        c.variant = v;
    }
    if let Some(s) = o.steps {
        c.steps = s;
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if o.unconditional {
        c.unconditional = true;
    }
    for a in &o.set {
        c = apply_override(&c, a)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn run_stem(c: &TrainConfig) -> String {
    let mode = if c.unconditional { "-uncond" } else { "" };
    crate::run_dir::slug(&format!("{}{mode}-seed{}-steps{}", c.variant, c.seed, c.steps))
}

/// Writes `config.toml` and the manifest, then trains with the metrics
/// ledger and checkpoints under `run_dir`.
pub fn train_into<S: ImageCaptionSource + ?Sized>(
    config: &TrainConfig,
    data: &S,
    run_dir: &Path,
    manifest: &RunManifest,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome, Failure> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    manifest.write(run_dir)?;
    train(config, data, Some(run_dir), |r| progress(r)).map_err(|abort| match abort.error {
        Error::Numerical(_) | Error::NonFinite { .. } => {
            Failure::Numerical { error: anyhow::anyhow!("step {}: {}", abort.step, abort.error), last_checkpoint: abort.last_checkpoint }
        }
        other => Failure::from(other),
    })
}

/// Independent judges used by evaluation.
pub struct EvalResources {
    pub probe: Probe,
    pub matcher: Matcher,
}

impl EvalResources {
    /// Trains the probe on rendered images and the retrieval matcher on
    /// the real pairs of `data`.
    pub fn build<S: ImageCaptionSource + ?Sized>(data: &S, probe: &ProbeConfig, matcher: &MatcherConfig) -> Result<Self> {
        let probe = train_probe(&make_dataset(PROBE_DATA_SIZE, PROBE_DATA_SEED)?, probe)?;
        let matcher = train_matcher(data, matcher)?;
        Ok(Self { probe, matcher })
    }
}

/// Generator view of a checkpoint; `live` selects the raw weights over
/// the averaged ones.
pub fn generator_of<'a>(checkpoint: &'a Checkpoint, model: &'a Model, live: bool) -> TrainedGenerator<'a> {
    TrainedGenerator {
        model,
        vocab: &checkpoint.vocab,
        text_store: &checkpoint.params.text,
        generator_store: if live { &checkpoint.params.generator } else { &checkpoint.generator_ema },
        unconditional: checkpoint.config.unconditional,
    }
}

pub fn score_checkpoint<S: ImageCaptionSource + ?Sized>(
    label: &str,
    checkpoint: &Checkpoint,
    model: &Model,
    resources: &EvalResources,
    data: &S,
    config: &EvalConfig,
    live: bool,
) -> Result<MetricReport> {
    let generator = generator_of(checkpoint, model, live);
    let mut report = evaluate(label, &generator, data, &resources.probe, &resources.matcher, config)?;
    let census = ParamCensus::of(&checkpoint.params);
    report.param_counts.insert("generator".into(), census.generator);
    report.param_counts.insert("discriminators".into(), census.discriminators);
    report.param_counts.insert("total".into(), census.total());
    report.param_counts.extend(census.modules);
    Ok(report)
}

/// A source whose images turn to NaN after a number of reads; used to
/// exercise the numerical-abort path.
pub struct PoisonAfter<'a, S: ?Sized> {
    pub inner: &'a S,
    pub limit: usize,
    reads: Cell<usize>,
}

impl<'a, S: ?Sized> PoisonAfter<'a, S> {
    pub fn new(inner: &'a S, limit: usize) -> Self {
        Self { inner, limit, reads: Cell::new(0) }
    }
}

impl<S: ImageCaptionSource + ?Sized> ImageCaptionSource for PoisonAfter<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn caption(&self, i: usize) -> &str {
        self.inner.caption(i)
    }

    fn image(&self, i: usize, resolution: usize) -> Result<Tensor<f32>> {
        self.reads.set(self.reads.get() + 1);
        let img = self.inner.image(i, resolution)?;
        Ok(if self.reads.get() > self.limit { img.map(|_| f32::NAN) } else { img })
    }

    fn content(&self, i: usize) -> Option<Content> {
        self.inner.content(i)
    }
}

/// One line of the ablation table.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub run_dir: Option<PathBuf>,
    pub report: Option<MetricReport>,
    pub failure: Option<String>,
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "| variant | fid_like | r_precision | content_consistency | caption_accuracy | params (G+D) | status |\n|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        match &r.report {
            Some(m) => s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} | ok |\n",
                r.variant,
                m.fid_like,
                m.r_precision,
                m.disent_content_consistency,
                m.disent_caption_accuracy,
                m.param_counts.get("total").copied().unwrap_or(0)
            )),
            None => s.push_str(&format!(
                "| {} | - | - | - | - | - | failed: {} |\n",
                r.variant,
                r.failure.as_deref().unwrap_or("unknown").replace('|', "/")
            )),
        }
    }
    s
}
