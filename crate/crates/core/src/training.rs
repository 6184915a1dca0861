//! Adversarial training: losses, parameter averaging, and the training loop.

use std::path::{Path, PathBuf};

use fdgan_tensor::{Adam, Bound, Graph, ParamStore, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::generator::TextCondition;
use crate::matching::{encode_captions, matching_loss, stack_images, DEFAULT_TEMPERATURE};
use crate::synth::{resize_to, Content, ImageCaptionSource};
use crate::text::{Caption, Vocabulary};
use crate::variant::{build_variant, Model, ModelDims, ModelParams, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// Binary cross-entropy on logits, non-saturating for the generator.
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_encoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: AdversarialLoss,
    pub matching_weight: f64,
    pub temperature: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Train with the caption withheld from the generator and without the
    /// conditional discriminator terms.
    pub unconditional: bool,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: usize,
    pub model: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Fdgan,
            steps: 3000,
            batch_size: 16,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            lr_encoder: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            loss: AdversarialLoss::Bce,
            matching_weight: 1.0,
            temperature: DEFAULT_TEMPERATURE,
            ema_decay: 0.999,
            seed: 0,
            unconditional: false,
            checkpoint_every: 1000,
            model: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_generator, self.lr_discriminator, self.lr_encoder];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config(format!("learning rates must be positive, got {rates:?}")));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.temperature > 0.0) || self.matching_weight < 0.0 {
            return Err(Error::config("temperature must be positive and matching_weight non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        let gen = self.model.generator_config(self.variant);
        gen.validate()?;
        let top = *gen.output_resolutions().last().expect("at least one stage");
        if top % crate::matching::ENCODER_RESOLUTION != 0 {
            return Err(Error::config(format!(
                "final resolution {top} must be a multiple of {}",
                crate::matching::ENCODER_RESOLUTION
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Conditional-head logits of one resolution.
#[derive(Clone, Copy, Debug)]
pub struct CondLogits {
    pub real: Var,
    pub fake: Var,
    pub mismatched: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscLogits {
    pub real_uncond: Var,
    pub fake_uncond: Var,
    pub cond: Option<CondLogits>,
}

#[derive(Clone, Debug)]
pub struct DiscLoss {
    pub total: Var,
    pub uncond: Var,
    pub cond: Option<Var>,
    /// `(uncond, cond)` per resolution.
    pub per_resolution: Vec<(Var, Option<Var>)>,
}

fn sum_vars(g: &mut Graph<f32>, vs: &[Var]) -> Result<Var> {
    let mut it = vs.iter().copied();
    let first = it.next().ok_or_else(|| Error::config("empty loss sum"))?;
    it.try_fold(first, |acc, v| g.add(acc, v).map_err(Error::from))
}

fn numerical(e: TensorError) -> Error {
    match e {
        TensorError::NonFinite { op, index, shape, value } => Error::Numerical(format!(
            "non-finite value {value} in {op} at flat index {index} of shape {shape:?}"
        )),
        other => other.into(),
    }
}

/// Sum over resolutions of real/fake BCE on the unconditional head and
/// (real, matching) -> 1, (fake, matching) -> 0, (real, mismatched) -> 0 on
/// the conditional head.
pub fn discriminator_loss(g: &mut Graph<f32>, per_res: &[DiscLogits]) -> Result<DiscLoss> {
    let mut unconds = Vec::new();
    let mut conds = Vec::new();
    let mut per_resolution = Vec::new();
    for l in per_res {
        let a = g.bce_with_logits(l.real_uncond, 1.0).map_err(numerical)?;
        let b = g.bce_with_logits(l.fake_uncond, 0.0).map_err(numerical)?;
        let u = g.add(a, b)?;
        let c = match l.cond {
            Some(c) => {
                let r = g.bce_with_logits(c.real, 1.0).map_err(numerical)?;
                let f = g.bce_with_logits(c.fake, 0.0).map_err(numerical)?;
                let m = g.bce_with_logits(c.mismatched, 0.0).map_err(numerical)?;
                let s = sum_vars(g, &[r, f, m])?;
                conds.push(s);
                Some(s)
            }
            None => None,
        };
        unconds.push(u);
        per_resolution.push((u, c));
    }
    let uncond = sum_vars(g, &unconds)?;
    let cond = if conds.is_empty() { None } else { Some(sum_vars(g, &conds)?) };
    let total = match cond {
        Some(c) => g.add(uncond, c)?,
        None => uncond,
    };
    Ok(DiscLoss { total, uncond, cond, per_resolution })
}

#[derive(Clone, Copy, Debug)]
pub struct GenLogits {
    pub fake_uncond: Var,
    pub fake_cond: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct GenLoss {
    pub total: Var,
    pub adversarial: Var,
    pub per_resolution: Vec<Var>,
}

/// Sum over resolutions of BCE pushing both heads toward "real", plus
/// `weight * matching` when a matching term is supplied.
pub fn generator_loss(g: &mut Graph<f32>, per_res: &[GenLogits], matching: Option<(Var, f64)>) -> Result<GenLoss> {
    let mut terms = Vec::new();
    for l in per_res {
        let u = g.bce_with_logits(l.fake_uncond, 1.0).map_err(numerical)?;
        let t = match l.fake_cond {
            Some(c) => {
                let c = g.bce_with_logits(c, 1.0).map_err(numerical)?;
                g.add(u, c)?
            }
            None => u,
        };
        terms.push(t);
    }
    let adversarial = sum_vars(g, &terms)?;
    let total = match matching {
        Some((m, w)) if w != 0.0 => {
            let m = g.scale(m, w);
            g.add(adversarial, m)?
        }
        _ => adversarial,
    };
    Ok(GenLoss { total, adversarial, per_resolution: terms })
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub shadow: ParamStore<f32>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(live: &ParamStore<f32>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config(format!("ema decay {decay} outside [0, 1]")));
        }
        Ok(Self { shadow: live.clone(), decay })
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`.
    pub fn update(&mut self, live: &ParamStore<f32>) -> Result<()> {
        ema_update(&mut self.shadow, live, self.decay)
    }
}

pub fn ema_update(shadow: &mut ParamStore<f32>, live: &ParamStore<f32>, decay: f64) -> Result<()> {
    shadow.check_layout(live).map_err(|e| Error::config(format!("EMA layout mismatch: {e}")))?;
    let d = decay as f32;
    let ids: Vec<_> = shadow.ids().collect();
    for id in ids {
        let l = live.get(id).data();
        for (s, &v) in shadow.get_mut(id).data_mut().iter_mut().zip(l) {
            *s = d * *s + (1.0 - d) * v;
        }
    }
    Ok(())
}

/// Decay used at step `t` (zero based): the configured decay, shortened
/// early on so the average is not dominated by the initialisation.
pub fn warmup_decay(decay: f64, t: usize) -> f64 {
    decay.min((1.0 + t as f64) / (10.0 + t as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionLoss {
    pub resolution: usize,
    pub d_uncond: f64,
    pub d_cond: Option<f64>,
    pub g_adv: f64,
}

/// One line of the metrics ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub d_loss_uncond: f64,
    pub d_loss_cond: Option<f64>,
    pub g_loss: f64,
    pub g_adv: f64,
    /// Matching loss of the encoders on real pairs.
    pub matching_loss: f64,
    /// Matching loss of generated images against their captions.
    pub g_matching_loss: Option<f64>,
    pub per_resolution: Vec<ResolutionLoss>,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        let mut vals = vec![self.d_loss_uncond, self.g_loss, self.g_adv, self.matching_loss];
        vals.extend(self.d_loss_cond);
        vals.extend(self.g_matching_loss);
        for r in &self.per_resolution {
            vals.extend([r.d_uncond, r.g_adv]);
            vals.extend(r.d_cond);
        }
        vals.iter().all(|v| v.is_finite())
    }
}

/// For each item, an index `j != i` whose content differs, or whose caption
/// differs when content is unknown. Falls back to any `j != i`.
pub fn mismatch_indices<R: Rng + ?Sized>(captions: &[String], contents: &[Option<Content>], rng: &mut R) -> Vec<usize> {
    let n = captions.len();
    (0..n)
        .map(|i| {
            let differs = |j: usize| match (contents[i], contents[j]) {
                (Some(a), Some(b)) => a != b,
                _ => captions[i] != captions[j],
            };
            let good: Vec<usize> = (0..n).filter(|&j| j != i && differs(j)).collect();
            let pool: Vec<usize> = if good.is_empty() { (0..n).filter(|&j| j != i).collect() } else { good };
            pool[rng.random_range(0..pool.len())]
        })
        .collect()
}

/// A prepared training batch.
struct Batch {
    captions: Vec<Caption>,
    valid: Vec<usize>,
    mismatched: Vec<Caption>,
    /// One `(B, 3, R, R)` tensor per output resolution, coarsest first.
    real: Vec<Tensor<f32>>,
}

/// Live training state.
pub struct Trainer<'a, S: ImageCaptionSource + ?Sized> {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    pub params: ModelParams,
    pub ema: EmaState,
    source: &'a S,
    opt_text: Adam<f32>,
    opt_image: Adam<f32>,
    opt_gen: Adam<f32>,
    opt_disc: Vec<Adam<f32>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pub step: usize,
}

impl<'a, S: ImageCaptionSource + ?Sized> Trainer<'a, S> {
    pub fn new(config: TrainConfig, source: &'a S) -> Result<Self> {
        config.validate()?;
        if source.len() < config.batch_size {
            return Err(Error::data(format!(
                "dataset of {} samples is smaller than the batch size {}",
                source.len(),
                config.batch_size
            )));
        }
        let corpus: Vec<&str> = (0..source.len()).map(|i| source.caption(i)).collect();
        let vocab = Vocabulary::build(&corpus)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, params) = build_variant(config.variant, &config.model, vocab.len(), &mut rng)?;
        Ok(Self::from_parts(config, source, vocab, model, params, rng))
    }

    fn from_parts(
        config: TrainConfig,
        source: &'a S,
        vocab: Vocabulary,
        model: Model,
        params: ModelParams,
        rng: ChaCha8Rng,
    ) -> Self {
        let adam = |s: &ParamStore<f32>, lr: f64| Adam::new(s, lr, config.beta1, config.beta2);
        Self {
            opt_text: adam(&params.text, config.lr_encoder),
            opt_image: adam(&params.image_encoder, config.lr_encoder),
            opt_gen: adam(&params.generator, config.lr_generator),
            opt_disc: params.discriminators.iter().map(|s| adam(s, config.lr_discriminator)).collect(),
            ema: EmaState { shadow: params.generator.clone(), decay: config.ema_decay },
            config,
            vocab,
            model,
            params,
            source,
            rng,
            order: Vec::new(),
            step: 0,
        }
    }

    fn next_batch(&mut self) -> Result<Batch> {
        let b = self.config.batch_size;
        if self.order.len() < b {
            let mut fresh: Vec<usize> = (0..self.source.len()).collect();
            fresh.shuffle(&mut self.rng);
            self.order.extend(fresh);
        }
        let idx: Vec<usize> = self.order.drain(..b).collect();
        let texts: Vec<String> = idx.iter().map(|&i| self.source.caption(i).to_string()).collect();
        let contents: Vec<Option<Content>> = idx.iter().map(|&i| self.source.content(i)).collect();
        let mis = mismatch_indices(&texts, &contents, &mut self.rng);
        let max_len = self.config.model.max_caption_len;
        let captions = encode_captions(&self.vocab, &texts, max_len)?;
        let mismatched = mis.iter().map(|&j| captions[j].clone()).collect();
        let resolutions = self.model.generator.config.output_resolutions();
        let top = *resolutions.last().expect("at least one stage");
        let full: Vec<Tensor<f32>> = idx.iter().map(|&i| self.source.image(i, top)).collect::<Result<_>>()?;
        let mut real = Vec::new();
        for &r in &resolutions {
            let imgs: Vec<Tensor<f32>> = full.iter().map(|x| resize_to(x, r)).collect::<Result<_>>()?;
            real.push(stack_images(&imgs)?);
        }
        Ok(Batch { valid: captions.iter().map(Caption::len).collect(), captions, mismatched, real })
    }

    fn sample_noise(&mut self) -> Tensor<f32> {
        let n = self.config.batch_size * self.config.model.z_dim;
        let data: Vec<f32> = (0..n).map(|_| self.rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor::new(&[self.config.batch_size, self.config.model.z_dim], data).expect("noise shape")
    }

    /// Forward-only sentence and word features.
    fn encode(&self, captions: &[Caption]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut g = Graph::new();
        let p = g.bind(&self.params.text, false);
        let e = self.model.text.encode_batch(&mut g, &p, captions)?;
        Ok((g.value(e.sentence).clone(), g.value(e.words).clone()))
    }

    /// Inputs the generator sees: zeros when training unconditionally.
    fn generator_text(&self, sentence: &Tensor<f32>, words: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
        if self.config.unconditional {
            (Tensor::zeros(sentence.shape()), Tensor::zeros(words.shape()))
        } else {
            (sentence.clone(), words.clone())
        }
    }

    /// One encoder update, one discriminator update and one generator update.
    /// Non-finite values anywhere surface as [`Error::Numerical`].
    pub fn train_step(&mut self) -> Result<LossRecord> {
        self.step_inner().map_err(|e| match e {
            Error::Tensor(t) => numerical(t),
            other => other,
        })
    }

    fn step_inner(&mut self) -> Result<LossRecord> {
        let batch = self.next_batch()?;
        let z = self.sample_noise();
        let top_real = batch.real.last().expect("stage").clone();

        // text and image encoders on real pairs
        let matching_value = {
            let mut g = Graph::new();
            let tp = g.bind(&self.params.text, true);
            let ip = g.bind(&self.params.image_encoder, true);
            let enc = self.model.text.encode_batch(&mut g, &tp, &batch.captions)?;
            let x = g.constant(top_real.clone());
            let emb = self.model.image_encoder.forward(&mut g, &ip, x)?;
            let loss = matching_loss(&mut g, emb, enc.sentence, self.config.temperature)?;
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss).map_err(numerical)?;
            self.opt_text.step(&mut self.params.text, &tp, &grads).map_err(numerical)?;
            self.opt_image.step(&mut self.params.image_encoder, &ip, &grads).map_err(numerical)?;
            value
        };

        let (sentence, words) = self.encode(&batch.captions)?;
        let (mis_sentence, _) = self.encode(&batch.mismatched)?;
        let (gen_sentence, gen_words) = self.generator_text(&sentence, &words);
        let conditional = !self.config.unconditional;

        // discriminator update on detached fakes
        let fakes = {
            let mut g = Graph::new();
            let p = g.bind(&self.params.generator, false);
            let (zv, sv, wv) = (g.constant(z.clone()), g.constant(gen_sentence.clone()), g.constant(gen_words.clone()));
            let text = TextCondition { sentence: sv, words: wv, valid: &batch.valid };
            let out = self.model.generator.generate(&mut g, &p, zv, text)?;
            out.into_iter().map(|v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let (d_uncond, d_cond, d_per_res) = {
            let mut g = Graph::new();
            let binds: Vec<Bound> = self.params.discriminators.iter().map(|s| g.bind(s, true)).collect();
            let sv = g.constant(sentence.clone());
            let mv = g.constant(mis_sentence.clone());
            let mut logits = Vec::new();
            for ((d, p), (real, fake)) in self.model.discriminators.iter().zip(&binds).zip(batch.real.iter().zip(&fakes)) {
                let rv = g.constant(real.clone());
                let fv = g.constant(fake.clone());
                let rf = d.features(&mut g, p, rv)?;
                let ff = d.features(&mut g, p, fv)?;
                let real_uncond = d.uncond_logit(&mut g, p, rf)?;
                let fake_uncond = d.uncond_logit(&mut g, p, ff)?;
                let cond = if conditional {
                    Some(CondLogits {
                        real: d.cond_logit(&mut g, p, rf, sv)?,
                        fake: d.cond_logit(&mut g, p, ff, sv)?,
                        mismatched: d.cond_logit(&mut g, p, rf, mv)?,
                    })
                } else {
                    None
                };
                logits.push(DiscLogits { real_uncond, fake_uncond, cond });
            }
            let loss = discriminator_loss(&mut g, &logits)?;
            let grads = g.backward(loss.total).map_err(numerical)?;
            for ((store, opt), p) in self.params.discriminators.iter_mut().zip(&mut self.opt_disc).zip(&binds) {
                opt.step(store, p, &grads).map_err(numerical)?;
            }
            let val = |v: Var| g.value(v).item() as f64;
            let per: Vec<(f64, Option<f64>)> = loss.per_resolution.iter().map(|&(u, c)| (val(u), c.map(val))).collect();
            (val(loss.uncond), loss.cond.map(val), per)
        };

        // generator update through frozen discriminators and image encoder
        let (g_total, g_adv, g_per_res, g_matching) = {
            let mut g = Graph::new();
            let gp = g.bind(&self.params.generator, true);
            let binds: Vec<Bound> = self.params.discriminators.iter().map(|s| g.bind(s, false)).collect();
            let ip = g.bind(&self.params.image_encoder, false);
            let (zv, gsv, gwv) = (g.constant(z), g.constant(gen_sentence), g.constant(gen_words));
            let sv = g.constant(sentence);
            let text = TextCondition { sentence: gsv, words: gwv, valid: &batch.valid };
            let images = self.model.generator.generate(&mut g, &gp, zv, text)?;
            let mut logits = Vec::new();
            for ((d, p), &img) in self.model.discriminators.iter().zip(&binds).zip(&images) {
                let f = d.features(&mut g, p, img)?;
                let fake_uncond = d.uncond_logit(&mut g, p, f)?;
                let fake_cond = if conditional { Some(d.cond_logit(&mut g, p, f, sv)?) } else { None };
                logits.push(GenLogits { fake_uncond, fake_cond });
            }
            let matching = if conditional && self.config.matching_weight > 0.0 {
                let emb = self.model.image_encoder.forward(&mut g, &ip, *images.last().expect("stage"))?;
                Some((matching_loss(&mut g, emb, sv, self.config.temperature)?, self.config.matching_weight))
            } else {
                None
            };
            let loss = generator_loss(&mut g, &logits, matching)?;
            let grads = g.backward(loss.total).map_err(numerical)?;
            self.opt_gen.step(&mut self.params.generator, &gp, &grads).map_err(numerical)?;
            let val = |v: Var| g.value(v).item() as f64;
            let per: Vec<f64> = loss.per_resolution.iter().map(|&v| val(v)).collect();
            (val(loss.total), val(loss.adversarial), per, matching.map(|(m, _)| val(m)))
        };

        ema_update(&mut self.ema.shadow, &self.params.generator, warmup_decay(self.config.ema_decay, self.step))?;

        let resolutions = self.model.generator.config.output_resolutions();
        let record = LossRecord {
            step: self.step,
            d_loss_uncond: d_uncond,
            d_loss_cond: d_cond,
            g_loss: g_total,
            g_adv,
            matching_loss: matching_value,
            g_matching_loss: g_matching,
            per_resolution: resolutions
                .iter()
                .zip(d_per_res.iter().zip(&g_per_res))
                .map(|(&resolution, (&(d_uncond, d_cond), &g_adv))| ResolutionLoss { resolution, d_uncond, d_cond, g_adv })
                .collect(),
        };
        if !record.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}: {record:?}", self.step)));
        }
        self.step += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            generator_ema: self.ema.shadow.clone(),
        }
    }
}

/// Files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: Option<PathBuf>,
}

/// Training failed part way; the last checkpoint written is reported.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub step: usize,
    pub last_checkpoint: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.fdckpt"))
}

/// Runs `config.steps` training steps. With `run_dir`, appends one JSON
/// record per step to `metrics.jsonl` and writes checkpoints under
/// `checkpoints/`.
pub fn train<S: ImageCaptionSource + ?Sized>(
    config: &TrainConfig,
    source: &S,
    run_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let abort = |error: Error, step: usize, last: &Option<PathBuf>| TrainAbort { error, step, last_checkpoint: last.clone() };
    let mut last: Option<PathBuf> = None;
    let mut trainer = Trainer::new(config.clone(), source).map_err(|e| abort(e, 0, &last))?;
    let mut ledger = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| abort(Error::io(dir, e), 0, &last))?;
            let path = dir.join(METRICS_FILE);
            let f = std::fs::File::create(&path).map_err(|e| abort(Error::io(&path, e), 0, &last))?;
            Some((std::io::BufWriter::new(f), path))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let record = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => return Err(abort(e, trainer.step, &last)),
        };
        if let Some((w, path)) = ledger.as_mut() {
            use std::io::Write;
            let line = serde_json::to_string(&record).map_err(|e| abort(e.into(), trainer.step, &last))?;
            writeln!(w, "{line}").map_err(|e| abort(Error::io(path.as_path(), e), trainer.step, &last))?;
        }
        on_step(&record);
        records.push(record);
        if let Some(dir) = run_dir {
            if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 && trainer.step < config.steps {
                let p = checkpoint_path(dir, trainer.step);
                checkpoint::save(&trainer.checkpoint(), &p).map_err(|e| abort(e, trainer.step, &last))?;
                last = Some(p);
            }
        }
    }
    if let Some((mut w, path)) = ledger {
        use std::io::Write;
        w.flush().map_err(|e| abort(Error::io(&path, e), trainer.step, &last))?;
    }
    let ckpt = trainer.checkpoint();
    let mut checkpoint_path_out = None;
    if let Some(dir) = run_dir {
        let p = checkpoint_path(dir, trainer.step);
        checkpoint::save(&ckpt, &p).map_err(|e| abort(e, trainer.step, &last))?;
        checkpoint_path_out = Some(p);
    }
    Ok(TrainOutcome { records, checkpoint: ckpt, checkpoint_path: checkpoint_path_out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(g: &mut Graph<f32>, v: f32, n: usize) -> Var {
        g.constant(Tensor::full(&[n], v))
    }

    #[test]
    fn zero_logits_cost_ln2_per_term() {
        let ln2 = std::f64::consts::LN_2;
        for m in 1..=3 {
            let mut g = Graph::new();
            let per: Vec<DiscLogits> = (0..m)
                .map(|_| DiscLogits {
                    real_uncond: consts(&mut g, 0.0, 4),
                    fake_uncond: consts(&mut g, 0.0, 4),
                    cond: Some(CondLogits {
                        real: consts(&mut g, 0.0, 4),
                        fake: consts(&mut g, 0.0, 4),
                        mismatched: consts(&mut g, 0.0, 4),
                    }),
                })
                .collect();
            let d = discriminator_loss(&mut g, &per).unwrap();
            assert!((g.value(d.uncond).item() as f64 - 2.0 * m as f64 * ln2).abs() < 1e-6);
            assert!((g.value(d.cond.unwrap()).item() as f64 - 3.0 * m as f64 * ln2).abs() < 1e-6);
            let gl: Vec<GenLogits> =
                (0..m).map(|_| GenLogits { fake_uncond: consts(&mut g, 0.0, 4), fake_cond: Some(consts(&mut g, 0.0, 4)) }).collect();
            let l = generator_loss(&mut g, &gl, None).unwrap();
            assert!((g.value(l.total).item() as f64 - 2.0 * m as f64 * ln2).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_discriminator_has_near_zero_loss() {
        let mut g = Graph::new();
        let per = [DiscLogits {
            real_uncond: consts(&mut g, 1e6, 3),
            fake_uncond: consts(&mut g, -1e6, 3),
            cond: Some(CondLogits {
                real: consts(&mut g, 50.0, 3),
                fake: consts(&mut g, -50.0, 3),
                mismatched: consts(&mut g, -50.0, 3),
            }),
        }];
        let d = discriminator_loss(&mut g, &per).unwrap();
        let v = g.value(d.total).item() as f64;
        assert!(v < 5.0 * 3e-9, "{v}");
    }

    #[test]
    fn discriminator_loss_is_batch_permutation_invariant() {
        let vals = [0.3f32, -1.2, 2.5, 0.0];
        let rev: Vec<f32> = vals.iter().rev().copied().collect();
        let run = |v: &[f32]| {
            let mut g = Graph::new();
            let mk = |g: &mut Graph<f32>, s: f32| g.constant(Tensor::new(&[4], v.iter().map(|x| x * s).collect()).unwrap());
            let per = [DiscLogits {
                real_uncond: mk(&mut g, 1.0),
                fake_uncond: mk(&mut g, -0.5),
                cond: Some(CondLogits { real: mk(&mut g, 2.0), fake: mk(&mut g, 0.7), mismatched: mk(&mut g, -1.1) }),
            }];
            let d = discriminator_loss(&mut g, &per).unwrap();
            g.value(d.total).item()
        };
        assert!((run(&vals) - run(&rev)).abs() < 1e-6);
    }

    #[test]
    fn generator_loss_decreases_toward_real() {
        let mut prev = f64::INFINITY;
        for x in [-30.0f32, -5.0, -1.0, 0.0, 1.0, 5.0, 15.0] {
            let mut g = Graph::new();
            let gl = [GenLogits { fake_uncond: consts(&mut g, x, 2), fake_cond: Some(consts(&mut g, 0.0, 2)) }];
            let l = generator_loss(&mut g, &gl, None).unwrap();
            let v = g.value(l.total).item() as f64;
            assert!(v.is_finite() && v < prev);
            prev = v;
        }
    }

    #[test]
    fn nan_logits_abort_with_numerical_error() {
        let mut g = Graph::new();
        let bad = g.constant(Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap());
        let ok = consts(&mut g, 0.0, 2);
        let per = [DiscLogits { real_uncond: ok, fake_uncond: bad, cond: None }];
        assert!(matches!(discriminator_loss(&mut g, &per), Err(Error::Numerical(_))));
    }

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[3], v));
        s
    }

    #[test]
    fn ema_closed_forms() {
        let live = store(4.0);
        let mut shadow = store(0.0);
        ema_update(&mut shadow, &live, 0.5).unwrap();
        assert_eq!(shadow.get(shadow.ids().next().unwrap()).data(), &[2.0; 3]);
        ema_update(&mut shadow, &live, 0.5).unwrap();
        assert_eq!(shadow.get(shadow.ids().next().unwrap()).data(), &[3.0; 3]);

        let mut copy = store(-1.0);
        ema_update(&mut copy, &live, 0.0).unwrap();
        assert_eq!(copy.get(copy.ids().next().unwrap()).data(), &[4.0; 3]);
        let mut frozen = store(-1.0);
        ema_update(&mut frozen, &live, 1.0).unwrap();
        assert_eq!(frozen.get(frozen.ids().next().unwrap()).data(), &[-1.0; 3]);

        let mut other = ParamStore::new();
        other.add("w", Tensor::<f32>::zeros(&[2]));
        assert!(ema_update(&mut other, &live, 0.5).is_err());
    }

    #[test]
    fn warmup_never_exceeds_decay() {
        assert_eq!(warmup_decay(0.999, 0), 0.1);
        assert_eq!(warmup_decay(0.5, 1000), 0.5);
        assert!(warmup_decay(0.999, 100) < 0.92);
    }

    #[test]
    fn mismatches_avoid_same_content() {
        use crate::synth::{Color, Shape};
        let c = |s, col| Some(Content { shape: s, color: col });
        let contents = vec![c(Shape::Circle, Color::Red), c(Shape::Circle, Color::Red), c(Shape::Square, Color::Blue)];
        let caps: Vec<String> = vec!["a red circle".into(), "this is a red circle".into(), "a blue square".into()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let m = mismatch_indices(&caps, &contents, &mut rng);
            assert_eq!(m[0], 2);
            assert_eq!(m[1], 2);
            assert_ne!(m[2], 2);
        }
        let same = vec![c(Shape::Circle, Color::Red); 2];
        assert_eq!(mismatch_indices(&caps[..2], &same, &mut rng), vec![1, 0]);
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let bad = TrainConfig { ema_decay: 1.5, ..c.clone() };
        assert!(TrainConfig::from_toml(&bad.to_toml()).is_err());
        let text = c.to_toml().replace("variant = \"fdgan\"", "variant = \"bogus\"");
        assert!(TrainConfig::from_toml(&text).is_err());
    }
}
