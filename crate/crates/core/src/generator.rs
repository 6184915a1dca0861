//! Base generator and attention refinement stages.
//!
//! The base generator maps noise through a fully connected layer and four
//! upsampling blocks. How the sentence embedding enters depends on
//! [`BaseConditioning`]: as AddIN biases (the factor-decomposed form), as
//! condition-driven AdaIN, or concatenated with the noise (the baseline).
//! Each refinement stage attends from image regions to word features,
//! concatenates the context with the hidden map and upsamples once more.

use fdgan_tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::norm::{AddIn, CondAdaIn, ConditionTransform, InstanceNorm};
use crate::tags;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseConditioning {
    /// `concat(z, c_g)` into the first layer; blocks use plain IN.
    Concat,
    /// Noise-only first layer; each block adds a projection of `T_GC(c_g)`.
    AddIn,
    /// Noise-only first layer; each block scales and shifts by `T_GC(c_g)`.
    AdaIn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub base_spatial: usize,
    pub num_base_blocks: usize,
    pub base_channels: usize,
    /// Number of emitted images `m`.
    pub num_stages: usize,
    pub sentence_dim: usize,
    pub word_dim: usize,
    /// Output width of the condition transform.
    pub condition_dim: usize,
    pub conditioning: BaseConditioning,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self {
            z_dim: 100,
            base_spatial: 4,
            num_base_blocks: 4,
            base_channels: 128,
            num_stages: 2,
            sentence_dim: 64,
            word_dim: 64,
            condition_dim: 64,
            conditioning: BaseConditioning::AddIn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.z_dim,
            self.base_spatial,
            self.num_base_blocks,
            self.num_stages,
            self.sentence_dim,
            self.word_dim,
            self.condition_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config(format!("generator dimensions must be positive: {self:?}")));
        }
        let div = 1usize << self.num_base_blocks;
        if self.base_channels < div || self.base_channels % div != 0 {
            return Err(Error::config(format!(
                "base_channels {} must be a positive multiple of {div} to halve across {} blocks",
                self.base_channels, self.num_base_blocks
            )));
        }
        Ok(())
    }

    /// Channel count after `k` base blocks.
    pub fn channels_after(&self, k: usize) -> usize {
        self.base_channels >> k
    }

    /// Channel count of every refinement stage.
    pub fn stage_channels(&self) -> usize {
        self.channels_after(self.num_base_blocks)
    }

    pub fn first_resolution(&self) -> usize {
        self.base_spatial << self.num_base_blocks
    }

    pub fn output_resolutions(&self) -> Vec<usize> {
        (0..self.num_stages).map(|i| self.first_resolution() << i).collect()
    }

    /// Input width of the first fully connected layer.
    pub fn f_re_input_width(&self) -> usize {
        match self.conditioning {
            BaseConditioning::Concat => self.z_dim + self.sentence_dim,
            _ => self.z_dim,
        }
    }
}

/// Normalization site of an upsampling block.
#[derive(Clone, Debug)]
pub enum NormSite {
    Affine(InstanceNorm),
    AddIn(AddIn),
    AdaIn(CondAdaIn),
}

impl NormSite {
    fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        kind: Option<BaseConditioning>,
        cond_dim: usize,
        channels: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        match kind {
            Some(BaseConditioning::AddIn) => NormSite::AddIn(AddIn::new(name, cond_dim, channels, store, rng)),
            Some(BaseConditioning::AdaIn) => NormSite::AdaIn(CondAdaIn::new(name, cond_dim, channels, store, rng)),
            Some(BaseConditioning::Concat) | None => NormSite::Affine(InstanceNorm::new(name, channels, store)),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var, cond: Option<Var>) -> Result<Var> {
        match (self, cond) {
            (NormSite::Affine(n), _) => n.forward(g, p, x),
            (NormSite::AddIn(n), Some(c)) => n.forward(g, p, x, c),
            (NormSite::AdaIn(n), Some(c)) => n.forward(g, p, x, c),
            _ => Err(Error::config("conditional normalization site called without a condition")),
        }
    }
}

/// Nearest x2 upsample, 3x3 conv to twice the output channels, norm, GLU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: Conv2d,
    pub norm: NormSite,
    pub out_channels: usize,
}

impl UpBlock {
    fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kind: Option<BaseConditioning>,
        cond_dim: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::same3(&format!("{name}.conv"), cin, 2 * cout, false, store, rng),
            norm: NormSite::new(&format!("{name}.norm"), kind, cond_dim, 2 * cout, store, rng),
            out_channels: cout,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, h: Var, cond: Option<Var>) -> Result<Var> {
        let x = g.upsample_nearest2x(h)?;
        let x = self.conv.forward(g, p, x)?;
        let x = self.norm.forward(g, p, x, cond)?;
        Ok(g.glu(x)?)
    }
}

/// conv, IN, GLU, conv, IN, plus the identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResBlock {
    fn new<F: Float, R: Rng + ?Sized>(name: &str, c: usize, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::same3(&format!("{name}.conv1"), c, 2 * c, false, store, rng),
            norm1: InstanceNorm::new(&format!("{name}.norm1"), 2 * c, store),
            conv2: Conv2d::same3(&format!("{name}.conv2"), c, c, false, store, rng),
            norm2: InstanceNorm::new(&format!("{name}.norm2"), c, store),
        }
    }

    fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, p, x)?;
        let y = self.norm1.forward(g, p, y)?;
        let y = g.glu(y)?;
        let y = self.conv2.forward(g, p, y)?;
        let y = self.norm2.forward(g, p, y)?;
        Ok(g.add(x, y)?)
    }
}

/// Region-to-word attention output.
#[derive(Clone, Copy, Debug)]
pub struct AttentionContext {
    /// `(B, C, H, W)`, same shape as the query map.
    pub context: Var,
    /// `(B, H*W, T)`; rows sum to one over the valid words.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionStage {
    word_proj: Linear,
    res: [ResBlock; 2],
    up: UpBlock,
    channels: usize,
}

impl AttentionStage {
    fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        word_dim: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let c2 = 2 * channels;
        Self {
            word_proj: Linear::new(&format!("{name}.word_proj"), word_dim, channels, false, store, rng),
            res: [
                ResBlock::new(&format!("{name}.res0"), c2, store, rng),
                ResBlock::new(&format!("{name}.res1"), c2, store, rng),
            ],
            up: UpBlock::new(&format!("{name}.up"), c2, channels, None, 0, store, rng),
            channels,
        }
    }

    /// For each region, a softmax over valid words of `h_j . e'_i`, and the
    /// weighted sum of projected words.
    pub fn attend<F: Float>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        h: Var,
        words: Var,
        valid: &[usize],
    ) -> Result<AttentionContext> {
        let (b, c, hh, ww) = dims4(g, h)?;
        let ws = g.shape(words).to_vec();
        if ws.len() != 3 || ws[0] != b || ws[2] != self.word_proj.in_dim {
            return Err(Error::config(format!(
                "word features must be (B={b}, T, {}), got {ws:?}",
                self.word_proj.in_dim
            )));
        }
        if c != self.channels {
            return Err(Error::config(format!("attention expects {} channels, got {c}", self.channels)));
        }
        let t = ws[1];
        let flat = g.reshape(words, &[b * t, ws[2]])?;
        let proj = self.word_proj.forward(g, p, flat)?;
        let proj = g.reshape(proj, &[b, t, c])?;
        let regions = g.reshape(h, &[b, c, hh * ww])?;
        let logits = g.bmm(regions, proj, true, true)?;
        let weights = g.masked_softmax(logits, valid)?;
        let ctx = g.bmm(proj, weights, true, true)?;
        let context = g.reshape(ctx, &[b, c, hh, ww])?;
        Ok(AttentionContext { context, weights })
    }

    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        h: Var,
        words: Var,
        valid: &[usize],
    ) -> Result<Var> {
        let ctx = self.attend(g, p, h, words, valid)?;
        self.refine(g, p, h, ctx.context)
    }

    /// Residual refinement and upsampling of `concat(h, context)`.
    pub fn refine<F: Float>(&self, g: &mut Graph<F>, p: &Bound, h: Var, context: Var) -> Result<Var> {
        let mut x = g.concat(&[h, context], 1)?;
        for r in &self.res {
            x = r.forward(g, p, x)?;
        }
        self.up.forward(g, p, x, None)
    }
}

/// 3x3 conv to RGB followed by tanh.
#[derive(Clone, Debug)]
pub struct ImageHead {
    pub conv: Conv2d,
}

impl ImageHead {
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, h: Var) -> Result<Var> {
        let x = self.conv.forward(g, p, h)?;
        Ok(g.tanh(x))
    }
}

/// Per-sample text conditioning consumed by the generator.
#[derive(Clone, Copy, Debug)]
pub struct TextCondition<'a> {
    /// `(B, D_g)`
    pub sentence: Var,
    /// `(B, T, D_l)`
    pub words: Var,
    pub valid: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub f_re: Linear,
    pub transform: Option<ConditionTransform>,
    pub blocks: Vec<UpBlock>,
    pub stages: Vec<AttentionStage>,
    pub heads: Vec<ImageHead>,
}

impl Generator {
    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        config: GeneratorConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c0 = config.base_channels;
        let s = config.base_spatial;
        let f_re = Linear::new(&format!("{name}.f_re"), config.f_re_input_width(), c0 * s * s, true, store, rng);
        let transform = match config.conditioning {
            BaseConditioning::Concat => None,
            _ => Some(ConditionTransform::new(
                &format!("{name}.t_gc"),
                config.sentence_dim,
                config.condition_dim,
                store,
                rng,
            )),
        };
        let blocks = (0..config.num_base_blocks)
            .map(|k| {
                UpBlock::new(
                    &format!("{name}.base{k}"),
                    config.channels_after(k),
                    config.channels_after(k + 1),
                    Some(config.conditioning),
                    config.condition_dim,
                    store,
                    rng,
                )
            })
            .collect();
        let cs = config.stage_channels();
        let stages = (1..config.num_stages)
            .map(|i| AttentionStage::new(&format!("{name}.stage{i}"), cs, config.word_dim, store, rng))
            .collect();
        let heads = (0..config.num_stages)
            .map(|i| ImageHead { conv: Conv2d::same3(&format!("{name}.to_image{i}"), cs, 3, true, store, rng) })
            .collect();
        Ok(Self { config, f_re, transform, blocks, stages, heads })
    }

    /// Fully connected layer with reshape to `(B, C0, s, s)`. The sentence
    /// embedding is required exactly when the configuration concatenates it.
    pub fn f_re<F: Float>(&self, g: &mut Graph<F>, p: &Bound, z: Var, sentence: Option<Var>) -> Result<Var> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.config.z_dim {
            return Err(Error::config(format!("noise must be (B, {}), got {zs:?}", self.config.z_dim)));
        }
        let input = match (self.config.conditioning, sentence) {
            (BaseConditioning::Concat, Some(c)) => g.concat(&[z, c], 1)?,
            (BaseConditioning::Concat, None) => {
                return Err(Error::config("concat conditioning needs the sentence embedding"))
            }
            _ => z,
        };
        let x = self.f_re.forward(g, p, input)?;
        let (c0, s) = (self.config.base_channels, self.config.base_spatial);
        Ok(g.reshape(x, &[zs[0], c0, s, s])?)
    }

    /// `T_GC(c_g)`, or `None` for concat conditioning.
    pub fn aligned_condition<F: Float>(&self, g: &mut Graph<F>, p: &Bound, sentence: Var) -> Result<Option<Var>> {
        self.transform.as_ref().map(|t| t.forward(g, p, sentence)).transpose()
    }

    /// Base hidden map `h_0` at the first output resolution.
    pub fn fdbg_forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, z: Var, sentence: Var) -> Result<Var> {
        g.tag(z, tags::NOISE);
        g.tag(sentence, tags::SENTENCE);
        let cond = self.aligned_condition(g, p, sentence)?;
        let mut h = self.f_re(g, p, z, Some(sentence))?;
        for block in &self.blocks {
            h = block.forward(g, p, h, cond)?;
        }
        Ok(h)
    }

    /// All `m` images, coarsest first.
    pub fn generate<F: Float>(&self, g: &mut Graph<F>, p: &Bound, z: Var, text: TextCondition<'_>) -> Result<Vec<Var>> {
        g.tag(text.words, tags::WORDS);
        let mut h = self.fdbg_forward(g, p, z, text.sentence)?;
        let mut images = vec![self.heads[0].forward(g, p, h)?];
        for (stage, head) in self.stages.iter().zip(&self.heads[1..]) {
            h = stage.forward(g, p, h, text.words, text.valid)?;
            images.push(head.forward(g, p, h)?);
        }
        Ok(images)
    }

    /// Forward-only generation outside a training graph.
    pub fn sample<F: Float>(
        &self,
        store: &ParamStore<F>,
        z: &Tensor<F>,
        sentence: &Tensor<F>,
        words: &Tensor<F>,
        valid: &[usize],
    ) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let (zv, sv, wv) = (g.constant(z.clone()), g.constant(sentence.clone()), g.constant(words.clone()));
        let out = self.generate(&mut g, &p, zv, TextCondition { sentence: sv, words: wv, valid })?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

pub(crate) fn dims4<F: Float>(g: &Graph<F>, x: Var) -> Result<(usize, usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::config(format!("expected a (B, C, H, W) map, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdgan_tensor::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(conditioning: BaseConditioning) -> GeneratorConfig {
        GeneratorConfig {
            z_dim: 6,
            base_spatial: 2,
            num_base_blocks: 2,
            base_channels: 8,
            num_stages: 2,
            sentence_dim: 5,
            word_dim: 4,
            condition_dim: 3,
            conditioning,
        }
    }

    fn build(cfg: GeneratorConfig) -> (Generator, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = Generator::new("g", cfg, &mut store, &mut rng).unwrap();
        (gen, store)
    }

    fn inputs(cfg: &GeneratorConfig, b: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            init::normal(&[b, cfg.z_dim], 1.0, &mut rng),
            init::normal(&[b, cfg.sentence_dim], 1.0, &mut rng),
            init::normal(&[b, 3, cfg.word_dim], 1.0, &mut rng),
        )
    }

    #[test]
    fn desk_f_re_shape() {
        let mut cfg = GeneratorConfig::desk();
        cfg.base_channels = 256;
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = Generator::new("g", cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let z = g.constant(init::normal(&[1, 100], 1.0, &mut rng));
        let h = gen.f_re(&mut g, &p, z, None).unwrap();
        assert_eq!(g.shape(h), &[1, 256, 4, 4]);
        let c = g.constant(Tensor::zeros(&[1, 64]));
        let cond = gen.aligned_condition(&mut g, &p, c).unwrap();
        let up = gen.blocks[0].forward(&mut g, &p, h, cond).unwrap();
        assert_eq!(g.shape(up), &[1, 128, 8, 8]);
        assert_eq!(cfg.output_resolutions(), vec![64, 128]);
    }

    #[test]
    fn f_re_rejects_wrong_noise_width() {
        let (gen, store) = build(tiny(BaseConditioning::AddIn));
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let z = g.constant(Tensor::zeros(&[1, 7]));
        assert!(matches!(gen.f_re(&mut g, &p, z, None), Err(Error::Config(_))));
    }

    #[test]
    fn f_re_zero_weights_give_bias() {
        let (gen, mut store) = build(tiny(BaseConditioning::AddIn));
        store.get_mut(gen.f_re.weight).data_mut().fill(0.0);
        store.get_mut(gen.f_re.bias.unwrap()).data_mut().fill(0.25);
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let z = g.constant(init::normal(&[2, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let h = gen.f_re(&mut g, &p, z, None).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shapes_bounds_and_determinism() {
        let cfg = tiny(BaseConditioning::AddIn);
        let (gen, store) = build(cfg);
        let (z, s, w) = inputs(&cfg, 2, 9);
        let a = gen.sample(&store, &z, &s, &w, &[3, 2]).unwrap();
        let b = gen.sample(&store, &z, &s, &w, &[3, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), &[2, 3, 8, 8]);
        assert_eq!(a[1].shape(), &[2, 3, 16, 16]);
        for img in &a {
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_transform_removes_condition() {
        let cfg = tiny(BaseConditioning::AddIn);
        let (gen, mut store) = build(cfg);
        let t = gen.transform.as_ref().unwrap();
        for id in [t.fc2.weight, t.fc2.bias.unwrap()] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let (z, s1, _) = inputs(&cfg, 1, 1);
        let (_, s2, _) = inputs(&cfg, 1, 2);
        let run = |s: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = g.bind(&store, false);
            let (zv, sv) = (g.constant(z.clone()), g.constant(s.clone()));
            let h = gen.fdbg_forward(&mut g, &p, zv, sv).unwrap();
            g.value(h).clone()
        };
        assert_eq!(run(&s1), run(&s2));
    }

    #[test]
    fn nonzero_transform_responds_to_condition() {
        let cfg = tiny(BaseConditioning::AddIn);
        let (gen, store) = build(cfg);
        let (z, s1, _) = inputs(&cfg, 1, 1);
        let (_, s2, _) = inputs(&cfg, 1, 2);
        let run = |s: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = g.bind(&store, false);
            let (zv, sv) = (g.constant(z.clone()), g.constant(s.clone()));
            let h = gen.fdbg_forward(&mut g, &p, zv, sv).unwrap();
            g.value(h).clone()
        };
        assert_ne!(run(&s1), run(&s2));
    }

    #[test]
    fn f_re_width_depends_on_conditioning() {
        let (fd, _) = build(tiny(BaseConditioning::AddIn));
        let (base, _) = build(tiny(BaseConditioning::Concat));
        assert_eq!(fd.f_re.in_dim, 6);
        assert_eq!(base.f_re.in_dim, 6 + 5);
    }

    #[test]
    fn fdbg_never_concatenates_noise_with_sentence() {
        for (kind, expect) in [(BaseConditioning::AddIn, 0), (BaseConditioning::AdaIn, 0), (BaseConditioning::Concat, 1)] {
            let cfg = tiny(kind);
            let (gen, store) = build(cfg);
            let (z, s, _) = inputs(&cfg, 1, 1);
            let mut g = Graph::new();
            let p = g.bind(&store, false);
            let (zv, sv) = (g.constant(z), g.constant(s));
            gen.fdbg_forward(&mut g, &p, zv, sv).unwrap();
            let hits = g
                .concat_events()
                .iter()
                .filter(|e| tags::mixes(&e.input_tags, tags::NOISE, tags::SENTENCE))
                .count();
            assert_eq!(hits, expect, "{kind:?}");
        }
    }

    fn attention_stage() -> (AttentionStage, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (AttentionStage::new("a", 2, 2, &mut store, &mut rng), store)
    }

    #[test]
    fn identical_words_get_equal_weight() {
        let (stage, store) = attention_stage();
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let h = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.3 - 0.5));
        let words = g.constant(Tensor::new(&[1, 3, 2], vec![0.4, -1.0, 0.4, -1.0, 9.0, 9.0]).unwrap());
        let a = stage.attend(&mut g, &p, h, words, &[2]).unwrap();
        let w = g.value(a.weights);
        assert_eq!(w.shape(), &[1, 4, 3]);
        for r in 0..4 {
            assert!((w.data()[r * 3] - 0.5).abs() < 1e-12);
            assert!((w.data()[r * 3 + 1] - 0.5).abs() < 1e-12);
            assert_eq!(w.data()[r * 3 + 2], 0.0);
        }
        // context equals the shared projected word at every region
        let wp = store.get(stage.word_proj.weight);
        let e: Vec<f64> = (0..2).map(|c| wp.data()[c * 2] * 0.4 - wp.data()[c * 2 + 1]).collect();
        let ctx = g.value(a.context);
        for c in 0..2 {
            for j in 0..4 {
                assert!((ctx.data()[c * 4 + j] - e[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_logits_follow_dot_products() {
        let (stage, mut store) = attention_stage();
        // identity word projection
        store.get_mut(stage.word_proj.weight).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        // one region with features (1, 0); words e1 = (0, 0), e2 = (ln 3, 0)
        let mut hv = vec![0.0; 8];
        hv[0] = 1.0;
        let h = g.constant(Tensor::new(&[1, 2, 2, 2], hv).unwrap());
        let words = g.constant(Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 3f64.ln(), 0.0]).unwrap());
        let a = stage.attend(&mut g, &p, h, words, &[2]).unwrap();
        let w = g.value(a.weights).data();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        for r in 0..4 {
            assert!((w[r * 2] + w[r * 2 + 1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_valid_length_is_rejected() {
        let (stage, store) = attention_stage();
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let h = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let words = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(stage.attend(&mut g, &p, h, words, &[0]).is_err());
    }

    #[test]
    fn stage_doubles_and_tolerates_zero_context() {
        let (stage, store) = attention_stage();
        let mut g = Graph::new();
        let p = g.bind(&store, false);
        let h = g.constant(init::normal(&[1, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
        let zero = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let out = stage.refine(&mut g, &p, h, zero).unwrap();
        assert_eq!(g.shape(out), &[1, 2, 8, 8]);
        assert!(g.value(out).first_non_finite().is_none());
    }

    #[test]
    fn zero_head_gives_squashed_bias() {
        let cfg = tiny(BaseConditioning::AddIn);
        let (gen, mut store) = build(cfg);
        store.get_mut(gen.heads[0].conv.weight).data_mut().fill(0.0);
        store.get_mut(gen.heads[0].conv.bias.unwrap()).data_mut().copy_from_slice(&[0.5, -2.0, 0.0]);
        let (z, s, w) = inputs(&cfg, 1, 4);
        let img = &gen.sample(&store, &z, &s, &w, &[3]).unwrap()[0];
        for (c, want) in [0.5f64.tanh(), (-2f64).tanh(), 0.0].into_iter().enumerate() {
            assert!(img.data()[c * 64..(c + 1) * 64].iter().all(|&v| (v - want).abs() < 1e-15));
        }
    }

    #[test]
    fn end_to_end_gradients() {
        for kind in [BaseConditioning::AddIn, BaseConditioning::Concat, BaseConditioning::AdaIn] {
            let cfg = tiny(kind);
            let (gen, store) = build(cfg);
            let (z, s, w) = inputs(&cfg, 2, 8);
            let mut all = vec![z, s, w];
            all.extend(store.iter().map(|(_, _, t)| t.clone()));
            let r = crate::gradcheck::grad_check_fn(
                "generator",
                |g, v| {
                    let p = Bound::from_vars(v[3..].to_vec());
                    let text = TextCondition { sentence: v[1], words: v[2], valid: &[3, 2] };
                    let imgs = gen.generate(g, &p, v[0], text).map_err(crate::gradcheck::lift)?;
                    let a = g.mean_all(imgs[0]);
                    let b = g.sum_all(imgs[1]);
                    g.add(a, b)
                },
                &all,
                Some(4),
            )
            .unwrap();
            assert!(r.max_relative_error < 1e-3, "{kind:?} {r:?}");
        }
    }
}
