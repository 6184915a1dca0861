//! Ablation variants and the networks they assemble.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use fdgan_tensor::ParamStore;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Discriminator, DiscriminatorConfig, HeadConditioning};
use crate::error::{Error, Result};
use crate::generator::{BaseConditioning, Generator, GeneratorConfig};
use crate::matching::ImageEncoder;
use crate::text::{TextEncoder, TextEncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "baseline+adain")]
    BaselineAdain,
    #[serde(rename = "baseline+fdbg")]
    BaselineFdbg,
    #[serde(rename = "baseline+fdjd")]
    BaselineFdjd,
    #[serde(rename = "fdgan")]
    Fdgan,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::BaselineAdain, Variant::BaselineFdbg, Variant::BaselineFdjd, Variant::Fdgan];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineAdain => "baseline+adain",
            Variant::BaselineFdbg => "baseline+fdbg",
            Variant::BaselineFdjd => "baseline+fdjd",
            Variant::Fdgan => "fdgan",
        }
    }

    pub fn generator_conditioning(self) -> BaseConditioning {
        match self {
            Variant::Baseline | Variant::BaselineFdjd => BaseConditioning::Concat,
            Variant::BaselineAdain => BaseConditioning::AdaIn,
            Variant::BaselineFdbg | Variant::Fdgan => BaseConditioning::AddIn,
        }
    }

    pub fn discriminator_conditioning(self) -> HeadConditioning {
        match self {
            Variant::BaselineFdjd | Variant::Fdgan => HeadConditioning::AddIn,
            _ => HeadConditioning::Concat,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Variant::name).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}; valid variants: {}", Self::valid_names())))
    }
}

/// Widths shared by every variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub z_dim: usize,
    pub base_spatial: usize,
    pub num_base_blocks: usize,
    pub base_channels: usize,
    pub num_stages: usize,
    pub embed_dim: usize,
    pub text_hidden: usize,
    pub max_caption_len: usize,
    pub condition_dim: usize,
    pub disc_base_channels: usize,
    pub disc_max_channels: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            z_dim: 100,
            base_spatial: 4,
            num_base_blocks: 4,
            base_channels: 128,
            num_stages: 2,
            embed_dim: 32,
            text_hidden: 32,
            max_caption_len: 8,
            condition_dim: 64,
            disc_base_channels: 16,
            disc_max_channels: 128,
        }
    }
}

impl ModelDims {
    pub fn text_dim(&self) -> usize {
        2 * self.text_hidden
    }

    pub fn generator_config(&self, variant: Variant) -> GeneratorConfig {
        GeneratorConfig {
            z_dim: self.z_dim,
            base_spatial: self.base_spatial,
            num_base_blocks: self.num_base_blocks,
            base_channels: self.base_channels,
            num_stages: self.num_stages,
            sentence_dim: self.text_dim(),
            word_dim: self.text_dim(),
            condition_dim: self.condition_dim,
            conditioning: variant.generator_conditioning(),
        }
    }

    pub fn discriminator_configs(&self, variant: Variant) -> Vec<DiscriminatorConfig> {
        self.generator_config(variant)
            .output_resolutions()
            .into_iter()
            .map(|resolution| DiscriminatorConfig {
                resolution,
                base_channels: self.disc_base_channels,
                max_channels: self.disc_max_channels,
                sentence_dim: self.text_dim(),
                condition_dim: self.condition_dim,
                conditioning: variant.discriminator_conditioning(),
            })
            .collect()
    }

    pub fn text_config(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_per_direction: self.text_hidden,
            max_len: self.max_caption_len,
        }
    }
}

/// Network structure of one variant. Parameters live in [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub dims: ModelDims,
    pub text: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub text: ParamStore<f32>,
    pub image_encoder: ParamStore<f32>,
    pub generator: ParamStore<f32>,
    pub discriminators: Vec<ParamStore<f32>>,
}

impl ModelParams {
    /// Named stores in a fixed order, as written to checkpoints.
    pub fn named(&self) -> Vec<(String, &ParamStore<f32>)> {
        let mut v = vec![
            ("text".to_string(), &self.text),
            ("image_encoder".to_string(), &self.image_encoder),
            ("generator".to_string(), &self.generator),
        ];
        v.extend(self.discriminators.iter().enumerate().map(|(i, s)| (format!("discriminator{i}"), s)));
        v
    }
}

/// Builds the networks of `variant`; initialisation is drawn from `rng`.
pub fn build_variant<R: Rng + ?Sized>(
    variant: Variant,
    dims: &ModelDims,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Model, ModelParams)> {
    let mut text_store = ParamStore::new();
    let text = TextEncoder::new("text", dims.text_config(vocab_size), &mut text_store, rng);
    let mut image_store = ParamStore::new();
    let image_encoder = ImageEncoder::new("image", dims.text_dim(), &mut image_store, rng);
    let mut gen_store = ParamStore::new();
    let generator = Generator::new("gen", dims.generator_config(variant), &mut gen_store, rng)?;
    let mut discriminators = Vec::new();
    let mut disc_stores = Vec::new();
    for (i, cfg) in dims.discriminator_configs(variant).into_iter().enumerate() {
        let mut s = ParamStore::new();
        discriminators.push(Discriminator::new(&format!("disc{i}"), cfg, &mut s, rng)?);
        disc_stores.push(s);
    }
    Ok((
        Model { variant, dims: *dims, text, image_encoder, generator, discriminators },
        ModelParams { text: text_store, image_encoder: image_store, generator: gen_store, discriminators: disc_stores },
    ))
}

/// Scalar parameter counts of the adversarial networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub generator: usize,
    pub discriminators: usize,
    /// Per top-level module, e.g. `gen.f_re` or `disc0.cond`.
    pub modules: BTreeMap<String, usize>,
}

impl ParamCensus {
    pub fn of(params: &ModelParams) -> Self {
        let mut modules = params.generator.census(2);
        for d in &params.discriminators {
            modules.extend(d.census(2));
        }
        Self {
            generator: params.generator.num_scalars(),
            discriminators: params.discriminators.iter().map(ParamStore::num_scalars).sum(),
            modules,
        }
    }

    pub fn total(&self) -> usize {
        self.generator + self.discriminators
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn census(v: Variant, dims: &ModelDims) -> ParamCensus {
        let (_, p) = build_variant(v, dims, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ParamCensus::of(&p)
    }

    #[test]
    fn names_round_trip_and_reject_unknown() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        let err = "bogus".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("baseline+fdjd"));
    }

    #[test]
    fn f_re_width_per_variant() {
        let dims = ModelDims::default();
        for v in Variant::ALL {
            let (m, _) = build_variant(v, &dims, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let want = match v {
                Variant::Baseline | Variant::BaselineFdjd => dims.z_dim + dims.text_dim(),
                _ => dims.z_dim,
            };
            assert_eq!(m.generator.f_re.in_dim, want, "{v}");
        }
    }

    #[test]
    fn fdgan_is_smaller_than_baseline() {
        let dims = ModelDims::default();
        let fd = census(Variant::Fdgan, &dims);
        let base = census(Variant::Baseline, &dims);
        assert!(fd.generator < base.generator);
        assert!(fd.total() < base.total());
    }

    #[test]
    fn adain_and_fdbg_differ_only_by_the_scale_path() {
        let dims = ModelDims::default();
        let adain = census(Variant::BaselineAdain, &dims);
        let fdbg = census(Variant::BaselineFdbg, &dims);
        assert_eq!(adain.discriminators, fdbg.discriminators);
        // each AdaIN site carries one extra linear map (cond_dim -> 2 C_out) for the scale
        let extra: usize = (0..dims.num_base_blocks)
            .map(|k| {
                let c = 2 * (dims.base_channels >> (k + 1));
                dims.condition_dim * c + c
            })
            .sum();
        assert_eq!(adain.generator - fdbg.generator, extra);
    }

    #[test]
    fn ablation_matrix_changes_only_the_named_components() {
        let dims = ModelDims::default();
        let base = census(Variant::Baseline, &dims);
        let fdjd = census(Variant::BaselineFdjd, &dims);
        let fdbg = census(Variant::BaselineFdbg, &dims);
        let fdgan = census(Variant::Fdgan, &dims);
        assert_eq!(base.generator, fdjd.generator);
        assert_eq!(fdbg.generator, fdgan.generator);
        assert_eq!(base.discriminators, fdbg.discriminators);
        assert_eq!(fdjd.discriminators, fdgan.discriminators);
    }
}
