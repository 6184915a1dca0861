//! Per-resolution discriminators with an unconditional and a conditional
//! head on a shared downsampling trunk.

use fdgan_tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::dims4;
use crate::layers::Conv2d;
use crate::norm::{AddIn, ConditionTransform};
use crate::tags;

pub const LEAKY_SLOPE: f64 = 0.2;
/// Spatial size at the end of every trunk.
pub const TRUNK_SPATIAL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadConditioning {
    /// Replicated `c_g` concatenated with the trunk features.
    Concat,
    /// `T_GC(c_g)` projected to an AddIN bias inside the conditional block.
    AddIn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub sentence_dim: usize,
    pub condition_dim: usize,
    pub conditioning: HeadConditioning,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < TRUNK_SPATIAL || !self.resolution.is_power_of_two() {
            return Err(Error::config(format!(
                "discriminator resolution {} must be a power of two >= {TRUNK_SPATIAL}",
                self.resolution
            )));
        }
        if [self.base_channels, self.max_channels, self.sentence_dim, self.condition_dim].contains(&0) {
            return Err(Error::config(format!("discriminator dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn num_downsamples(&self) -> usize {
        (self.resolution / TRUNK_SPATIAL).trailing_zeros() as usize
    }

    pub fn trunk_channels(&self) -> Vec<usize> {
        (0..self.num_downsamples()).map(|i| (self.base_channels << i).min(self.max_channels)).collect()
    }

    pub fn feature_channels(&self) -> usize {
        self.trunk_channels().last().copied().unwrap_or(3)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorOutput {
    /// `(B)`
    pub uncond: Var,
    /// `(B)`
    pub cond: Var,
}

#[derive(Clone, Debug)]
pub enum CondHead {
    Concat { conv: Conv2d, out: Conv2d },
    AddIn { transform: ConditionTransform, conv: Conv2d, norm: AddIn, out: Conv2d },
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub trunk: Vec<Conv2d>,
    pub uncond_head: Conv2d,
    pub cond_head: CondHead,
}

impl Discriminator {
    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        config: DiscriminatorConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut cin = 3;
        let mut trunk = Vec::new();
        for (i, c) in config.trunk_channels().into_iter().enumerate() {
            trunk.push(Conv2d::new(&format!("{name}.down{i}"), cin, c, 4, 2, 1, true, store, rng));
            cin = c;
        }
        let c = cin;
        let k = TRUNK_SPATIAL;
        let uncond_head = Conv2d::new(&format!("{name}.uncond"), c, 1, k, 1, 0, true, store, rng);
        let cond_head = match config.conditioning {
            HeadConditioning::Concat => CondHead::Concat {
                conv: Conv2d::same3(&format!("{name}.cond.conv"), c + config.sentence_dim, c, true, store, rng),
                out: Conv2d::new(&format!("{name}.cond.out"), c, 1, k, 1, 0, true, store, rng),
            },
            HeadConditioning::AddIn => CondHead::AddIn {
                transform: ConditionTransform::new(
                    &format!("{name}.t_gc"),
                    config.sentence_dim,
                    config.condition_dim,
                    store,
                    rng,
                ),
                conv: Conv2d::same3(&format!("{name}.cond.conv"), c, c, false, store, rng),
                norm: AddIn::new(&format!("{name}.cond.norm"), config.condition_dim, c, store, rng),
                out: Conv2d::new(&format!("{name}.cond.out"), c, 1, k, 1, 0, true, store, rng),
            },
        };
        Ok(Self { config, trunk, uncond_head, cond_head })
    }

    /// Image `(B, 3, R, R)` to features `(B, C, 4, 4)`.
    pub fn features<F: Float>(&self, g: &mut Graph<F>, p: &Bound, image: Var) -> Result<Var> {
        let (_, c, h, w) = dims4(g, image)?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::config(format!("discriminator for {r}x{r} RGB got a {c}x{h}x{w} input")));
        }
        g.tag(image, tags::IMAGE);
        let mut x = image;
        for conv in &self.trunk {
            x = conv.forward(g, p, x)?;
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        Ok(x)
    }

    pub fn uncond_logit<F: Float>(&self, g: &mut Graph<F>, p: &Bound, features: Var) -> Result<Var> {
        let b = g.shape(features)[0];
        let y = self.uncond_head.forward(g, p, features)?;
        Ok(g.reshape(y, &[b])?)
    }

    pub fn cond_logit<F: Float>(&self, g: &mut Graph<F>, p: &Bound, features: Var, sentence: Var) -> Result<Var> {
        let b = g.shape(features)[0];
        let ss = g.shape(sentence).to_vec();
        if ss != [b, self.config.sentence_dim] {
            return Err(Error::config(format!(
                "sentence embedding must be ({b}, {}), got {ss:?}",
                self.config.sentence_dim
            )));
        }
        g.tag(sentence, tags::SENTENCE);
        let y = match &self.cond_head {
            CondHead::Concat { conv, out } => {
                let rep = g.broadcast_spatial(sentence, TRUNK_SPATIAL, TRUNK_SPATIAL)?;
                let x = g.concat(&[features, rep], 1)?;
                let x = conv.forward(g, p, x)?;
                let x = g.leaky_relu(x, LEAKY_SLOPE);
                out.forward(g, p, x)?
            }
            CondHead::AddIn { transform, conv, norm, out } => {
                let cond = transform.forward(g, p, sentence)?;
                let x = conv.forward(g, p, features)?;
                let x = norm.forward(g, p, x, cond)?;
                let x = g.leaky_relu(x, LEAKY_SLOPE);
                out.forward(g, p, x)?
            }
        };
        Ok(g.reshape(y, &[b])?)
    }

    pub fn discriminate<F: Float>(&self, g: &mut Graph<F>, p: &Bound, image: Var, sentence: Var) -> Result<DiscriminatorOutput> {
        let f = self.features(g, p, image)?;
        let uncond = self.uncond_logit(g, p, f)?;
        let cond = self.cond_logit(g, p, f, sentence)?;
        Ok(DiscriminatorOutput { uncond, cond })
    }

    /// Forward-only logits, as `(uncond, cond)` tensors.
    pub fn evaluate<F: Float>(
        &self,
        store: &ParamStore<F>,
        image: &Tensor<F>,
        sentence: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let (iv, sv) = (g.constant(image.clone()), g.constant(sentence.clone()));
        let out = self.discriminate(&mut g, &p, iv, sv)?;
        Ok((g.value(out.uncond).clone(), g.value(out.cond).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdgan_tensor::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(conditioning: HeadConditioning) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: 8,
            base_channels: 2,
            max_channels: 4,
            sentence_dim: 3,
            condition_dim: 3,
            conditioning,
        }
    }

    fn build(cfg: DiscriminatorConfig) -> (Discriminator, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let d = Discriminator::new("d", cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (d, store)
    }

    fn data(b: usize, res: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            init::uniform(&[b, 3, res, res], 1.0, &mut rng),
            init::normal(&[b, 3], 1.0, &mut rng),
            init::normal(&[b, 3], 1.0, &mut rng),
        )
    }

    #[test]
    fn trunk_ladder() {
        let cfg = DiscriminatorConfig { resolution: 128, base_channels: 8, max_channels: 32, ..tiny(HeadConditioning::AddIn) };
        assert_eq!(cfg.trunk_channels(), vec![8, 16, 32, 32, 32]);
        let cfg = DiscriminatorConfig { resolution: 4, ..cfg };
        assert_eq!(cfg.num_downsamples(), 0);
        assert!(DiscriminatorConfig { resolution: 48, ..cfg }.validate().is_err());
    }

    #[test]
    fn two_logits_per_sample() {
        let (d, store) = build(tiny(HeadConditioning::AddIn));
        let (img, s, _) = data(3, 8, 0);
        let (u, c) = d.evaluate(&store, &img, &s).unwrap();
        assert_eq!(u.shape(), &[3]);
        assert_eq!(c.shape(), &[3]);
    }

    #[test]
    fn resolution_mismatch_is_config_error() {
        let (d, store) = build(tiny(HeadConditioning::AddIn));
        let (img, s, _) = data(1, 16, 0);
        assert!(matches!(d.evaluate(&store, &img, &s), Err(Error::Config(_))));
    }

    #[test]
    fn uncond_logit_ignores_caption() {
        for kind in [HeadConditioning::AddIn, HeadConditioning::Concat] {
            let (d, store) = build(tiny(kind));
            let (img, s1, s2) = data(2, 8, 4);
            let (u1, c1) = d.evaluate(&store, &img, &s1).unwrap();
            let (u2, c2) = d.evaluate(&store, &img, &s2).unwrap();
            assert_eq!(u1, u2);
            assert_ne!(c1, c2);
        }
    }

    #[test]
    fn zero_transform_makes_cond_logit_caption_invariant() {
        let (d, mut store) = build(tiny(HeadConditioning::AddIn));
        let CondHead::AddIn { transform, .. } = &d.cond_head else { unreachable!() };
        for id in [transform.fc2.weight, transform.fc2.bias.unwrap()] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let (img, s1, s2) = data(2, 8, 4);
        assert_eq!(d.evaluate(&store, &img, &s1).unwrap().1, d.evaluate(&store, &img, &s2).unwrap().1);
    }

    #[test]
    fn condition_never_meets_image_features_in_a_concat() {
        for (kind, expect) in [(HeadConditioning::AddIn, 0), (HeadConditioning::Concat, 1)] {
            let (d, store) = build(tiny(kind));
            let (img, s, _) = data(1, 8, 2);
            let mut g = Graph::new();
            let p = g.bind(&store, false);
            let (iv, sv) = (g.constant(img), g.constant(s));
            d.discriminate(&mut g, &p, iv, sv).unwrap();
            let hits =
                g.concat_events().iter().filter(|e| tags::mixes(&e.input_tags, tags::IMAGE, tags::SENTENCE)).count();
            assert_eq!(hits, expect);
        }
    }

    #[test]
    fn both_heads_pass_gradient_check() {
        for kind in [HeadConditioning::AddIn, HeadConditioning::Concat] {
            let (d, store) = build(tiny(kind));
            let (img, s, _) = data(2, 8, 6);
            let mut all = vec![img, s];
            all.extend(store.iter().map(|(_, _, t)| t.clone()));
            for head in 0..2 {
                let r = crate::gradcheck::grad_check_fn(
                    "discriminator",
                    |g, v| {
                        let p = Bound::from_vars(v[2..].to_vec());
                        let out = d.discriminate(g, &p, v[0], v[1]).map_err(crate::gradcheck::lift)?;
                        Ok(if head == 0 { out.uncond } else { out.cond })
                    },
                    &all,
                    Some(5),
                )
                .unwrap();
                assert!(r.max_relative_error < 1e-3, "{kind:?} head {head}: {r:?}");
            }
        }
    }
}
