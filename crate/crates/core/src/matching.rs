//! Sentence-level image/text matching: a small image encoder and a
//! symmetric contrastive loss over cosine similarities.

use fdgan_tensor::{Adam, Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::dims4;
use crate::layers::{rescale, Conv2d, Linear, LEAKY_GAIN};
use crate::synth::ImageCaptionSource;
use crate::text::{Caption, TextEncoder, TextEncoderConfig, Vocabulary};

/// Resolution the image encoder pools its input to.
pub const ENCODER_RESOLUTION: usize = 32;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
const LEAKY: f64 = 0.2;

/// Pools to 32x32, appends the squared channels, three stride-2 convs,
/// global average pooling and a linear map to the embedding width.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    convs: Vec<Conv2d>,
    out: Linear,
    pub embed_dim: usize,
}

impl ImageEncoder {
    pub fn new<F: Float, R: Rng + ?Sized>(name: &str, embed_dim: usize, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let convs = vec![
            Conv2d::new(&format!("{name}.conv0"), 6, 16, 4, 2, 1, true, store, rng),
            Conv2d::new(&format!("{name}.conv1"), 16, 32, 4, 2, 1, true, store, rng),
            Conv2d::new(&format!("{name}.conv2"), 32, 64, 4, 2, 1, true, store, rng),
        ];
        let out = Linear::new(&format!("{name}.out"), 64, embed_dim, true, store, rng);
        rescale(store, convs.iter().map(|c| c.weight), LEAKY_GAIN);
        Self { convs, out, embed_dim }
    }

    /// `(B, 3, R, R)` with `R` a multiple of 32 to `(B, embed_dim)`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, images: Var) -> Result<Var> {
        let (_, c, h, w) = dims4(g, images)?;
        if c != 3 || h != w || h % ENCODER_RESOLUTION != 0 {
            return Err(Error::config(format!(
                "image encoder expects (B, 3, R, R) with R a multiple of {ENCODER_RESOLUTION}, got {:?}",
                g.shape(images)
            )));
        }
        let x = if h > ENCODER_RESOLUTION { g.avg_pool(images, h / ENCODER_RESOLUTION)? } else { images };
        let sq = g.mul(x, x)?;
        let mut x = g.concat(&[x, sq], 1)?;
        for conv in &self.convs {
            x = conv.forward(g, p, x)?;
            x = g.leaky_relu(x, LEAKY);
        }
        let x = g.global_avg_pool(x)?;
        self.out.forward(g, p, x)
    }
}

/// Symmetric cross-entropy over `cos(image_i, text_j) / tau`, with the
/// matching pairs on the diagonal.
pub fn matching_loss<F: Float>(g: &mut Graph<F>, image: Var, text: Var, tau: f64) -> Result<Var> {
    let (si, st) = (g.shape(image).to_vec(), g.shape(text).to_vec());
    if si.len() != 2 || si != st {
        return Err(Error::config(format!("matching loss needs two (B, D) batches, got {si:?} and {st:?}")));
    }
    let (b, d) = (si[0], si[1]);
    if b < 2 {
        return Err(Error::data("matching loss needs a batch of at least 2"));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let ni = g.l2_normalize_rows(image)?;
    let nt = g.l2_normalize_rows(text)?;
    let ni = g.reshape(ni, &[1, b, d])?;
    let nt = g.reshape(nt, &[1, b, d])?;
    let sims = g.bmm(ni, nt, false, true)?;
    let sims = g.scale(sims, 1.0 / tau);
    let by_image = g.reshape(sims, &[b, b])?;
    let by_text = g.transpose_last2(sims)?;
    let by_text = g.reshape(by_text, &[b, b])?;
    let labels: Vec<usize> = (0..b).collect();
    let a = g.cross_entropy(by_image, &labels)?;
    let t = g.cross_entropy(by_text, &labels)?;
    let sum = g.add(a, t)?;
    Ok(g.scale(sum, 0.5))
}

/// Forward-only [`matching_loss`].
pub fn matching_loss_value<F: Float>(image: &Tensor<F>, text: &Tensor<F>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (i, t) = (g.constant(image.clone()), g.constant(text.clone()));
    let l = matching_loss(&mut g, i, t, tau)?;
    Ok(g.value(l).item().as_f64())
}

/// Encodes caption strings, failing on captions without tokens.
pub fn encode_captions<S: AsRef<str>>(vocab: &Vocabulary, texts: &[S], max_len: usize) -> Result<Vec<Caption>> {
    texts.iter().map(|t| vocab.encode(t.as_ref(), max_len)).collect()
}

/// Stacks `(3, R, R)` images into `(B, 3, R, R)`.
pub fn stack_images(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::data("empty image batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::data(format!("image shapes differ: {:?} vs {:?}", img.shape(), first.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(&shape, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 32, lr: 1e-3, temperature: DEFAULT_TEMPERATURE, seed: 0 }
    }
}

/// A text encoder and image encoder trained jointly on real pairs only.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub text_store: ParamStore<f32>,
    pub image: ImageEncoder,
    pub image_store: ParamStore<f32>,
}

impl Matcher {
    pub fn sentence_embeddings(&self, captions: &[String]) -> Result<Tensor<f32>> {
        let caps = encode_captions(&self.vocab, captions, self.text.config.max_len)?;
        let mut g = Graph::new();
        let p = g.bind(&self.text_store, false);
        let e = self.text.encode_batch(&mut g, &p, &caps)?;
        Ok(g.value(e.sentence).clone())
    }

    pub fn image_embeddings(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = g.bind(&self.image_store, false);
        let x = g.constant(images.clone());
        let e = self.image.forward(&mut g, &p, x)?;
        Ok(g.value(e).clone())
    }
}

pub fn train_matcher<S: ImageCaptionSource + ?Sized>(source: &S, config: &MatcherConfig) -> Result<Matcher> {
    if source.len() < 2 || config.batch_size < 2 {
        return Err(Error::data("matcher training needs at least two samples per batch"));
    }
    let corpus: Vec<&str> = (0..source.len()).map(|i| source.caption(i)).collect();
    let vocab = Vocabulary::build(&corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut text_store = ParamStore::new();
    let text = TextEncoder::new("matcher.text", TextEncoderConfig::desk(vocab.len()), &mut text_store, &mut rng);
    let mut image_store = ParamStore::new();
    let image = ImageEncoder::new("matcher.image", text.feature_dim(), &mut image_store, &mut rng);
    let mut text_opt = Adam::new(&text_store, config.lr, 0.9, 0.999);
    let mut image_opt = Adam::new(&image_store, config.lr, 0.9, 0.999);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..config.steps {
        if order.len() < config.batch_size {
            let mut fresh: Vec<usize> = (0..source.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..config.batch_size.min(source.len())).collect();
        let caps = encode_captions(&vocab, &batch.iter().map(|&i| source.caption(i)).collect::<Vec<_>>(), 8)?;
        let imgs = stack_images(
            &batch.iter().map(|&i| source.image(i, ENCODER_RESOLUTION)).collect::<Result<Vec<_>>>()?,
        )?;
        let mut g = Graph::new();
        let tp = g.bind(&text_store, true);
        let ip = g.bind(&image_store, true);
        let enc = text.encode_batch(&mut g, &tp, &caps)?;
        let x = g.constant(imgs);
        let emb = image.forward(&mut g, &ip, x)?;
        let loss = matching_loss(&mut g, emb, enc.sentence, config.temperature)?;
        let grads = g.backward(loss)?;
        text_opt.step(&mut text_store, &tp, &grads)?;
        image_opt.step(&mut image_store, &ip, &grads)?;
    }
    Ok(Matcher { vocab, text, text_store, image, image_store })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_log_batch() {
        for b in [2usize, 5] {
            let e = Tensor::<f64>::from_fn(&[b, 3], |i| [0.3, -1.0, 2.0][i % 3]);
            let l = matching_loss_value(&e, &e, 0.1).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-12, "{l}");
        }
    }

    #[test]
    fn orthogonal_pairs_beat_chance() {
        let img = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = matching_loss_value(&img, &img, 0.1).unwrap();
        // diagonal 1/tau = 10, off-diagonal 0
        let want = (1.0 + (-10f64).exp()).ln();
        assert!((l - want).abs() < 1e-12);
        assert!(l < 2f64.ln());
    }

    #[test]
    fn loss_is_non_negative_and_needs_two_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a: Tensor<f64> = fdgan_tensor::init::normal(&[4, 6], 1.0, &mut rng);
            let b: Tensor<f64> = fdgan_tensor::init::normal(&[4, 6], 1.0, &mut rng);
            assert!(matching_loss_value(&a, &b, 0.1).unwrap() >= 0.0);
        }
        let one = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matching_loss_value(&one, &one, 0.1).is_err());
    }

    #[test]
    fn image_encoder_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ImageEncoder::new("e", 4, &mut store, &mut rng);
        let img: Tensor<f64> = fdgan_tensor::init::uniform(&[2, 3, 64, 64], 1.0, &mut rng);
        let text: Tensor<f64> = fdgan_tensor::init::normal(&[2, 4], 1.0, &mut rng);
        let mut all = vec![img, text];
        all.extend(store.iter().map(|(_, _, t)| t.clone()));
        let r = crate::gradcheck::grad_check_fn(
            "matching",
            |g, v| {
                let p = Bound::from_vars(v[2..].to_vec());
                let e = enc.forward(g, &p, v[0]).map_err(crate::gradcheck::lift)?;
                matching_loss(g, e, v[1], 0.1).map_err(crate::gradcheck::lift)
            },
            &all,
            Some(4),
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }
}
