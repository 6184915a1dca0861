//! Caption tokenization and the sentence/word encoder.
//!
//! The encoder is a token embedding followed by one bidirectional GRU
//! layer. Word features are the concatenated per-step hidden states of the
//! two directions; the sentence embedding is their mean over valid steps.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use fdgan_tensor::{init, Bound, Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NUM_SPECIAL: usize = 2;
const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<unk>"];

/// Lower-cased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token to id map. Ids `0` and `1` are the padding and unknown tokens;
/// the rest are ordered by descending corpus frequency, ties broken
/// lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for caption in corpus {
            for t in tokenize(caption.as_ref()) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::data("cannot build a vocabulary from a corpus without tokens"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(tokens).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokenizes and maps a caption, truncating to `max_len` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Caption> {
        let ids: Vec<usize> = tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect();
        Caption::new(ids, self.len())
    }

    /// One token per line; line `i` (zero based) holds id `i + NUM_SPECIAL`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[NUM_SPECIAL..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if tokens.is_empty() || tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::data("vocabulary file must hold one non-empty token per line"));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::data("vocabulary file repeats a token"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Token ids of one caption, before padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Caption {
    ids: Vec<usize>,
}

impl Caption {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::data("caption has no tokens"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::data(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden width per direction; sentence and word features are twice this.
    pub hidden_per_direction: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 32, hidden_per_direction: 32, max_len: 8 }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.hidden_per_direction
    }
}

#[derive(Clone, Debug)]
struct GruCell {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl GruCell {
    fn new<F: Float, R: Rng + ?Sized>(name: &str, din: usize, h: usize, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        Self {
            input: Linear::new(&format!("{name}.input"), din, 3 * h, true, store, rng),
            hidden: Linear::new(&format!("{name}.hidden"), h, 3 * h, true, store, rng),
            width: h,
        }
    }

    fn step<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let w = self.width;
        let gi = self.input.forward(g, p, x)?;
        let gh = self.hidden.forward(g, p, h)?;
        let (ir, iz, inn) = (g.narrow(gi, 1, 0, w)?, g.narrow(gi, 1, w, w)?, g.narrow(gi, 1, 2 * w, w)?);
        let (hr, hz, hn) = (g.narrow(gh, 1, 0, w)?, g.narrow(gh, 1, w, w)?, g.narrow(gh, 1, 2 * w, w)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(inn, rn)?;
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        Ok(g.add(n, zd)?)
    }
}

/// Encoded batch of captions.
#[derive(Clone, Copy, Debug)]
pub struct EncodedText {
    /// `(B, D_g)` sentence embeddings.
    pub sentence: Var,
    /// `(B, T, D_l)` word features, zero at padded steps.
    pub words: Var,
}

/// Sentence embedding and word features of one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<F: Float> {
    /// `D_g`
    pub c_g: Tensor<F>,
    /// `(D_l, T)`
    pub c_l: Tensor<F>,
    pub valid_length: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    embedding: ParamId,
    forward_cell: GruCell,
    backward_cell: GruCell,
}

impl TextEncoder {
    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        config: TextEncoderConfig,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add(
            format!("{name}.embedding"),
            init::normal(&[config.vocab_size, config.embed_dim], 1.0, rng),
        );
        let (e, h) = (config.embed_dim, config.hidden_per_direction);
        Self {
            config,
            embedding,
            forward_cell: GruCell::new(&format!("{name}.gru_fwd"), e, h, store, rng),
            backward_cell: GruCell::new(&format!("{name}.gru_bwd"), e, h, store, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn check(&self, c: &Caption) -> Result<()> {
        if c.len() > self.config.max_len {
            return Err(Error::data(format!("caption of {} tokens exceeds {}", c.len(), self.config.max_len)));
        }
        if let Some(&bad) = c.ids().iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::data(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn encode_batch<F: Float>(&self, g: &mut Graph<F>, p: &Bound, captions: &[Caption]) -> Result<EncodedText> {
        if captions.is_empty() {
            return Err(Error::data("empty caption batch"));
        }
        for c in captions {
            self.check(c)?;
        }
        let (b, t, h) = (captions.len(), self.config.max_len, self.config.hidden_per_direction);
        let mut ids = Vec::with_capacity(b * t);
        let mut mask = Vec::with_capacity(b * t);
        for c in captions {
            for s in 0..t {
                ids.push(c.ids().get(s).copied().unwrap_or(PAD_ID));
                mask.push(if s < c.len() { F::one() } else { F::zero() });
            }
        }
        let emb = g.embedding(p.var(self.embedding), &ids)?;
        let emb = g.reshape(emb, &[b, t, self.config.embed_dim])?;
        let mask = g.constant(Tensor::new(&[b, t], mask)?);
        let step_mask: Vec<Var> = (0..t).map(|s| g.select(mask, 1, s)).collect::<std::result::Result<_, _>>()?;
        let inputs: Vec<Var> = (0..t).map(|s| g.select(emb, 1, s)).collect::<std::result::Result<_, _>>()?;

        let zero = g.constant(Tensor::zeros(&[b, h]));
        let mut fwd = Vec::with_capacity(t);
        let mut state = zero;
        for s in 0..t {
            state = self.forward_cell.step(g, p, inputs[s], state)?;
            fwd.push(state);
        }
        let mut bwd = vec![zero; t];
        let mut state = zero;
        for s in (0..t).rev() {
            let cand = self.backward_cell.step(g, p, inputs[s], state)?;
            // padded steps keep the zero state
            let delta = g.sub(cand, state)?;
            let delta = g.mul_rows(delta, step_mask[s])?;
            state = g.add(state, delta)?;
            bwd[s] = state;
        }
        let steps: Vec<Var> = (0..t)
            .map(|s| g.concat(&[fwd[s], bwd[s]], 1))
            .collect::<std::result::Result<_, _>>()?;
        let words = g.stack(&steps, 1)?;
        let words = g.mul_rows(words, mask)?;
        let total = g.sum_axis(words, 1)?;
        let inv_len = g.constant(Tensor::from_fn(&[b], |i| F::of(1.0 / captions[i].len() as f64)));
        let sentence = g.mul_rows(total, inv_len)?;
        Ok(EncodedText { sentence, words })
    }

    /// Forward-only encoding of a single caption.
    pub fn encode_text<F: Float>(&self, store: &ParamStore<F>, caption: &Caption) -> Result<TextEmbedding<F>> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let enc = self.encode_batch(&mut g, &p, std::slice::from_ref(caption))?;
        let d = self.feature_dim();
        let c_g = g.value(enc.sentence).clone().reshape(&[d])?;
        let words = g.reshape(enc.words, &[self.config.max_len, d])?;
        let c_l = g.transpose_last2(words)?;
        Ok(TextEmbedding { c_g, c_l: g.value(c_l).clone(), valid_length: caption.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocabulary_counts_specials_and_tokens() {
        let v = Vocabulary::build(&["a red circle", "a blue square"]).unwrap();
        assert_eq!(v.len(), 7);
        // "a" is the most frequent token, the rest tie and sort lexicographically
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.token(3), Some("blue"));
        assert_eq!(v.id("purple"), UNK_ID);
    }

    #[test]
    fn vocabulary_is_deterministic() {
        let corpus = ["this is a green triangle", "a red circle", "a blue square"];
        assert_eq!(Vocabulary::build(&corpus).unwrap(), Vocabulary::build(&corpus).unwrap());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocabulary::build(&[""]).is_err());
        assert!(Vocabulary::build::<&str>(&[]).is_err());
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::build(&["a red circle", "a blue square"]).unwrap();
        let text = v.to_text();
        assert_eq!(text.lines().next(), Some("a"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    fn encoder() -> (TextEncoder, ParamStore<f64>, Vocabulary) {
        let vocab = Vocabulary::build(&["a red circle", "this is a blue square"]).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TextEncoder::new("text", TextEncoderConfig::desk(vocab.len()), &mut store, &mut rng);
        (enc, store, vocab)
    }

    #[test]
    fn embedding_shapes_and_padding() {
        let (enc, store, vocab) = encoder();
        let cap = vocab.encode("a red circle", 8).unwrap();
        let e = enc.encode_text(&store, &cap).unwrap();
        assert_eq!(e.c_g.shape(), &[64]);
        assert_eq!(e.c_l.shape(), &[64, 8]);
        assert_eq!(e.valid_length, 3);
        for d in 0..64 {
            for t in 3..8 {
                assert_eq!(e.c_l.data()[d * 8 + t], 0.0);
            }
        }
        // mean of the valid columns
        for d in 0..64 {
            let m: f64 = (0..3).map(|t| e.c_l.data()[d * 8 + t]).sum::<f64>() / 3.0;
            assert!((m - e.c_g.data()[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_is_deterministic_and_batch_equivariant() {
        let (enc, store, vocab) = encoder();
        let a = vocab.encode("a red circle", 8).unwrap();
        let b = vocab.encode("this is a blue square", 8).unwrap();
        assert_eq!(enc.encode_text(&store, &a).unwrap(), enc.encode_text(&store, &a).unwrap());
        let run = |caps: &[Caption]| {
            let mut g = Graph::new();
            let p = g.bind(&store, false);
            let e = enc.encode_batch(&mut g, &p, caps).unwrap();
            g.value(e.sentence).clone()
        };
        let ab = run(&[a.clone(), b.clone()]);
        let ba = run(&[b, a]);
        assert_eq!(&ab.data()[..64], &ba.data()[64..]);
        assert_eq!(&ab.data()[64..], &ba.data()[..64]);
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let (enc, store, _) = encoder();
        assert!(Caption::new(vec![99], 7).is_err());
        let cap = Caption::new(vec![2, 500], 1000).unwrap();
        assert!(enc.encode_text(&store, &cap).is_err());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (enc, store, vocab) = encoder();
        let caps = [vocab.encode("a red circle", 8).unwrap(), vocab.encode("a blue square", 8).unwrap()];
        let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, _, t)| t.clone()).collect();
        let r = crate::gradcheck::grad_check_fn(
            "text",
            |g, v| {
                let p = Bound::from_vars(v.to_vec());
                let e = enc.encode_batch(g, &p, &caps).map_err(|e| fdgan_tensor::TensorError::invalid("t", e.to_string()))?;
                let w = g.sum_all(e.words);
                let s = g.sum_all(e.sentence);
                g.add(w, s)
            },
            &inputs,
            Some(6),
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }
}
