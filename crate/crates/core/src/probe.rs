//! Independent shape/color classifier trained only on renderer output.
//! Its penultimate activations double as the feature space for the
//! Fréchet distance.

use fdgan_tensor::{Adam, Bound, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{rescale, Conv2d, Linear, LEAKY_GAIN};
use crate::synth::{resize_to, Color, Content, SampleRecord, Shape};

pub const PROBE_RESOLUTION: usize = 32;
pub const FEATURE_DIM: usize = 64;
/// Minimum held-out accuracy for the probe to be trusted as an oracle.
pub const MIN_TRUSTED_ACCURACY: f64 = 0.95;
const LEAKY: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 2e-3, held_out_fraction: 0.2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
struct ProbeNet {
    convs: Vec<Conv2d>,
    fc: Linear,
    shape_head: Linear,
    color_head: Linear,
}

impl ProbeNet {
    fn new(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Self {
        let convs = vec![
            Conv2d::new("probe.conv0", 1, 16, 3, 1, 1, true, store, rng),
            Conv2d::new("probe.conv1", 16, 32, 4, 2, 1, true, store, rng),
            Conv2d::new("probe.conv2", 32, 32, 4, 2, 1, true, store, rng),
            Conv2d::new("probe.conv3", 32, 64, 4, 2, 1, true, store, rng),
        ];
        let fc = Linear::new("probe.fc", 64 + 3, FEATURE_DIM, true, store, rng);
        rescale(store, convs.iter().map(|c| c.weight).chain([fc.weight]), LEAKY_GAIN);
        Self {
            convs,
            fc,
            shape_head: Linear::new("probe.shape", FEATURE_DIM, Shape::ALL.len(), true, store, rng),
            color_head: Linear::new("probe.color", FEATURE_DIM, Color::ALL.len(), true, store, rng),
        }
    }

    /// The trunk sees the per-pixel saliency `max_c |x_c|`; the mean color
    /// of salient pixels joins it before the feature layer.
    fn features(&self, g: &mut Graph<f32>, p: &Bound, images: &Tensor<f32>) -> Result<Var> {
        let (saliency, color) = saliency_and_color(images)?;
        let mut x = g.constant(saliency);
        for c in &self.convs {
            x = c.forward(g, p, x)?;
            x = g.leaky_relu(x, LEAKY);
        }
        let x = g.global_avg_pool(x)?;
        let color = g.constant(color);
        let x = g.concat(&[x, color], 1)?;
        let x = self.fc.forward(g, p, x)?;
        Ok(g.leaky_relu(x, LEAKY))
    }

    fn heads(&self, g: &mut Graph<f32>, p: &Bound, f: Var) -> Result<(Var, Var)> {
        Ok((self.shape_head.forward(g, p, f)?, self.color_head.forward(g, p, f)?))
    }
}

/// `(B, 1, H, W)` saliency and `(B, 3)` saliency-weighted mean color.
fn saliency_and_color(images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (b, c, h, w) = images.dims4()?;
    let hw = h * w;
    let x = images.data();
    let mut sal = vec![0f32; b * hw];
    let mut color = vec![0f32; b * c];
    for n in 0..b {
        let img = &x[n * c * hw..(n + 1) * c * hw];
        let s = &mut sal[n * hw..(n + 1) * hw];
        for (k, sv) in s.iter_mut().enumerate() {
            *sv = (0..c).map(|ch| img[ch * hw + k].abs()).fold(0.0, f32::max);
        }
        let total: f32 = s.iter().sum::<f32>() + 1e-6;
        for ch in 0..c {
            color[n * c + ch] = img[ch * hw..(ch + 1) * hw].iter().zip(s.iter()).map(|(a, b)| a * b).sum::<f32>() / total;
        }
    }
    Ok((Tensor::new(&[b, 1, h, w], sal)?, Tensor::new(&[b, c], color)?))
}

/// A trained probe together with its held-out accuracy.
#[derive(Clone, Debug)]
pub struct Probe {
    net: ProbeNet,
    store: ParamStore<f32>,
    pub held_out_accuracy: f64,
    pub held_out_size: usize,
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Stacks `(3, R, R)` images into `(B, 3, 32, 32)` probe inputs.
pub fn probe_batch(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * 3 * PROBE_RESOLUTION * PROBE_RESOLUTION);
    for img in images {
        data.extend_from_slice(resize_to(img, PROBE_RESOLUTION)?.data());
    }
    Ok(Tensor::new(&[images.len(), 3, PROBE_RESOLUTION, PROBE_RESOLUTION], data)?)
}

impl Probe {
    /// Accepts `(B, 3, R, R)` with `R` a multiple of the probe resolution.
    fn prepare(images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::data(format!("probe expects (B, 3, R, R) images, got {s:?}")));
        }
        resize_to(images, PROBE_RESOLUTION)
    }

    /// Penultimate activations `(B, 64)`.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = Self::prepare(images)?;
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let f = self.net.features(&mut g, &p, &x)?;
        Ok(g.value(f).clone())
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<Content>> {
        let x = Self::prepare(images)?;
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let f = self.net.features(&mut g, &p, &x)?;
        let (s, c) = self.net.heads(&mut g, &p, f)?;
        let (sv, cv) = (g.value(s).data(), g.value(c).data());
        let (ns, nc) = (Shape::ALL.len(), Color::ALL.len());
        Ok((0..images.shape()[0])
            .map(|i| Content {
                shape: Shape::ALL[argmax(&sv[i * ns..(i + 1) * ns])],
                color: Color::ALL[argmax(&cv[i * nc..(i + 1) * nc])],
            })
            .collect())
    }

    /// Fraction of images whose predicted content equals the label.
    pub fn accuracy(&self, images: &Tensor<f32>, labels: &[Content]) -> Result<f64> {
        let pred = self.predict(images)?;
        if pred.len() != labels.len() || labels.is_empty() {
            return Err(Error::data("label count does not match image count"));
        }
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    pub fn ensure_trusted(&self) -> Result<()> {
        if self.held_out_accuracy < MIN_TRUSTED_ACCURACY {
            return Err(Error::data(format!(
                "probe held-out accuracy {:.4} on {} images is below {MIN_TRUSTED_ACCURACY}; retrain it with more data or epochs",
                self.held_out_accuracy, self.held_out_size
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Trains the probe on rendered records, holding out a fraction for the
/// reported accuracy.
pub fn train_probe(records: &[SampleRecord], config: &ProbeConfig) -> Result<Probe> {
    let first = records.first().ok_or_else(|| Error::data("probe needs a non-empty dataset"))?;
    if records.iter().all(|r| r.content == first.content) {
        return Err(Error::data(format!("probe dataset holds the single class {:?}", first.content)));
    }
    if config.epochs == 0 || config.batch_size == 0 || !(0.0..1.0).contains(&config.held_out_fraction) {
        return Err(Error::config(format!("invalid probe config {config:?}")));
    }
    let images: Vec<Tensor<f32>> =
        records.iter().map(|r| r.image(PROBE_RESOLUTION)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((records.len() as f64) * config.held_out_fraction).round() as usize;
    let (held, train) = order.split_at(n_held);
    if train.is_empty() {
        return Err(Error::data("no probe training samples left after the held-out split"));
    }

    let mut store = ParamStore::new();
    let net = ProbeNet::new(&mut store, &mut rng);
    let mut opt = Adam::new(&store, config.lr, 0.9, 0.999);
    let mut train = train.to_vec();
    for _ in 0..config.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(config.batch_size) {
            let batch: Vec<Tensor<f32>> = chunk.iter().map(|&i| images[i].clone()).collect();
            let shapes: Vec<usize> = chunk.iter().map(|&i| records[i].content.shape as usize).collect();
            let colors: Vec<usize> = chunk.iter().map(|&i| records[i].content.color as usize).collect();
            let mut g = Graph::new();
            let p = g.bind(&store, true);
            let f = net.features(&mut g, &p, &probe_batch(&batch)?)?;
            let (s, c) = net.heads(&mut g, &p, f)?;
            let ls = g.cross_entropy(s, &shapes)?;
            let lc = g.cross_entropy(c, &colors)?;
            let loss = g.add(ls, lc)?;
            let grads = g.backward(loss)?;
            opt.step(&mut store, &p, &grads)?;
        }
    }
    let mut probe = Probe { net, store, held_out_accuracy: 1.0, held_out_size: held.len() };
    if !held.is_empty() {
        let imgs: Vec<Tensor<f32>> = held.iter().map(|&i| images[i].clone()).collect();
        let labels: Vec<Content> = held.iter().map(|&i| records[i].content).collect();
        probe.held_out_accuracy = probe.accuracy(&probe_batch(&imgs)?, &labels)?;
    }
    Ok(probe)
}
