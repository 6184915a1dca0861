//! Desk-scale metrics: a Fréchet distance on probe features, R-precision
//! retrieval, disentanglement scores, parameter counts and factor grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fdgan_tensor::{ParamStore, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{encode_captions, Matcher};
use crate::probe::Probe;
use crate::synth::{caption_of, parse_caption, render, Content, ImageCaptionSource, Nuisance, CENTER_RANGE, NUM_CLASSES, SCALE_RANGE};
use crate::text::{TextEncoder, Vocabulary};
use crate::variant::Model;

/// Candidate captions per retrieval query.
pub const DEFAULT_POOL_SIZE: usize = 100;
/// Eigenvalues below this are treated as zero in the matrix square root.
pub const EIGEN_CLAMP: f64 = 1e-10;

/// Rows of a `(N, d)` tensor as an `N x d` matrix.
pub fn feature_matrix(t: &Tensor<f32>) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::data(format!("features must be (N, d), got {:?}", t.shape())));
    }
    let (n, d) = (t.dim(0), t.dim(1));
    Ok(DMatrix::from_row_iterator(n, d, t.data().iter().map(|&v| v as f64)))
}

fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn condition_report(m: &DMatrix<f64>) -> String {
    match m.clone().try_svd(false, false, f64::EPSILON, 10_000) {
        Some(svd) => {
            let s = &svd.singular_values;
            format!("condition number {:.3e}", s.max() / s.min())
        }
        None => "condition number unavailable".to_string(),
    }
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numerical(format!("{what}: eigendecomposition did not converge ({})", condition_report(&sym))))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m.clone(), "covariance square root")?;
    let root = e.eigenvalues.map(|l| if l > EIGEN_CLAMP { l.sqrt() } else { 0.0 });
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` between two feature
/// sets given as `N x d` and `M x d` matrices.
///
/// The trace of the square root is taken from the symmetric product
/// `S_a^(1/2) S_b S_a^(1/2)`, which has the same eigenvalues as `S_a S_b`.
pub fn fid_like(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::data(format!("fid_like needs at least 2 samples per set, got {} and {}", a.nrows(), b.nrows())));
    }
    if a.ncols() != b.ncols() || a.ncols() == 0 {
        return Err(Error::data(format!("feature widths differ: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let root_a = psd_sqrt(&cov_a)?;
    let product = &root_a * &cov_b * &root_a;
    let e = eigen(product, "covariance product")?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|&l| if l > EIGEN_CLAMP { l.sqrt() } else { 0.0 }).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Fraction of queries whose true candidate is strictly the most similar by
/// cosine. `candidates[q]` is an `(R, d)` tensor and `true_index[q]` the row
/// of the paired caption; a tie for the top similarity is a miss.
pub fn r_precision(queries: &Tensor<f32>, candidates: &[Tensor<f32>], true_index: &[usize]) -> Result<f64> {
    if queries.rank() != 2 || queries.dim(0) != candidates.len() || candidates.len() != true_index.len() {
        return Err(Error::data("one candidate pool and one true index are needed per query"));
    }
    if candidates.is_empty() {
        return Err(Error::data("r_precision needs at least one query"));
    }
    let d = queries.dim(1);
    let mut hits = 0usize;
    for (q, (pool, &t)) in queries.data().chunks(d).zip(candidates.iter().zip(true_index)) {
        if pool.rank() != 2 || pool.dim(1) != d {
            return Err(Error::data(format!("candidate pool {:?} does not match query width {d}", pool.shape())));
        }
        let r = pool.dim(0);
        if r < 2 {
            return Err(Error::config(format!("pool size R must be at least 2, got {r}")));
        }
        if t >= r {
            return Err(Error::data(format!("true index {t} outside pool of {r}")));
        }
        let sims: Vec<f64> = pool.data().chunks(d).map(|c| cosine(q, c)).collect();
        if sims.iter().enumerate().all(|(j, &s)| j == t || s < sims[t]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / candidates.len() as f64)
}

/// Pools of `pool_size` captions with the true caption first and the rest
/// drawn from `bank` among captions of different content.
pub fn caption_pools<R: Rng + ?Sized>(
    queries: &[(String, Content)],
    bank: &[(String, Content)],
    pool_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<String>>> {
    if pool_size < 2 {
        return Err(Error::config(format!("pool size R must be at least 2, got {pool_size}")));
    }
    queries
        .iter()
        .map(|(caption, content)| {
            let others: Vec<&String> = bank.iter().filter(|(_, c)| c != content).map(|(s, _)| s).collect();
            if others.is_empty() {
                return Err(Error::data(format!("no mismatching captions for {content}")));
            }
            let mut pool = vec![caption.clone()];
            pool.extend((1..pool_size).map(|_| others[rng.random_range(0..others.len())].clone()));
            Ok(pool)
        })
        .collect()
}

/// Anything that maps captions and noise vectors to `(B, 3, R, R)` images.
pub trait CaptionToImage {
    fn noise_dim(&self) -> usize;
    fn resolution(&self) -> usize;
    fn generate(&self, captions: &[String], noise: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A trained generator sampled at its final resolution.
pub struct TrainedGenerator<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub text_store: &'a ParamStore<f32>,
    /// Normally the averaged generator parameters.
    pub generator_store: &'a ParamStore<f32>,
    /// Feed zero text features, as during unconditional training.
    pub unconditional: bool,
}

impl CaptionToImage for TrainedGenerator<'_> {
    fn noise_dim(&self) -> usize {
        self.model.generator.config.z_dim
    }

    fn resolution(&self) -> usize {
        *self.model.generator.config.output_resolutions().last().expect("at least one stage")
    }

    fn generate(&self, captions: &[String], noise: &Tensor<f32>) -> Result<Tensor<f32>> {
        let caps = encode_captions(self.vocab, captions, self.model.dims.max_caption_len)?;
        let (sentence, words) = encode_text(&self.model.text, self.text_store, &caps)?;
        let (sentence, words) = if self.unconditional {
            (Tensor::zeros(sentence.shape()), Tensor::zeros(words.shape()))
        } else {
            (sentence, words)
        };
        let valid: Vec<usize> = caps.iter().map(|c| c.len()).collect();
        let mut out = self.model.generator.sample(self.generator_store, noise, &sentence, &words, &valid)?;
        Ok(out.pop().expect("at least one stage"))
    }
}

fn encode_text(
    text: &TextEncoder,
    store: &ParamStore<f32>,
    caps: &[crate::text::Caption],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = fdgan_tensor::Graph::new();
    let p = g.bind(store, false);
    let e = text.encode_batch(&mut g, &p, caps)?;
    Ok((g.value(e.sentence).clone(), g.value(e.words).clone()))
}

/// Renders the content parsed from each caption, with nuisance factors
/// derived from the noise vector.
#[derive(Clone, Copy, Debug)]
pub struct OracleRenderer {
    pub resolution: usize,
    pub noise_dim: usize,
}

fn unit(z: f32) -> f64 {
    0.5 * (1.0 + (z as f64).tanh())
}

impl OracleRenderer {
    pub fn nuisance(z: &[f32]) -> Nuisance {
        let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
        let at = |i: usize| z.get(i).copied().unwrap_or(0.0);
        Nuisance {
            cx: lerp(CENTER_RANGE, unit(at(0))),
            cy: lerp(CENTER_RANGE, unit(at(1))),
            rotation: 360.0 * unit(at(2)),
            scale: lerp(SCALE_RANGE, unit(at(3))),
        }
    }
}

impl CaptionToImage for OracleRenderer {
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn generate(&self, captions: &[String], noise: &Tensor<f32>) -> Result<Tensor<f32>> {
        if noise.rank() != 2 || noise.dim(0) != captions.len() {
            return Err(Error::data("one noise row is needed per caption"));
        }
        let mut data = Vec::new();
        for (caption, z) in captions.iter().zip(noise.data().chunks(noise.dim(1).max(1))) {
            data.extend_from_slice(render(parse_caption(caption)?, &Self::nuisance(z), self.resolution)?.data());
        }
        Ok(Tensor::new(&[captions.len(), 3, self.resolution, self.resolution], data)?)
    }
}

/// Standard-normal noise rows.
pub fn noise_matrix(rows: usize, dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, dim], |_| rng.sample(StandardNormal))
}

/// `n` captions cycling through every class, with varying wording.
pub fn evaluation_captions(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| caption_of(Content::from_class_index(i % NUM_CLASSES).expect("class index"), (i / NUM_CLASSES) as u64))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementScore {
    /// Mean over captions of the fraction of noise pairs with equal predictions.
    pub content_consistency: f64,
    /// Fraction of images whose predicted content matches their caption.
    pub caption_accuracy: f64,
    pub n_captions: usize,
    pub n_noise: usize,
}

pub const MIN_DISENT_CAPTIONS: usize = 12;
pub const MIN_DISENT_NOISE: usize = 8;

/// Generates every caption with every noise row and classifies the results
/// with the probe.
pub fn disentanglement_score<G: CaptionToImage + ?Sized>(
    generator: &G,
    probe: &Probe,
    captions: &[String],
    noise: &Tensor<f32>,
) -> Result<DisentanglementScore> {
    probe.ensure_trusted()?;
    let n_noise = noise.dim(0);
    if captions.len() < MIN_DISENT_CAPTIONS || n_noise < MIN_DISENT_NOISE {
        return Err(Error::config(format!(
            "disentanglement needs at least {MIN_DISENT_CAPTIONS} captions and {MIN_DISENT_NOISE} noise vectors, got {} and {n_noise}",
            captions.len()
        )));
    }
    if noise.dim(1) != generator.noise_dim() {
        return Err(Error::config(format!("noise width {} != generator noise width {}", noise.dim(1), generator.noise_dim())));
    }
    let mut correct = 0usize;
    let mut consistency = 0.0;
    let pairs = (n_noise * (n_noise - 1) / 2) as f64;
    for caption in captions {
        let target = parse_caption(caption)?;
        let images = generator.generate(&vec![caption.clone(); n_noise], noise)?;
        let pred = probe.predict(&images)?;
        correct += pred.iter().filter(|&&p| p == target).count();
        let same = (0..n_noise).flat_map(|i| (i + 1..n_noise).map(move |j| (i, j))).filter(|&(i, j)| pred[i] == pred[j]).count();
        consistency += same as f64 / pairs;
    }
    Ok(DisentanglementScore {
        content_consistency: consistency / captions.len() as f64,
        caption_accuracy: correct as f64 / (captions.len() * n_noise) as f64,
        n_captions: captions.len(),
        n_noise,
    })
}

/// Scalar parameter counts, in total and per module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub per_module: BTreeMap<String, usize>,
}

/// Counts the scalars of `store`, grouping names by their first two
/// dot-separated components.
pub fn param_count(store: &ParamStore<f32>) -> ParamCount {
    ParamCount { total: store.num_scalars(), per_module: store.census(2) }
}

/// Images of every caption (rows) against every noise vector (columns).
#[derive(Clone, Debug)]
pub struct FactorGrid {
    pub captions: Vec<String>,
    pub noise: Tensor<f32>,
    pub resolution: usize,
    /// Row-major `(3, R, R)` cells.
    pub cells: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
struct GridManifest {
    rows: Vec<String>,
    columns: usize,
    resolution: usize,
    image: String,
}

const GLYPH: usize = 8;
const GAP: usize = 2;

pub fn factor_grid<G: CaptionToImage + ?Sized>(generator: &G, captions: &[String], noise: &Tensor<f32>) -> Result<FactorGrid> {
    let cols = noise.dim(0);
    let res = generator.resolution();
    let mut cells = Vec::with_capacity(captions.len() * cols);
    for caption in captions {
        let images = generator.generate(&vec![caption.clone(); cols], noise)?;
        let per = 3 * res * res;
        cells.extend(images.data().chunks(per).map(|c| Tensor::new(&[3, res, res], c.to_vec()).expect("cell shape")));
    }
    Ok(FactorGrid { captions: captions.to_vec(), noise: noise.clone(), resolution: res, cells })
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn draw_text(img: &mut image::RgbImage, text: &str, x0: u32, y0: u32) {
    use font8x8::UnicodeFonts;
    for (k, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH {
                if bits >> col & 1 == 1 {
                    let (x, y) = (x0 + (k * GLYPH + col) as u32, y0 + row as u32);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, image::Rgb([255, 255, 255]));
                    }
                }
            }
        }
    }
}

impl FactorGrid {
    pub fn rows(&self) -> usize {
        self.captions.len()
    }

    pub fn columns(&self) -> usize {
        self.noise.dim(0)
    }

    /// Renders the grid with each row's caption on its left.
    pub fn to_image(&self) -> image::RgbImage {
        let res = self.resolution;
        let label = GLYPH * self.captions.iter().map(|c| c.chars().count()).max().unwrap_or(0) + 2 * GAP;
        let row_h = res.max(GLYPH) + GAP;
        let width = label + self.columns() * (res + GAP) + GAP;
        let height = self.rows() * row_h + GAP;
        let mut img = image::RgbImage::from_pixel(width as u32, height as u32, image::Rgb([32, 32, 32]));
        for (r, caption) in self.captions.iter().enumerate() {
            let y0 = GAP + r * row_h;
            draw_text(&mut img, caption, GAP as u32, (y0 + res.saturating_sub(GLYPH) / 2) as u32);
            for c in 0..self.columns() {
                let cell = &self.cells[r * self.columns() + c];
                let x0 = label + c * (res + GAP);
                let d = cell.data();
                for y in 0..res {
                    for x in 0..res {
                        let px = [0, 1, 2].map(|ch| to_byte(d[(ch * res + y) * res + x]));
                        img.put_pixel((x0 + x) as u32, (y0 + y) as u32, image::Rgb(px));
                    }
                }
            }
        }
        img
    }

    /// Writes `path` as PNG and a caption manifest next to it with a `.json`
    /// extension.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_image().save_with_format(path, image::ImageFormat::Png)?;
        let manifest = GridManifest {
            rows: self.captions.clone(),
            columns: self.columns(),
            resolution: self.resolution,
            image: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        let sidecar = path.with_extension("json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        Ok(sidecar)
    }
}

/// Sample sizes and seed of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fid_samples: usize,
    pub r_queries: usize,
    pub pool_size: usize,
    pub disent_captions: usize,
    pub disent_noise: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { fid_samples: 600, r_queries: 600, pool_size: DEFAULT_POOL_SIZE, disent_captions: 24, disent_noise: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub seed: u64,
    pub fid_like: f64,
    pub fid_samples: usize,
    pub r_precision: f64,
    pub r_queries: usize,
    pub pool_size: usize,
    pub disent_content_consistency: f64,
    pub disent_caption_accuracy: f64,
    pub disent_captions: usize,
    pub disent_noise: usize,
    pub probe_held_out_accuracy: f64,
    pub param_counts: BTreeMap<String, usize>,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Appends one JSON line to a results ledger.
    pub fn append_to(&self, ledger: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(ledger).map_err(|e| Error::io(ledger, e))?;
        writeln!(f, "{}", serde_json::to_string(self)?).map_err(|e| Error::io(ledger, e))
    }
}

fn generate_in_batches<G: CaptionToImage + ?Sized>(generator: &G, captions: &[String], noise: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    const CHUNK: usize = 50;
    let z = noise.dim(1);
    let per = 3 * generator.resolution() * generator.resolution();
    let mut out = Vec::with_capacity(captions.len());
    for (caps, rows) in captions.chunks(CHUNK).zip(noise.data().chunks(CHUNK * z)) {
        let n = Tensor::new(&[caps.len(), z], rows.to_vec())?;
        let images = generator.generate(caps, &n)?;
        out.extend(images.data().chunks(per).map(|c| Tensor::new(&[3, generator.resolution(), generator.resolution()], c.to_vec()).expect("cell")));
    }
    Ok(out)
}

fn stacked(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    crate::matching::stack_images(images)
}

/// Runs every metric against `eval_set`, whose captions drive generation and
/// whose images are the real reference. Parameter counts are left empty.
pub fn evaluate<G: CaptionToImage + ?Sized, S: ImageCaptionSource + ?Sized>(
    label: &str,
    generator: &G,
    eval_set: &S,
    probe: &Probe,
    matcher: &Matcher,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let n = config.fid_samples.max(config.r_queries);
    if eval_set.len() < n {
        return Err(Error::data(format!("evaluation set has {} samples, {n} needed", eval_set.len())));
    }
    let res = generator.resolution();
    let captions: Vec<String> = (0..n).map(|i| eval_set.caption(i).to_string()).collect();
    let noise = noise_matrix(n, generator.noise_dim(), config.seed);
    let fakes = generate_in_batches(generator, &captions, &noise)?;

    let nf = config.fid_samples;
    let reals: Vec<Tensor<f32>> = (0..nf).map(|i| eval_set.image(i, res)).collect::<Result<_>>()?;
    let real_features = feature_matrix(&probe.features(&stacked(&reals)?)?)?;
    let fake_features = feature_matrix(&probe.features(&stacked(&fakes[..nf])?)?)?;
    let fid = fid_like(&real_features, &fake_features)?;

    let nq = config.r_queries;
    let contents: Vec<Content> = (0..eval_set.len())
        .map(|i| eval_set.content(i).map_or_else(|| parse_caption(eval_set.caption(i)), Ok))
        .collect::<Result<_>>()?;
    let bank: Vec<(String, Content)> = (0..eval_set.len()).map(|i| (eval_set.caption(i).to_string(), contents[i])).collect();
    let queries: Vec<(String, Content)> = bank[..nq].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let pools = caption_pools(&queries, &bank, config.pool_size, &mut rng)?;
    let image_emb = matcher.image_embeddings(&stacked(&resize_all(&fakes[..nq], crate::matching::ENCODER_RESOLUTION)?)?)?;
    let pool_emb: Vec<Tensor<f32>> = pools.iter().map(|p| matcher.sentence_embeddings(p)).collect::<Result<_>>()?;
    let rp = r_precision(&image_emb, &pool_emb, &vec![0; nq])?;

    let disent_captions = evaluation_captions(config.disent_captions);
    let disent_noise = noise_matrix(config.disent_noise, generator.noise_dim(), config.seed.wrapping_add(1));
    let disent = disentanglement_score(generator, probe, &disent_captions, &disent_noise)?;

    Ok(MetricReport {
        label: label.to_string(),
        seed: config.seed,
        fid_like: fid,
        fid_samples: nf,
        r_precision: rp,
        r_queries: nq,
        pool_size: config.pool_size,
        disent_content_consistency: disent.content_consistency,
        disent_caption_accuracy: disent.caption_accuracy,
        disent_captions: disent.n_captions,
        disent_noise: disent.n_noise,
        probe_held_out_accuracy: probe.held_out_accuracy,
        param_counts: BTreeMap::new(),
    })
}

fn resize_all(images: &[Tensor<f32>], resolution: usize) -> Result<Vec<Tensor<f32>>> {
    images.iter().map(|x| if x.dim(1) >= resolution { crate::synth::resize_to(x, resolution) } else { upsample_to(x, resolution) }).collect()
}

/// Nearest-neighbour enlargement of a `(3, r, r)` image.
fn upsample_to(x: &Tensor<f32>, resolution: usize) -> Result<Tensor<f32>> {
    let r = x.dim(1);
    if r == 0 || resolution % r != 0 {
        return Err(Error::data(format!("cannot enlarge {r} to {resolution}")));
    }
    let f = resolution / r;
    Ok(Tensor::from_fn(&[3, resolution, resolution], |i| {
        let (c, y, xx) = (i / (resolution * resolution), i / resolution % resolution, i % resolution);
        x.data()[(c * r + y / f) * r + xx / f]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal) + shift)
    }

    fn random_rotation(d: usize, seed: u64) -> DMatrix<f64> {
        gaussian(d, d, 0.0, seed).qr().q()
    }

    #[test]
    fn fid_is_zero_on_identical_sets_and_symmetric() {
        let a = gaussian(300, 5, 0.0, 1);
        assert!(fid_like(&a, &a).unwrap().abs() < 1e-6);
        let b = gaussian(200, 5, 0.3, 2);
        let (ab, ba) = (fid_like(&a, &b).unwrap(), fid_like(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
    }

    #[test]
    fn fid_of_unit_gaussians_shifted_by_ones_is_two() {
        let a = gaussian(50_000, 2, 0.0, 3);
        let b = gaussian(50_000, 2, 1.0, 4);
        let d = fid_like(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 0.1, "{d}");
    }

    #[test]
    fn fid_matches_closed_form_for_diagonal_covariances() {
        // N(0, diag(1, 4)) vs N(0, diag(4, 1)): tr = 5 + 5 - 2 (2 + 2) = 2
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40_000;
        let a = DMatrix::from_fn(n, 2, |_, j| rng.sample::<f64, _>(StandardNormal) * [1.0, 2.0][j]);
        let b = DMatrix::from_fn(n, 2, |_, j| rng.sample::<f64, _>(StandardNormal) * [2.0, 1.0][j]);
        let d = fid_like(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 0.15, "{d}");
    }

    #[test]
    fn fid_rejects_tiny_or_mismatched_sets() {
        let a = gaussian(1, 3, 0.0, 5);
        let b = gaussian(10, 3, 0.0, 6);
        assert!(fid_like(&a, &b).is_err());
        assert!(fid_like(&b, &gaussian(10, 4, 0.0, 7)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fid_is_non_negative_and_rotation_invariant(seed in 0u64..1000, shift in -2.0f64..2.0, d in 1usize..6) {
            let a = gaussian(60, d, 0.0, seed);
            let b = gaussian(80, d, shift, seed + 1);
            let base = fid_like(&a, &b).unwrap();
            prop_assert!(base >= 0.0);
            let q = random_rotation(d, seed + 2);
            let rotated = fid_like(&(&a * &q), &(&b * &q)).unwrap();
            prop_assert!((base - rotated).abs() < 1e-6 * base.max(1.0), "{} vs {}", base, rotated);
        }

        #[test]
        fn r_precision_stays_in_unit_interval(seed in 0u64..1000, r in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::from_fn(&[20, 4], |_| rng.sample(StandardNormal));
            let pools: Vec<Tensor<f32>> = (0..20).map(|_| Tensor::from_fn(&[r, 4], |_| rng.sample(StandardNormal))).collect();
            let v = r_precision(&q, &pools, &vec![0; 20]).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn r_precision_oracle_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let d = 16;
        let pools: Vec<Tensor<f32>> = (0..n).map(|_| Tensor::from_fn(&[10, d], |_| rng.sample(StandardNormal))).collect();
        let truth: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let q = Tensor::new(&[n, d], pools.iter().zip(&truth).flat_map(|(p, &t)| p.data()[t * d..(t + 1) * d].to_vec()).collect())
            .unwrap();
        assert_eq!(r_precision(&q, &pools, &truth).unwrap(), 1.0);
    }

    fn chance_run(queries: usize, r: usize, signal: f32, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let mut qs = Vec::with_capacity(queries * d);
        let mut pools = Vec::with_capacity(queries);
        for _ in 0..queries {
            let pool: Tensor<f32> = Tensor::from_fn(&[r, d], |_| rng.sample(StandardNormal));
            qs.extend(pool.data()[..d].iter().map(|&v| signal * v + rng.sample::<f32, _>(StandardNormal)));
            pools.push(pool);
        }
        r_precision(&Tensor::new(&[queries, d], qs).unwrap(), &pools, &vec![0; queries]).unwrap()
    }

    #[test]
    fn r_precision_is_at_chance_for_independent_features() {
        let v = chance_run(10_000, 100, 0.0, 12);
        assert!((v - 0.01).abs() < 0.005, "{v}");
    }

    #[test]
    fn r_precision_falls_as_pools_grow() {
        let small = chance_run(3000, 10, 0.5, 13);
        let large = chance_run(3000, 100, 0.5, 13);
        assert!(small > large, "{small} vs {large}");
    }

    #[test]
    fn ties_count_as_misses_and_tiny_pools_are_rejected() {
        let q = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let tied = Tensor::new(&[2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(r_precision(&q, &[tied], &[0]).unwrap(), 0.0);
        let single = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(r_precision(&q, &[single], &[0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Content::from_class_index(0).unwrap();
        assert!(caption_pools(&[("a".into(), c)], &[("b".into(), Content::from_class_index(1).unwrap())], 1, &mut rng).is_err());
    }

    #[test]
    fn caption_pools_put_truth_first_and_mismatch_content() {
        let bank: Vec<(String, Content)> =
            (0..60).map(|i| (format!("caption {i}"), Content::from_class_index(i % 12).unwrap())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pools = caption_pools(&bank[..5], &bank, 100, &mut rng).unwrap();
        for (pool, (truth, content)) in pools.iter().zip(&bank[..5]) {
            assert_eq!(pool.len(), 100);
            assert_eq!(&pool[0], truth);
            for other in &pool[1..] {
                let (_, c) = bank.iter().find(|(s, _)| s == other).unwrap();
                assert_ne!(c, content);
            }
        }
    }

    #[test]
    fn linear_layer_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        crate::layers::Linear::new("fc", 8, 4, true, &mut store, &mut rng);
        let before = param_count(&store);
        assert_eq!(before.total, 36);
        // independent of the values held
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(7.0);
        }
        assert_eq!(param_count(&store), before);
    }

    #[test]
    fn oracle_nuisance_stays_in_the_dataset_ranges() {
        for z in [-50.0f32, -1.0, 0.0, 0.7, 50.0] {
            let n = OracleRenderer::nuisance(&[z, -z, z, z]);
            n.validate().unwrap();
        }
    }

    #[test]
    fn factor_grid_is_a_cross_product_and_deterministic() {
        let g = OracleRenderer { resolution: 32, noise_dim: 4 };
        let captions = evaluation_captions(4);
        let noise = noise_matrix(6, 4, 1);
        let grid = factor_grid(&g, &captions, &noise).unwrap();
        assert_eq!(grid.cells.len(), 24);
        assert_eq!((grid.rows(), grid.columns()), (4, 6));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let sidecar = grid.write(&a).unwrap();
        factor_grid(&g, &captions, &noise).unwrap().write(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
        assert_eq!(manifest["rows"].as_array().unwrap().len(), 4);
        assert_eq!(manifest["columns"], 6);
    }

    #[test]
    fn evaluation_captions_cover_every_class() {
        let caps = evaluation_captions(24);
        let classes: std::collections::BTreeSet<usize> = caps.iter().map(|c| parse_caption(c).unwrap().class_index()).collect();
        assert_eq!(classes.len(), NUM_CLASSES);
    }
}
