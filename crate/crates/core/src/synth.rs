//! Procedural captioned-shapes data.
//!
//! Content (shape and color) is carried by the caption; nuisance (position,
//! rotation, size) is drawn independently and is only visible in the image.
//! Sample `i` of a dataset depends only on `(seed, i)`.

use std::fmt;
use std::path::{Path, PathBuf};

use fdgan_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Resolution every sample is rendered at before any downsampling.
pub const RENDER_RESOLUTION: usize = 128;
pub const NUM_CLASSES: usize = Shape::ALL.len() * Color::ALL.len();

pub const CENTER_RANGE: (f64, f64) = (0.2, 0.8);
pub const SCALE_RANGE: (f64, f64) = (0.25, 0.45);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// RGB in `[-1, 1]`.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Content {
    pub shape: Shape,
    pub color: Color,
}

impl Content {
    pub fn all() -> impl Iterator<Item = Content> {
        Shape::ALL.into_iter().flat_map(|shape| Color::ALL.into_iter().map(move |color| Content { shape, color }))
    }

    /// Dense index in `[0, 12)`, shape-major.
    pub fn class_index(self) -> usize {
        self.shape as usize * Color::ALL.len() + self.color as usize
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        (i < NUM_CLASSES).then(|| Content {
            shape: Shape::ALL[i / Color::ALL.len()],
            color: Color::ALL[i % Color::ALL.len()],
        })
    }
}

impl fmt::Display for Content {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

/// Position and size in units of the image extent; rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub cx: f64,
    pub cy: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl Nuisance {
    pub fn centered() -> Self {
        Self { cx: 0.5, cy: 0.5, rotation: 0.0, scale: 0.35 }
    }

    pub fn validate(&self) -> Result<()> {
        let (c0, c1) = CENTER_RANGE;
        let (s0, s1) = SCALE_RANGE;
        let ok = (c0..=c1).contains(&self.cx)
            && (c0..=c1).contains(&self.cy)
            && (0.0..360.0).contains(&self.rotation)
            && (s0..=s1).contains(&self.scale);
        if ok {
            Ok(())
        } else {
            Err(Error::data(format!("nuisance out of range: {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            cx: rng.random_range(CENTER_RANGE.0..=CENTER_RANGE.1),
            cy: rng.random_range(CENTER_RANGE.0..=CENTER_RANGE.1),
            rotation: rng.random_range(0.0..360.0),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }
}

/// Signed distance (negative inside) from a point in shape-local
/// coordinates to a shape of size `s`: the circle's diameter, the square's
/// side, the triangle's side.
fn signed_distance(shape: Shape, x: f64, y: f64, s: f64) -> f64 {
    match shape {
        Shape::Circle => (x * x + y * y).sqrt() - s / 2.0,
        Shape::Square => {
            let h = s / 2.0;
            let (dx, dy) = (x.abs() - h, y.abs() - h);
            let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
            outside + dx.max(dy).min(0.0)
        }
        Shape::Triangle => {
            // equilateral, apex up, centred on its circumcentre
            let k = 3f64.sqrt();
            let side = s;
            let r = s / k;
            let (mut px, mut py) = (x.abs() - side / 2.0, -y + r / 2.0);
            if px + k * py > 0.0 {
                let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
                px = nx;
                py = ny;
            }
            px -= px.clamp(-side, 0.0);
            -(px * px + py * py).sqrt() * py.signum()
        }
    }
}

/// Filled, anti-aliased shape on a mid-gray (0) background, as a
/// `(3, res, res)` tensor in `[-1, 1]`.
pub fn render(content: Content, nuisance: &Nuisance, resolution: usize) -> Result<Tensor<f32>> {
    nuisance.validate()?;
    if resolution == 0 {
        return Err(Error::data("resolution must be positive"));
    }
    let n = resolution;
    let size = nuisance.scale;
    let (sin, cos) = nuisance.rotation.to_radians().sin_cos();
    let rgb = content.color.rgb();
    let mut out = vec![0f32; 3 * n * n];
    for i in 0..n {
        for j in 0..n {
            let px = (j as f64 + 0.5) / n as f64 - nuisance.cx;
            let py = (i as f64 + 0.5) / n as f64 - nuisance.cy;
            // image y grows downwards; rotate the query point into shape space
            let (lx, ly) = (cos * px + sin * py, sin * px - cos * py);
            let d = signed_distance(content.shape, lx, ly, size);
            let alpha = (0.5 - d * n as f64).clamp(0.0, 1.0) as f32;
            if alpha > 0.0 {
                for c in 0..3 {
                    out[c * n * n + i * n + j] = alpha * rgb[c];
                }
            }
        }
    }
    Ok(Tensor::new(&[3, n, n], out)?)
}

/// Averages `factor x factor` pixel blocks of a `(C, H, W)` or
/// `(B, C, H, W)` image.
pub fn downsample(image: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let r = s.len();
    if r < 3 || factor == 0 || s[r - 1] % factor != 0 || s[r - 2] % factor != 0 {
        return Err(Error::data(format!("cannot downsample {s:?} by {factor}")));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (h, w) = (s[r - 2], s[r - 1]);
    let (oh, ow) = (h / factor, w / factor);
    let planes = image.len() / (h * w);
    let inv = 1.0 / (factor * factor) as f32;
    let src = image.data();
    let mut out = vec![0f32; planes * oh * ow];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[p * oh * ow + (i / factor) * ow + j / factor] += src[p * h * w + i * w + j] * inv;
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::new(&shape, out)?)
}

/// Downsamples to `resolution` by block averaging.
pub fn resize_to(image: &Tensor<f32>, resolution: usize) -> Result<Tensor<f32>> {
    let h = image.shape()[image.rank() - 1];
    if resolution == 0 || h % resolution != 0 {
        return Err(Error::data(format!("cannot resize {h} to {resolution}")));
    }
    downsample(image, h / resolution)
}

pub const TEMPLATES: [&str; 5] = [
    "a {color} {shape}",
    "this is a {color} {shape}",
    "a {shape} that is {color}",
    "the {shape} is colored {color}",
    "there is a {color} {shape} here",
];

/// Caption for `content`; the template is chosen by `template_seed`.
pub fn caption_of(content: Content, template_seed: u64) -> String {
    TEMPLATES[(template_seed % TEMPLATES.len() as u64) as usize]
        .replace("{color}", content.color.name())
        .replace("{shape}", content.shape.name())
}

/// Recovers the content named by a caption.
pub fn parse_caption(caption: &str) -> Result<Content> {
    let tokens = tokenize(caption);
    let shapes: Vec<Shape> = tokens.iter().filter_map(|t| Shape::from_name(t)).collect();
    let colors: Vec<Color> = tokens.iter().filter_map(|t| Color::from_name(t)).collect();
    match (shapes.as_slice(), colors.as_slice()) {
        ([shape], [color]) => Ok(Content { shape: *shape, color: *color }),
        _ => Err(Error::data(format!("caption {caption:?} does not name exactly one shape and one color"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub caption: String,
    pub content: Content,
    pub nuisance: Nuisance,
    pub seed: u64,
}

impl SampleRecord {
    /// Draws sample `index` of the dataset with `seed`.
    pub fn draw(seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let content = Content::from_class_index(rng.random_range(0..NUM_CLASSES)).expect("class index in range");
        let nuisance = Nuisance::sample(&mut rng);
        let template = rng.random::<u64>();
        Self { index, caption: caption_of(content, template), content, nuisance, seed }
    }

    pub fn image(&self, resolution: usize) -> Result<Tensor<f32>> {
        if RENDER_RESOLUTION % resolution == 0 {
            resize_to(&render(self.content, &self.nuisance, RENDER_RESOLUTION)?, resolution)
        } else {
            render(self.content, &self.nuisance, resolution)
        }
    }
}

/// Records are returned without pixels; images are rendered on demand
/// with [`SampleRecord::image`].
pub fn make_dataset(n: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::data("dataset size must be at least 1"));
    }
    Ok((0..n).map(|i| SampleRecord::draw(seed, i)).collect())
}

pub fn class_histogram<'a>(contents: impl IntoIterator<Item = &'a Content>) -> [usize; NUM_CLASSES] {
    let mut h = [0; NUM_CLASSES];
    for c in contents {
        h[c.class_index()] += 1;
    }
    h
}

/// Source of `(image, caption)` training pairs.
pub trait ImageCaptionSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn caption(&self, i: usize) -> &str;
    /// `(3, res, res)` image in `[-1, 1]`.
    fn image(&self, i: usize, resolution: usize) -> Result<Tensor<f32>>;
    /// Ground-truth content when known.
    fn content(&self, i: usize) -> Option<Content>;
}

impl ImageCaptionSource for Vec<SampleRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn caption(&self, i: usize) -> &str {
        &self[i].caption
    }

    fn image(&self, i: usize, resolution: usize) -> Result<Tensor<f32>> {
        self[i].image(resolution)
    }

    fn content(&self, i: usize) -> Option<Content> {
        Some(self[i].content)
    }
}

/// One row of `metadata.csv`. Attribute columns may be empty for
/// externally supplied data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataRow {
    pub index: usize,
    pub caption: String,
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub rotation: Option<f64>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
}

impl From<&SampleRecord> for MetadataRow {
    fn from(r: &SampleRecord) -> Self {
        Self {
            index: r.index,
            caption: r.caption.clone(),
            shape: Some(r.content.shape),
            color: Some(r.content.color),
            cx: Some(r.nuisance.cx),
            cy: Some(r.nuisance.cy),
            rotation: Some(r.nuisance.rotation),
            scale: Some(r.nuisance.scale),
            seed: Some(r.seed),
        }
    }
}

pub const METADATA_FILE: &str = "metadata.csv";
pub const IMAGE_DIR: &str = "images";

pub fn image_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Writes a `(3, H, W)` image in `[-1, 1]` as an 8-bit PNG.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::data(format!("expected a (3, H, W) image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let k = y as usize * w + x as usize;
        image::Rgb([to_u8(d[k]), to_u8(d[h * w + k]), to_u8(d[2 * h * w + k])])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let k = y as usize * w + x as usize;
        for c in 0..3 {
            out[c * h * w + k] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], out)?)
}

/// Writes rendered images and `metadata.csv` under `dir`.
pub fn export_dataset(records: &[SampleRecord], resolution: usize, dir: &Path) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let meta = dir.join(METADATA_FILE);
    let mut w = csv::Writer::from_path(&meta)?;
    for r in records {
        save_png(&r.image(resolution)?, &images.join(image_file_name(r.index)))?;
        w.serialize(MetadataRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

pub fn read_metadata(dir: &Path) -> Result<Vec<MetadataRow>> {
    let meta = dir.join(METADATA_FILE);
    let file = std::fs::File::open(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(file).deserialize() {
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{} has no rows", meta.display())));
    }
    Ok(rows)
}

/// A dataset directory with the export layout, loaded into memory.
#[derive(Clone, Debug)]
pub struct FileDataset {
    pub root: PathBuf,
    pub rows: Vec<MetadataRow>,
    images: Vec<Tensor<f32>>,
}

impl FileDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_metadata(dir)?;
        let mut images = Vec::with_capacity(rows.len());
        let mut size = None;
        for row in &rows {
            let img = load_png(&dir.join(IMAGE_DIR).join(image_file_name(row.index)))?;
            let s = (img.shape()[1], img.shape()[2]);
            if s.0 != s.1 || size.is_some_and(|v| v != s) {
                return Err(Error::data(format!("image {} is {}x{}; all images must share one square size", row.index, s.0, s.1)));
            }
            size = Some(s);
            images.push(img);
        }
        Ok(Self { root: dir.to_path_buf(), rows, images })
    }

    pub fn resolution(&self) -> usize {
        self.images[0].shape()[1]
    }

    /// Synthetic records, when every attribute column is populated.
    pub fn records(&self) -> Option<Vec<SampleRecord>> {
        self.rows
            .iter()
            .map(|r| {
                Some(SampleRecord {
                    index: r.index,
                    caption: r.caption.clone(),
                    content: Content { shape: r.shape?, color: r.color? },
                    nuisance: Nuisance { cx: r.cx?, cy: r.cy?, rotation: r.rotation?, scale: r.scale? },
                    seed: r.seed?,
                })
            })
            .collect()
    }
}

impl ImageCaptionSource for FileDataset {
    fn len(&self) -> usize {
        self.rows.len()
    }

    fn caption(&self, i: usize) -> &str {
        &self.rows[i].caption
    }

    fn image(&self, i: usize, resolution: usize) -> Result<Tensor<f32>> {
        let src = &self.images[i];
        let have = src.shape()[1];
        if have == resolution {
            Ok(src.clone())
        } else if have % resolution == 0 {
            resize_to(src, resolution)
        } else {
            Err(Error::data(format!("stored images are {have}px; {resolution}px is not a divisor")))
        }
    }

    fn content(&self, i: usize) -> Option<Content> {
        let r = &self.rows[i];
        Some(Content { shape: r.shape?, color: r.color? })
    }
}
