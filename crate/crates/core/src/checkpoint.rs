//! Binary checkpoints: a magic string, a format version, a JSON header and
//! little-endian f32 parameter data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use fdgan_tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocabulary;
use crate::training::TrainConfig;
use crate::variant::{build_variant, Model, ModelParams};

pub const MAGIC: &[u8; 8] = b"FDGANCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training or sample.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub generator_ema: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    store: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: usize,
    vocab: String,
    tensors: Vec<TensorEntry>,
}

fn stores(c: &Checkpoint) -> Vec<(String, &ParamStore<f32>)> {
    let mut v = c.params.named();
    v.insert(3, ("generator_ema".to_string(), &c.generator_ema));
    v
}

pub fn save(c: &Checkpoint, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let named = stores(c);
    let tensors = named
        .iter()
        .flat_map(|(s, store)| {
            store.iter().map(move |(_, n, t)| TensorEntry { store: s.clone(), name: n.to_string(), shape: t.shape().to_vec() })
        })
        .collect();
    let header = Header { config: c.config.clone(), step: c.step, vocab: c.vocab.to_text(), tensors };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, store) in &named {
            for (_, _, t) in store.iter() {
                for &x in t.data() {
                    w.write_f32::<LittleEndian>(x).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads a checkpoint and rebuilds the networks it describes.
pub fn load(path: &Path) -> Result<(Checkpoint, Model)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let short = |_| corrupt(format!("{}: truncated checkpoint", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(corrupt(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(short)?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(short)? as usize;
    if len > 1 << 30 {
        return Err(corrupt("header length is implausible"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(short)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    header.config.validate().map_err(|e| corrupt(format!("stored config is invalid: {e}")))?;
    let vocab = Vocabulary::from_text(&header.vocab)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, mut params) = build_variant(header.config.variant, &header.config.model, vocab.len(), &mut rng)?;
    let mut ema = params.generator.clone();
    let expected = params.named().iter().map(|(_, s)| s.len()).sum::<usize>() + ema.len();
    if expected != header.tensors.len() {
        return Err(corrupt(format!(
            "checkpoint holds {} tensors but the configured model has {expected}",
            header.tensors.len()
        )));
    }
    let mut entries = header.tensors.iter();
    let mut fill = |store_name: &str, store: &mut ParamStore<f32>| -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let e = entries.next().expect("count checked");
            if e.store != store_name || e.name != store.name(id) || e.shape != store.get(id).shape() {
                return Err(corrupt(format!(
                    "tensor {}/{} {:?} does not match model tensor {}/{} {:?}",
                    e.store,
                    e.name,
                    e.shape,
                    store_name,
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            r.read_f32_into::<LittleEndian>(store.get_mut(id).data_mut())
                .map_err(|_| corrupt(format!("{}: truncated checkpoint", path.display())))?;
        }
        Ok(())
    };
    fill("text", &mut params.text)?;
    fill("image_encoder", &mut params.image_encoder)?;
    fill("generator", &mut params.generator)?;
    fill("generator_ema", &mut ema)?;
    for (i, d) in params.discriminators.iter_mut().enumerate() {
        fill(&format!("discriminator{i}"), d)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(corrupt("trailing bytes after parameter data"));
    }
    Ok((Checkpoint { config: header.config, step: header.step, vocab, params, generator_ema: ema }, model))
}

/// Loads a checkpoint and requires its configuration to equal `expected`.
pub fn load_matching(path: &Path, expected: &TrainConfig) -> Result<(Checkpoint, Model)> {
    let (c, m) = load(path)?;
    if &c.config != expected {
        let (have, want) = (c.config.to_toml(), expected.to_toml());
        let diff: Vec<String> = have
            .lines()
            .zip(want.lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("  checkpoint: {a}  requested: {b}"))
            .collect();
        return Err(corrupt(format!("configuration mismatch in {}:\n{}", path.display(), diff.join("\n"))));
    }
    Ok((c, m))
}
