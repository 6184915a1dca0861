use std::sync::OnceLock;

use fdgan_core::evaluation::{
    disentanglement_score, evaluate, evaluation_captions, noise_matrix, CaptionToImage, EvalConfig, OracleRenderer,
};
use fdgan_core::matching::{train_matcher, MatcherConfig};
use fdgan_core::probe::{train_probe, Probe, ProbeConfig};
use fdgan_core::synth::{caption_of, make_dataset, parse_caption, render, Content, Nuisance};
use fdgan_core::{Error, Result};
use fdgan_tensor::Tensor;

fn probe() -> &'static Probe {
    static PROBE: OnceLock<Probe> = OnceLock::new();
    PROBE.get_or_init(|| train_probe(&make_dataset(2400, 21).unwrap(), &ProbeConfig::default()).unwrap())
}

/// Renders the caption's content at one fixed pose, ignoring the noise.
struct ConstantInNoise;

impl CaptionToImage for ConstantInNoise {
    fn noise_dim(&self) -> usize {
        4
    }

    fn resolution(&self) -> usize {
        64
    }

    fn generate(&self, captions: &[String], _noise: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        for c in captions {
            data.extend_from_slice(render(parse_caption(c)?, &Nuisance::centered(), 64)?.data());
        }
        Ok(Tensor::new(&[captions.len(), 3, 64, 64], data)?)
    }
}

/// Ignores the caption entirely.
struct AlwaysRedCircle;

impl CaptionToImage for AlwaysRedCircle {
    fn noise_dim(&self) -> usize {
        4
    }

    fn resolution(&self) -> usize {
        64
    }

    fn generate(&self, captions: &[String], noise: &Tensor<f32>) -> Result<Tensor<f32>> {
        let red_circle = vec![caption_of(Content::from_class_index(0).unwrap(), 0); captions.len()];
        OracleRenderer { resolution: 64, noise_dim: 4 }.generate(&red_circle, noise)
    }
}

#[test]
fn oracle_renderer_scores_near_perfectly() {
    let captions = evaluation_captions(24);
    let noise = noise_matrix(8, 4, 3);
    let s = disentanglement_score(&OracleRenderer { resolution: 64, noise_dim: 4 }, probe(), &captions, &noise).unwrap();
    assert!(s.caption_accuracy >= 0.98, "{s:?}");
    assert!(s.content_consistency >= 0.98, "{s:?}");
}

#[test]
fn noise_independent_generator_is_perfectly_consistent() {
    let captions = evaluation_captions(24);
    let noise = noise_matrix(8, 4, 3);
    let s = disentanglement_score(&ConstantInNoise, probe(), &captions, &noise).unwrap();
    assert_eq!(s.content_consistency, 1.0);
    assert!(s.caption_accuracy >= 0.98, "{s:?}");
}

#[test]
fn caption_blind_generator_sits_at_chance() {
    let captions = evaluation_captions(24);
    let noise = noise_matrix(8, 4, 3);
    let s = disentanglement_score(&AlwaysRedCircle, probe(), &captions, &noise).unwrap();
    assert!((s.caption_accuracy - 1.0 / 12.0).abs() < 0.02, "{s:?}");
    assert!(s.content_consistency >= 0.98, "{s:?}");
}

#[test]
fn undertrained_probe_is_refused() {
    let weak = train_probe(&make_dataset(60, 1).unwrap(), &ProbeConfig { epochs: 1, ..ProbeConfig::default() }).unwrap();
    let err = disentanglement_score(&ConstantInNoise, &weak, &evaluation_captions(12), &noise_matrix(8, 4, 0)).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn full_evaluation_of_the_oracle_beats_chance_retrieval() {
    let data = make_dataset(400, 5).unwrap();
    let matcher = train_matcher(&data, &MatcherConfig { steps: 300, ..MatcherConfig::default() }).unwrap();

    // distinct contents never collapse onto one sentence embedding
    let captions: Vec<String> = Content::all().map(|c| caption_of(c, 0)).collect();
    let e = matcher.sentence_embeddings(&captions).unwrap();
    let d = e.dim(1);
    let row = |i: usize| &e.data()[i * d..(i + 1) * d];
    let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
    for i in 0..captions.len() {
        for j in i + 1..captions.len() {
            let cos = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f32>() / (norm(row(i)) * norm(row(j)));
            assert!(cos < 0.999, "{} vs {}: {cos}", captions[i], captions[j]);
        }
    }

    let cfg = EvalConfig { fid_samples: 200, r_queries: 200, pool_size: 20, ..EvalConfig::default() };
    let r = evaluate("oracle", &OracleRenderer { resolution: 64, noise_dim: 4 }, &data, probe(), &matcher, &cfg).unwrap();
    assert!(r.r_precision > 2.0 / 20.0, "{r:?}");
    assert!(r.fid_like.is_finite() && r.fid_like >= 0.0);
    assert!(r.disent_caption_accuracy >= 0.98);
}
