use fdgan_core::matching::{encode_captions, stack_images};
use fdgan_core::probe::{train_probe, ProbeConfig};
use fdgan_core::synth::{caption_of, Content, Nuisance, render};
use fdgan_core::generator::TextCondition;
use fdgan_core::text::Vocabulary;
use fdgan_core::variant::{build_variant, ModelDims, Variant};
use fdgan_tensor::{Adam, Graph, Tensor};
use rand::{Rng, SeedableRng};
fn main() {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = a[0].parse().unwrap();
    let probe = train_probe(&fdgan_core::synth::make_dataset(2400, 99).unwrap(), &ProbeConfig::default()).unwrap();
    let contents: Vec<Content> = (0..12).map(|i| Content::from_class_index(i).unwrap()).collect();
    let caps: Vec<String> = contents.iter().map(|c| caption_of(*c, 0)).collect();
    let vocab = Vocabulary::build(&caps).unwrap();
    let dims = ModelDims { base_channels: 64, num_base_blocks: 2, disc_base_channels: 16, disc_max_channels: 64, ..ModelDims::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (m, mut p) = build_variant(variant, &dims, vocab.len(), &mut rng).unwrap();
    let ids = encode_captions(&vocab, &caps, 8).unwrap();
    let valid: Vec<usize> = ids.iter().map(|c| c.len()).collect();
    let reals: Vec<Tensor<f32>> = contents.iter().map(|c| render(*c, &Nuisance::centered(), 32).unwrap()).collect();
    let real = stack_images(&reals).unwrap();
    let z = Tensor::from_fn(&[12, 100], |_| rng.sample::<f32, _>(rand_distr::StandardNormal));
    let mut og = Adam::new(&p.generator, 1e-3, 0.5, 0.999);
    let mut ot = Adam::new(&p.text, 1e-3, 0.5, 0.999);
    for s in 0..=300 {
        let mut g = Graph::new();
        let gp = g.bind(&p.generator, true);
        let tp = g.bind(&p.text, true);
        let e = m.text.encode_batch(&mut g, &tp, &ids).unwrap();
        let zv = g.constant(z.clone());
        let out = m.generator.generate(&mut g, &gp, zv, TextCondition { sentence: e.sentence, words: e.words, valid: &valid }).unwrap();
        let r = g.constant(real.clone());
        let d = g.sub(*out.last().unwrap(), r).unwrap();
        let sq = g.mul(d, d).unwrap();
        let l = g.mean_all(sq);
        if s % 50 == 0 {
            let acc = probe.accuracy(g.value(*out.last().unwrap()), &contents).unwrap();
            println!("step {s} loss {:.4} acc {acc:.3}", g.value(l).item());
        }
        let gr = g.backward(l).unwrap();
        og.step(&mut p.generator, &gp, &gr).unwrap();
        ot.step(&mut p.text, &tp, &gr).unwrap();
    }
}
