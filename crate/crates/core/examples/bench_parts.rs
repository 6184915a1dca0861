use fdgan_core::generator::TextCondition;
use fdgan_core::variant::{build_variant, ModelDims, Variant};
use fdgan_tensor::{Graph, Tensor};
use rand::SeedableRng;
use std::time::Instant;
fn main() {
    let dims = ModelDims::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (m, p) = build_variant(Variant::Fdgan, &dims, 40, &mut rng).unwrap();
    let b = 16;
    let t = Instant::now();
    for _ in 0..3 {
        let mut g = Graph::new();
        let gp = g.bind(&p.generator, true);
        let z = g.constant(Tensor::full(&[b, 100], 0.1));
        let s = g.constant(Tensor::full(&[b, 64], 0.1));
        let w = g.constant(Tensor::full(&[b, 8, 64], 0.1));
        let valid = vec![8; b];
        let imgs = m.generator.generate(&mut g, &gp, z, TextCondition { sentence: s, words: w, valid: &valid }).unwrap();
        let a = g.sum_all(imgs[0]); let c = g.sum_all(imgs[1]); let l = g.add(a, c).unwrap();
        let t2 = Instant::now();
        let _ = g.backward(l).unwrap();
        println!("gen bwd {:?}", t2.elapsed());
    }
    println!("gen fwd+bwd {:?}", t.elapsed() / 3);
    for (i, d) in m.discriminators.iter().enumerate() {
        let r = dims.generator_config(Variant::Fdgan).output_resolutions()[i];
        let t = Instant::now();
        let mut g = Graph::new();
        let dp = g.bind(&p.discriminators[i], true);
        let x = g.leaf(Tensor::full(&[b, 3, r, r], 0.1), true);
        let f = d.features(&mut g, &dp, x).unwrap();
        let u = d.uncond_logit(&mut g, &dp, f).unwrap();
        let l = g.sum_all(u);
        let _ = g.backward(l).unwrap();
        println!("disc {r} fwd+bwd {:?}", t.elapsed());
    }
}
