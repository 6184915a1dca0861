use fdgan_core::matching::*;
use fdgan_core::synth::*;
fn main() {
    let records = make_dataset(2400, 11).unwrap();
    for (steps, lr) in [(1500, 1e-3), (1000, 2e-3)] {
        let t = std::time::Instant::now();
        let m = train_matcher(&records, &MatcherConfig { steps, lr, ..Default::default() }).unwrap();
        let el = t.elapsed();
        let fresh = make_dataset(600, 12).unwrap();
        let imgs = stack_images(&fresh.iter().map(|r| r.image(32).unwrap()).collect::<Vec<_>>()).unwrap();
        let ie = m.image_embeddings(&imgs).unwrap();
        let caps: Vec<String> = Content::all().map(|c| caption_of(c, 1)).collect();
        let te = m.sentence_embeddings(&caps).unwrap();
        let d = 64;
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let mut correct = 0;
        for (i, r) in fresh.iter().enumerate() {
            let a = &ie.data()[i * d..(i + 1) * d];
            let best = (0..12).max_by(|&x, &y| {
                let s = |k: usize| { let b = &te.data()[k * d..(k + 1) * d]; a.iter().zip(b).map(|(p, q)| p * q).sum::<f32>() / norm(b) };
                s(x).partial_cmp(&s(y)).unwrap()
            }).unwrap();
            if best == r.content.class_index() { correct += 1; }
        }
        println!("steps {steps}: {:?} top1 {}", el, correct as f64 / 600.0);
    }
}
