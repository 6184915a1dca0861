use fdgan_core::matching::encode_captions;
use fdgan_core::probe::{train_probe, ProbeConfig};
use fdgan_core::synth::{caption_of, make_dataset, Content};
use fdgan_core::training::{TrainConfig, Trainer};
use fdgan_core::variant::{ModelDims, Variant};
use fdgan_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use std::time::Instant;
fn main() {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = a[0].parse().unwrap();
    let steps: usize = a[1].parse().unwrap();
    let base: usize = a[2].parse().unwrap();
    let blocks: usize = a[3].parse().unwrap();
    let uncond = a.get(4).map(|s| s == "u").unwrap_or(false);
    let lr: f64 = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let mw: f64 = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let data = make_dataset(2400, 1).unwrap();
    let probe = train_probe(&make_dataset(2400, 99).unwrap(), &ProbeConfig::default()).unwrap();
    eprintln!("probe {}", probe.held_out_accuracy);
    let cfg = TrainConfig {
        variant, steps, batch_size: 16, unconditional: uncond, matching_weight: mw, lr_encoder: std::env::var("ELR").ok().map_or(2e-4, |v| v.parse().unwrap()), lr_generator: lr, lr_discriminator: std::env::var("DLR").ok().map_or(lr, |v| v.parse().unwrap()),
        model: ModelDims { base_channels: base, num_base_blocks: blocks, disc_base_channels: std::env::var("DB").ok().map_or(16, |v| v.parse().unwrap()), disc_max_channels: std::env::var("DM").ok().map_or(64, |v| v.parse().unwrap()), ..ModelDims::default() },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &data).unwrap();
    let st = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for s in 1..=steps {
        let r = t.train_step().unwrap();
        if s % 250 == 0 {
            let contents: Vec<Content> = (0..48).map(|i| Content::from_class_index(i % 12).unwrap()).collect();
            let caps: Vec<String> = contents.iter().enumerate().map(|(i, c)| caption_of(*c, i as u64)).collect();
            let ids = encode_captions(&t.vocab, &caps, 8).unwrap();
            let mut g = Graph::new();
            let p = g.bind(&t.params.text, false);
            let e = t.model.text.encode_batch(&mut g, &p, &ids).unwrap();
            let (mut sv, mut wv) = (g.value(e.sentence).clone(), g.value(e.words).clone());
            if uncond { sv = Tensor::zeros(sv.shape()); wv = Tensor::zeros(wv.shape()); }
            let valid: Vec<usize> = ids.iter().map(|c| c.len()).collect();
            let z = Tensor::from_fn(&[48, 100], |_| rng.sample::<f32, _>(rand_distr::StandardNormal));
            let out = t.model.generator.sample(&t.ema.shadow, &z, &sv, &wv, &valid).unwrap();
            let acc = probe.accuracy(out.last().unwrap(), &contents).unwrap();
            let live = t.model.generator.sample(&t.params.generator, &z, &sv, &wv, &valid).unwrap();
            let acc_live = probe.accuracy(live.last().unwrap(), &contents).unwrap();
            let pred = probe.predict(out.last().unwrap()).unwrap();
            let shape_acc = pred.iter().zip(&contents).filter(|(a, b)| a.shape == b.shape).count() as f64 / 48.0;
            let color_acc = pred.iter().zip(&contents).filter(|(a, b)| a.color == b.color).count() as f64 / 48.0;
            println!("step {s} t={:.0}s d={:.3} dc={:?} g={:.3} m={:.3} gm={:?} acc_ema={acc:.3} acc_live={acc_live:.3} shape={shape_acc:.2} color={color_acc:.2}", st.elapsed().as_secs_f64(), r.d_loss_uncond, r.d_loss_cond, r.g_adv, r.matching_loss, r.g_matching_loss);
            {
                let o = live.last().unwrap();
                for (i, img) in o.data().chunks(o.len() / 48).take(12).enumerate() {
                    let t3 = Tensor::new(&o.shape()[1..], img.to_vec()).unwrap();
                    fdgan_core::synth::save_png(&t3, std::path::Path::new(&format!("/tmp/exp_{}_{i}.png", a.get(6).map(String::as_str).unwrap_or(&a[0])))).unwrap();
                }
            }
        }
    }
}
