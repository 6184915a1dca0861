use fdgan_core::matching::{encode_captions, matching_loss, stack_images};
use fdgan_core::synth::{make_dataset, ImageCaptionSource};
use fdgan_core::text::Vocabulary;
use fdgan_core::training::mismatch_indices;
use fdgan_core::variant::{build_variant, ModelDims, Variant};
use fdgan_tensor::{Adam, Graph};
use rand::SeedableRng;
use rand::seq::SliceRandom;
fn main() {
    let a: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = a[0].parse().unwrap();
    let train_enc = a.get(1).map(|s| s == "enc").unwrap_or(false);
    let data = make_dataset(2400, 1).unwrap();
    let corpus: Vec<&str> = (0..data.len()).map(|i| data.caption(i)).collect();
    let vocab = Vocabulary::build(&corpus).unwrap();
    let dims = ModelDims { base_channels: 64, num_base_blocks: 2, disc_base_channels: 16, disc_max_channels: 64, ..ModelDims::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (m, mut p) = build_variant(variant, &dims, vocab.len(), &mut rng).unwrap();
    let mut od = Adam::new(&p.discriminators[1], 2e-4, 0.5, 0.999);
    let elr: f64 = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let mut ot = Adam::new(&p.text, elr, 0.5, 0.999);
    let mut oi = Adam::new(&p.image_encoder, elr, 0.5, 0.999);
    let d = &m.discriminators[1];
    let mut acc_hist = vec![];
    for s in 0..600 {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(16);
        let texts: Vec<String> = idx.iter().map(|&i| data.caption(i).to_string()).collect();
        let contents: Vec<_> = idx.iter().map(|&i| data.content(i)).collect();
        let mis = mismatch_indices(&texts, &contents, &mut rng);
        let caps = encode_captions(&vocab, &texts, 8).unwrap();
        let imgs = stack_images(&idx.iter().map(|&i| data.image(i, 32).unwrap()).collect::<Vec<_>>()).unwrap();
        if train_enc {
            let mut g = Graph::new();
            let tp = g.bind(&p.text, true);
            let ip = g.bind(&p.image_encoder, true);
            let e = m.text.encode_batch(&mut g, &tp, &caps).unwrap();
            let x = g.constant(imgs.clone());
            let emb = m.image_encoder.forward(&mut g, &ip, x).unwrap();
            let l = matching_loss(&mut g, emb, e.sentence, 0.1).unwrap();
            let gr = g.backward(l).unwrap();
            ot.step(&mut p.text, &tp, &gr).unwrap();
            oi.step(&mut p.image_encoder, &ip, &gr).unwrap();
        }
        let mut g = Graph::new();
        let tp = g.bind(&p.text, false);
        let dp = g.bind(&p.discriminators[1], true);
        let e = m.text.encode_batch(&mut g, &tp, &caps).unwrap();
        let sv = g.constant(g.value(e.sentence).clone());
        let mis_sent = {
            let ms: Vec<f32> = mis.iter().flat_map(|&j| g.value(e.sentence).data()[j * 64..(j + 1) * 64].to_vec()).collect();
            g.constant(fdgan_tensor::Tensor::new(&[16, 64], ms).unwrap())
        };
        let x = g.constant(imgs);
        let f = d.features(&mut g, &dp, x).unwrap();
        let cr = d.cond_logit(&mut g, &dp, f, sv).unwrap();
        let cm = d.cond_logit(&mut g, &dp, f, mis_sent).unwrap();
        let l1 = g.bce_with_logits(cr, 1.0).unwrap();
        let l2 = g.bce_with_logits(cm, 0.0).unwrap();
        let l = g.add(l1, l2).unwrap();
        let acc = g.value(cr).data().iter().filter(|&&v| v > 0.0).count() + g.value(cm).data().iter().filter(|&&v| v < 0.0).count();
        acc_hist.push(acc as f64 / 32.0);
        if s % 100 == 0 {
            let sd = g.value(e.sentence).data();
            let mut mean = vec![0f64; 64];
            for r in sd.chunks(64) { for (m, v) in mean.iter_mut().zip(r) { *m += *v as f64 / 16.0; } }
            let var: f64 = sd.chunks(64).map(|r| r.iter().zip(&mean).map(|(v, m)| (*v as f64 - m).powi(2)).sum::<f64>()).sum::<f64>() / 16.0 / 64.0;
            let ms: f64 = mean.iter().map(|m| m * m).sum::<f64>() / 64.0;
            println!("c_g between-caption std {:.4} mean rms {:.4}", var.sqrt(), ms.sqrt());
        }
        if s % 50 == 49 {
            println!("step {} loss {:.3} acc {:.3}", s + 1, g.value(l).item(), acc_hist.iter().rev().take(50).sum::<f64>() / 50.0);
        }
        let gr = g.backward(l).unwrap();
        od.step(&mut p.discriminators[1], &dp, &gr).unwrap();
    }
}
