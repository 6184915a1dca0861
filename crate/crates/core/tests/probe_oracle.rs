use fdgan_core::probe::{train_probe, ProbeConfig, PROBE_RESOLUTION};
use fdgan_core::synth::{make_dataset, Content, NUM_CLASSES};
use fdgan_tensor::{init, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn probe_separates_rendered_classes_and_is_at_chance_on_noise() {
    let start = std::time::Instant::now();
    let records = make_dataset(2400, 11).unwrap();
    let probe = train_probe(&records, &ProbeConfig::default()).unwrap();
    eprintln!("probe trained in {:?}, held-out accuracy {}", start.elapsed(), probe.held_out_accuracy);
    assert!(probe.held_out_accuracy >= 0.98, "{}", probe.held_out_accuracy);
    probe.ensure_trusted().unwrap();

    // fresh renders from another seed
    let fresh = make_dataset(600, 12).unwrap();
    let imgs: Vec<Tensor<f32>> = fresh.iter().map(|r| r.image(64).unwrap()).collect();
    let batch = fdgan_core::probe::probe_batch(&imgs).unwrap();
    let labels: Vec<Content> = fresh.iter().map(|r| r.content).collect();
    assert!(probe.accuracy(&batch, &labels).unwrap() >= 0.98);

    // uniform noise with uniformly random labels
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3000;
    let noise: Tensor<f32> = init::uniform(&[n, 3, PROBE_RESOLUTION, PROBE_RESOLUTION], 1.0, &mut rng);
    let labels: Vec<Content> =
        (0..n).map(|_| Content::from_class_index(rng.random_range(0..NUM_CLASSES)).unwrap()).collect();
    let acc = probe.accuracy(&noise, &labels).unwrap();
    let chance = 1.0 / NUM_CLASSES as f64;
    let sd = (chance * (1.0 - chance) / n as f64).sqrt();
    assert!((acc - chance).abs() < 4.0 * sd, "{acc}");
}
