use fdgan_core::evaluation::{noise_matrix, CaptionToImage, TrainedGenerator};
use fdgan_core::probe::{train_probe, ProbeConfig};
use fdgan_core::synth::{make_dataset, Content, SampleRecord, NUM_CLASSES};
use fdgan_core::training::{TrainConfig, Trainer};
use fdgan_core::variant::{ModelDims, Variant};

/// First record of every class, in class order.
fn one_per_class() -> Vec<SampleRecord> {
    let pool = make_dataset(400, 17).unwrap();
    (0..NUM_CLASSES)
        .map(|k| pool.iter().find(|r| r.content.class_index() == k).expect("class present").clone())
        .collect()
}

#[test]
fn a_single_batch_of_every_class_is_learned() {
    let batch = one_per_class();
    let config = TrainConfig {
        variant: Variant::Fdgan,
        steps: 200,
        batch_size: NUM_CLASSES,
        model: ModelDims { base_channels: 64, num_base_blocks: 2, disc_max_channels: 64, ..ModelDims::default() },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, &batch).unwrap();
    for _ in 0..200 {
        let r = trainer.train_step().unwrap();
        assert!(r.is_finite());
    }

    let probe = train_probe(&make_dataset(2400, 18).unwrap(), &ProbeConfig::default()).unwrap();
    let generator = TrainedGenerator {
        model: &trainer.model,
        vocab: &trainer.vocab,
        text_store: &trainer.params.text,
        generator_store: &trainer.params.generator,
        unconditional: false,
    };
    let captions: Vec<String> = batch.iter().map(|r| r.caption.clone()).collect();
    let labels: Vec<Content> = batch.iter().map(|r| r.content).collect();
    let mut correct = 0;
    let draws = 4;
    for d in 0..draws {
        let images = generator.generate(&captions, &noise_matrix(captions.len(), generator.noise_dim(), 100 + d)).unwrap();
        let pred = probe.predict(&images).unwrap();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let accuracy = correct as f64 / (draws as usize * labels.len()) as f64;
    eprintln!("overfit probe accuracy {accuracy:.3}");
    assert!(accuracy >= 0.9, "probe accuracy on the memorised batch is {accuracy:.3}");
}
