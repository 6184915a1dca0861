use fdgan_core::synth::make_dataset;
use fdgan_core::training::{TrainConfig, Trainer};
use fdgan_core::variant::{ModelDims, Variant};
use std::time::Instant;
fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let data = make_dataset(256, 1).unwrap();
    let cfg = TrainConfig {
        variant: Variant::Fdgan,
        batch_size: args[0],
        model: ModelDims { base_channels: args[1], num_base_blocks: args[2], num_stages: args[3], disc_base_channels: args[4], disc_max_channels: args[5], ..ModelDims::default() },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &data).unwrap();
    let s = Instant::now();
    for _ in 0..3 { let r = t.train_step().unwrap(); println!("{:?}", (r.d_loss_uncond, r.g_loss, r.matching_loss)); }
    println!("{:.3}s/step", s.elapsed().as_secs_f64() / 3.0);
}
