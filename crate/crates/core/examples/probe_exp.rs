use fdgan_core::probe::*;
use fdgan_core::synth::*;
fn main() {
    let records = make_dataset(2400, 11).unwrap();
    let fresh = make_dataset(600, 12).unwrap();
    let imgs: Vec<_> = fresh.iter().map(|r| r.image(64).unwrap()).collect();
    let batch = probe_batch(&imgs).unwrap();
    for epochs in [8, 10] {
        let t = std::time::Instant::now();
        let probe = train_probe(&records, &ProbeConfig { epochs, ..Default::default() }).unwrap();
        let pred = probe.predict(&batch).unwrap();
        let s = pred.iter().zip(&fresh).filter(|(p, r)| p.shape == r.content.shape).count();
        let c = pred.iter().zip(&fresh).filter(|(p, r)| p.color == r.content.color).count();
        println!("epochs {epochs}: {:?} held {} shape {} color {}", t.elapsed(), probe.held_out_accuracy, s as f64 / 600.0, c as f64 / 600.0);
    }
}
