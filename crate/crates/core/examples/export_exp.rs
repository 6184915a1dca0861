fn main() {
    let r = fdgan_core::synth::make_dataset(3000, 11).unwrap();
    fdgan_core::synth::export_dataset(&r, 32, std::path::Path::new("/tmp/ds32")).unwrap();
}
