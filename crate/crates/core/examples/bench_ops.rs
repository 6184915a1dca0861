use fdgan_tensor::{Graph, Tensor};
use std::time::Instant;
fn time(name: &str, f: impl Fn()) { let t = Instant::now(); for _ in 0..5 { f() } println!("{name}: {:?}", t.elapsed() / 5); }
fn main() {
    let b = 16;
    let x = Tensor::<f32>::from_fn(&[b, 16, 64, 64], |i| (i % 7) as f32 * 0.1);
    let w = Tensor::<f32>::from_fn(&[16, 16, 3, 3], |i| (i % 5) as f32 * 0.01);
    time("conv16 64 fwd+bwd", || { let mut g = Graph::new(); let xv = g.leaf(x.clone(), true); let wv = g.leaf(w.clone(), true); let y = g.conv2d(xv, wv, None, 1, 1).unwrap(); let l = g.sum_all(y); g.backward(l).unwrap(); });
    time("conv16 64 fwd", || { let mut g = Graph::new(); let xv = g.leaf(x.clone(), true); let wv = g.leaf(w.clone(), true); let _ = g.conv2d(xv, wv, None, 1, 1).unwrap(); });
    time("in 64", || { let mut g = Graph::new(); let xv = g.leaf(x.clone(), true); let ga = g.constant(Tensor::full(&[16], 1.0)); let be = g.constant(Tensor::zeros(&[16])); let y = fdgan_core::norm::instance_norm_op(&mut g, xv, ga, be, Default::default()).unwrap(); let l = g.sum_all(y); g.backward(l).unwrap(); });
    time("glu 64", || { let mut g = Graph::new(); let xv = g.leaf(x.clone(), true); let y = g.glu(xv).unwrap(); let l = g.sum_all(y); g.backward(l).unwrap(); });
    time("up 64", || { let mut g = Graph::new(); let xv = g.leaf(x.clone(), true); let y = g.upsample_nearest2x(xv).unwrap(); let l = g.sum_all(y); g.backward(l).unwrap(); });
    time("add 64", || { let mut g = Graph::new(); let xv = g.leaf(x.clone(), true); let y = g.add(xv, xv).unwrap(); let l = g.sum_all(y); g.backward(l).unwrap(); });
    time("clone 64", || { let _ = x.clone(); });
}
