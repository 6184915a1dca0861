use fdgan_tensor::check::{check_gradients, GradCheckOptions};
use fdgan_tensor::{init, Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init::normal(shape, 1.0, &mut rng)
}

fn assert_grads<Fun>(name: &str, f: Fun, inputs: &[Tensor<f64>])
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check_gradients(f, inputs, GradCheckOptions::default()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
    assert!(r.probes > 0);
}

#[test]
fn elementwise_ops() {
    let a = rnd(&[2, 3, 4], 1);
    let b = rnd(&[2, 3, 4], 2);
    assert_grads("add", |g, v| g.add(v[0], v[1]), &[a.clone(), b.clone()]);
    assert_grads("sub", |g, v| g.sub(v[0], v[1]), &[a.clone(), b.clone()]);
    assert_grads("mul", |g, v| g.mul(v[0], v[1]), &[a.clone(), b.clone()]);
    assert_grads("mul self", |g, v| g.mul(v[0], v[0]), &[a.clone()]);
    assert_grads("affine", |g, v| Ok(g.affine(v[0], -1.5, 0.3)), &[a.clone()]);
    assert_grads("tanh", |g, v| Ok(g.tanh(v[0])), &[a.clone()]);
    assert_grads("sigmoid", |g, v| Ok(g.sigmoid(v[0])), &[a.clone()]);
    assert_grads("leaky", |g, v| Ok(g.leaky_relu(v[0], 0.2)), &[a.clone()]);
    assert_grads("mean", |g, v| Ok(g.mean_all(v[0])), &[a.clone()]);
    assert_grads("sum_axis", |g, v| g.sum_axis(v[0], 1), &[a.clone()]);
    assert_grads("glu", |g, v| g.glu(v[0]), &[rnd(&[2, 4, 3, 2], 3)]);
}

#[test]
fn broadcasting_ops() {
    assert_grads("add_bias", |g, v| g.add_bias(v[0], v[1]), &[rnd(&[2, 3, 2, 2], 4), rnd(&[3], 5)]);
    assert_grads("add_bias 2d", |g, v| g.add_bias(v[0], v[1]), &[rnd(&[4, 3], 6), rnd(&[3], 7)]);
    assert_grads("mul_rows", |g, v| g.mul_rows(v[0], v[1]), &[rnd(&[2, 3, 5], 8), rnd(&[2, 3], 9)]);
    assert_grads("broadcast_spatial", |g, v| g.broadcast_spatial(v[0], 2, 3), &[rnd(&[2, 3], 10)]);
}

#[test]
fn shape_ops() {
    let x = rnd(&[2, 3, 4, 4], 11);
    assert_grads("upsample", |g, v| g.upsample_nearest2x(v[0]), &[x.clone()]);
    assert_grads("avg_pool", |g, v| g.avg_pool(v[0], 2), &[x.clone()]);
    assert_grads("gap", |g, v| g.global_avg_pool(v[0]), &[x.clone()]);
    assert_grads("concat", |g, v| g.concat(&[v[0], v[1]], 1), &[x.clone(), rnd(&[2, 1, 4, 4], 12)]);
    assert_grads("select", |g, v| g.select(v[0], 1, 2), &[x.clone()]);
    assert_grads("narrow", |g, v| g.narrow(v[0], 1, 1, 2), &[x.clone()]);
    assert_grads(
        "stack",
        |g, v| g.stack(&[v[0], v[1]], 1),
        &[rnd(&[2, 3], 13), rnd(&[2, 3], 14)],
    );
    assert_grads("transpose", |g, v| g.transpose_last2(v[0]), &[rnd(&[2, 3, 5], 15)]);
    assert_grads("reshape", |g, v| g.reshape(v[0], &[6, 16]), &[x]);
}

#[test]
fn embedding_accumulates_repeated_ids() {
    assert_grads("embedding", |g, v| g.embedding(v[0], &[1, 3, 1, 0]), &[rnd(&[4, 3], 16)]);
}

#[test]
fn linear_and_bmm() {
    assert_grads(
        "linear",
        |g, v| g.linear(v[0], v[1], Some(v[2])),
        &[rnd(&[3, 5], 17), rnd(&[4, 5], 18), rnd(&[4], 19)],
    );
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rnd(&[2, 4, 3], 20) } else { rnd(&[2, 3, 4], 20) };
        let b = if tb { rnd(&[2, 5, 4], 21) } else { rnd(&[2, 4, 5], 21) };
        assert_grads("bmm", move |g, v| g.bmm(v[0], v[1], ta, tb), &[a, b]);
    }
}

#[test]
fn conv2d_variants() {
    for (k, stride, pad, hw) in [(3, 1, 1, 5), (4, 2, 1, 6), (4, 1, 0, 4), (1, 1, 0, 3), (3, 2, 0, 6), (4, 2, 1, 5), (3, 3, 2, 4)] {
        assert_grads(
            "conv2d",
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
            &[rnd(&[2, 3, hw, hw], 22), rnd(&[4, 3, k, k], 23), rnd(&[4], 24)],
        );
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    let x = rnd(&[1, 2, 5, 5], 30);
    let w = rnd(&[3, 2, 3, 3], 31);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 3, 3, 3]);
    for co in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let iy = (oy * 2 + ki) as isize - 1;
                            let ix = (ox * 2 + kj) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                s += x.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                }
                let got = out.data()[(co * 3 + oy) * 3 + ox];
                assert!((got - s).abs() < 1e-12, "{got} vs {s}");
            }
        }
    }
}

#[test]
fn losses() {
    assert_grads("bce1", |g, v| g.bce_with_logits(v[0], 1.0), &[rnd(&[6], 40)]);
    assert_grads("bce0", |g, v| g.bce_with_logits(v[0], 0.0), &[rnd(&[6], 41)]);
    assert_grads("ce", |g, v| g.cross_entropy(v[0], &[0, 2, 1]), &[rnd(&[3, 4], 42)]);
    assert_grads("softmax", |g, v| g.masked_softmax(v[0], &[2, 4]), &[rnd(&[2, 3, 4], 43)]);
    assert_grads("l2", |g, v| g.l2_normalize_rows(v[0]), &[rnd(&[3, 4], 44)]);
}

#[test]
fn bce_closed_forms() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[5]));
    let l = g.bce_with_logits(z, 1.0).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    let big = g.constant(Tensor::full(&[3], 1e6));
    let l = g.bce_with_logits(big, 1.0).unwrap();
    assert!(g.value(l).item() < 1e-8);
}

#[test]
fn masked_softmax_zeroes_padding() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 1, 3], &[0.0, 3f64.ln(), 100.0]).unwrap());
    let y = g.masked_softmax(x, &[2]).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12 && v[2] == 0.0);
}

#[test]
fn frozen_inputs_record_no_backward() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full(&[2], 1.0));
    let b = g.tanh(a);
    assert!(!g.requires_grad(b));
    let grads = g.backward_with(b, Tensor::full(&[2], 1.0)).unwrap();
    assert!(grads.get(a).is_none());
}

#[test]
fn tags_propagate_and_concats_are_logged() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[1, 2]));
    let b = g.constant(Tensor::zeros(&[1, 3]));
    g.tag(a, 0b01);
    g.tag(b, 0b10);
    let c = g.concat(&[a, b], 1).unwrap();
    let d = g.tanh(c);
    assert_eq!(g.tags(d), 0b11);
    assert_eq!(g.concat_events().len(), 1);
    assert_eq!(g.concat_events()[0].input_tags, vec![0b01, 0b10]);
    let _ = g.stack(&[a, a], 0).unwrap();
    assert_eq!(g.concat_events().len(), 1, "stack is not a feature concatenation");
}
