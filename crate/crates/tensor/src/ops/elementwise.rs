use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{bw, Graph, Var};
use crate::tensor::Tensor;

fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

impl<F: Float> Graph<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(
            &[a, b],
            out,
            bw(|_: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(
            &[a, b],
            out,
            bw(|_: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(
            &[a, b],
            out,
            bw(|x: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                vec![
                    needs[0].then(|| g.zip_map(x[1], |g, y| g * y)),
                    needs[1].then(|| g.zip_map(x[0], |g, y| g * y)),
                ]
            }),
        ))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (F::of(scale), F::of(shift));
        let out = self.value(x).map(|v| s * v + t);
        self.push_op(
            &[x],
            out,
            bw(move |_: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| vec![Some(g.scale(s))]),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds a per-channel bias `b` of shape `[C]` to `x` of shape `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(TensorError::shape("add_bias", &xs.get(1..2).unwrap_or(&[]).to_vec(), self.shape(b)));
        }
        let (outer, c, inner) = super::split_at_axis(&xs, 1);
        let mut out = self.value(x).clone();
        {
            let bv = self.value(b).data();
            for (chunk, i) in out.data_mut().chunks_mut(inner).zip(0..outer * c) {
                let bias = bv[i % c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        Ok(self.push_op(
            &[x, b],
            out,
            bw(move |_: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(&[c]);
                    for (chunk, i) in g.data().chunks(inner).zip(0..outer * c) {
                        db.data_mut()[i % c] += chunk.iter().copied().sum::<F>();
                    }
                    db
                });
                vec![needs[0].then(|| g.clone()), db]
            }),
        ))
    }

    /// Multiplies `x` by `s`, where `s.shape()` is a prefix of `x.shape()`
    /// and is broadcast over the remaining trailing axes.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if ss.len() > xs.len() || xs[..ss.len()] != ss[..] {
            return Err(TensorError::shape("mul_rows", &xs, &ss));
        }
        let inner: usize = xs[ss.len()..].iter().product();
        let mut out = self.value(x).clone();
        for (chunk, &sv) in out.data_mut().chunks_mut(inner).zip(self.value(s).data()) {
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        Ok(self.push_op(
            &[x, s],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for (chunk, &sv) in dx.data_mut().chunks_mut(inner).zip(inp[1].data()) {
                        chunk.iter_mut().for_each(|v| *v *= sv);
                    }
                    dx
                });
                let ds = needs[1].then(|| {
                    let data = g
                        .data()
                        .chunks(inner)
                        .zip(inp[0].data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::new(inp[1].shape(), data).expect("shape")
                });
                vec![dx, ds]
            }),
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::of(slope);
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                vec![Some(g.zip_map(inp[0], |g, v| if v > F::zero() { g } else { g * s }))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push_op(
            &[x],
            out,
            bw(|_: &[&Tensor<F>], y: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                vec![Some(g.zip_map(y, |g, y| g * (F::one() - y * y)))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_op(
            &[x],
            out,
            bw(|_: &[&Tensor<F>], y: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                vec![Some(g.zip_map(y, |g, y| g * y * (F::one() - y)))]
            }),
        )
    }

    /// Gated linear unit over axis 1: `a * sigmoid(b)` where `x = [a, b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[1] % 2 != 0 {
            return Err(TensorError::invalid("glu", format!("axis 1 must be even, shape {xs:?}")));
        }
        let (outer, c2, inner) = super::split_at_axis(&xs, 1);
        let half = c2 / 2 * inner;
        let mut os = xs.clone();
        os[1] = c2 / 2;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * half);
        for n in 0..outer {
            let base = n * 2 * half;
            let (a, b) = xv[base..base + 2 * half].split_at(half);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
        }
        let out = Tensor::new(&os, out)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let xv = inp[0].data();
                let mut dx = Tensor::zeros(inp[0].shape());
                let d = dx.data_mut();
                for n in 0..outer {
                    let base = n * 2 * half;
                    let gc = &g.data()[n * half..(n + 1) * half];
                    for i in 0..half {
                        let a = xv[base + i];
                        let s = sigmoid(xv[base + half + i]);
                        d[base + i] = gc[i] * s;
                        d[base + half + i] = gc[i] * a * s * (F::one() - s);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(
            &[x],
            out,
            bw(|inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                vec![Some(Tensor::full(inp[0].shape(), g.item()))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} out of range for {xs:?}")));
        }
        let (outer, mid, inner) = super::split_at_axis(&xs, axis);
        let mut os = xs.clone();
        os.remove(axis);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xv[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let out = Tensor::new(&os, out)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut dx = Vec::with_capacity(outer * mid * inner);
                for o in 0..outer {
                    for _ in 0..mid {
                        dx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(inp[0].shape(), dx).expect("shape"))]
            }),
        ))
    }
}
