use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{bw, Graph, Var};
use crate::tensor::Tensor;

/// Logits are clamped to `[-LOGIT_CLIP, LOGIT_CLIP]` inside the
/// cross-entropy losses; the gradient is zero outside that band.
pub const LOGIT_CLIP: f64 = 20.0;

fn softplus<F: Float>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<F: Float>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

impl<F: Float> Graph<F> {
    /// Mean binary cross-entropy of `logits` against a constant target in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&target) {
            return Err(TensorError::invalid("bce_with_logits", format!("target {target} outside [0, 1]")));
        }
        self.value(logits).ensure_finite("bce_with_logits")?;
        let t = F::of(target);
        let clip = F::of(LOGIT_CLIP);
        let n = self.value(logits).len().max(1);
        let inv_n = F::of(1.0 / n as f64);
        let loss: F = self
            .value(logits)
            .data()
            .iter()
            .map(|&z| {
                let z = z.max(-clip).min(clip);
                softplus(z) - t * z
            })
            .sum::<F>()
            * inv_n;
        Ok(self.push_op(
            &[logits],
            Tensor::scalar(loss),
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let s = g.item() * inv_n;
                vec![Some(inp[0].map(|z| if z.abs() > clip { F::zero() } else { (sigmoid(z) - t) * s }))]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::shape("cross_entropy", &[labels.len(), 0], &s));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid("cross_entropy", format!("label {bad} out of {k} classes")));
        }
        self.value(logits).ensure_finite("cross_entropy")?;
        let inv_n = F::of(1.0 / n as f64);
        let mut probs = vec![F::zero(); n * k];
        let mut loss = F::zero();
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += -(row[labels[i]] - m - z.ln());
        }
        let labels = labels.to_vec();
        Ok(self.push_op(
            &[logits],
            Tensor::scalar(loss * inv_n),
            bw(move |_: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let s = g.item() * inv_n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= F::one();
                }
                d.iter_mut().for_each(|v| *v *= s);
                vec![Some(Tensor::new(&[n, k], d).expect("shape"))]
            }),
        ))
    }

    /// Softmax over the last axis of a `(B, R, T)` tensor where only the
    /// first `valid[b]` positions of batch `b` take part; the rest get
    /// weight zero (their logits are treated as negative infinity).
    pub fn masked_softmax(&mut self, x: Var, valid: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != valid.len() {
            return Err(TensorError::shape("masked_softmax", &[valid.len(), 0, 0], &s));
        }
        let (b, r, t) = (s[0], s[1], s[2]);
        if let Some(&bad) = valid.iter().find(|&&v| v == 0 || v > t) {
            return Err(TensorError::invalid("masked_softmax", format!("valid length {bad} not in 1..={t}")));
        }
        let mut out = vec![F::zero(); b * r * t];
        for (bi, &len) in valid.iter().enumerate() {
            for ri in 0..r {
                let off = (bi * r + ri) * t;
                let row = &self.value(x).data()[off..off + len];
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for (o, &v) in out[off..off + len].iter_mut().zip(row) {
                    *o = (v - m).exp();
                    z += *o;
                }
                out[off..off + len].iter_mut().for_each(|o| *o /= z);
            }
        }
        Ok(self.push_op(
            &[x],
            Tensor::new(&s, out)?,
            bw(move |_: &[&Tensor<F>], y: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut d = vec![F::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(t).zip(y.data().chunks(t)).zip(g.data().chunks(t)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape(), d).expect("shape"))]
            }),
        ))
    }

    /// Scales each row of an `(N, D)` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("l2_normalize_rows", format!("expected (N, D), got {s:?}")));
        }
        let d = s[1];
        let floor = F::of(1e-12);
        let norms: Vec<F> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor))
            .collect();
        let mut out = self.value(x).clone();
        for (r, &nrm) in out.data_mut().chunks_mut(d).zip(&norms) {
            r.iter_mut().for_each(|v| *v /= nrm);
        }
        Ok(self.push_op(
            &[x],
            out,
            bw(move |_: &[&Tensor<F>], y: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut dx = g.clone();
                for ((dr, yr), &nrm) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(&norms) {
                    let dot: F = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in dr.iter_mut().zip(yr) {
                        *dv = (*dv - yv * dot) / nrm;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}
