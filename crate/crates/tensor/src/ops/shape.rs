use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{bw, Graph, Var};
use crate::tensor::Tensor;

use super::split_at_axis;

impl<F: Float> Graph<F> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(|inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                vec![Some(g.clone().reshape(inp[0].shape()).expect("reshape"))]
            }),
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut mids = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::shape("concat", &base, s));
            }
            mids.push(s[axis]);
        }
        self.record_concat(axis, xs);
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = mids.iter().sum();
        let mut os = base.clone();
        os[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &m) in xs.iter().zip(&mids) {
                out.extend_from_slice(&self.value(v).data()[o * m * inner..(o + 1) * m * inner]);
            }
        }
        let out = Tensor::new(&os, out)?;
        Ok(self.push_op(
            xs,
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                let mut grads: Vec<Vec<F>> = mids.iter().map(|m| Vec::with_capacity(outer * m * inner)).collect();
                let gd = g.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &m) in grads.iter_mut().zip(&mids) {
                        gi.extend_from_slice(&gd[off..off + m * inner]);
                        off += m * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inp)
                    .zip(needs)
                    .map(|((d, t), &need)| need.then(|| Tensor::new(t.shape(), d).expect("shape")))
                    .collect()
            }),
        ))
    }

    /// Picks index `idx` along `axis`, removing the axis.
    pub fn select(&mut self, x: Var, axis: usize, idx: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || idx >= xs[axis] {
            return Err(TensorError::invalid("select", format!("index {idx} on axis {axis} of {xs:?}")));
        }
        let (outer, mid, inner) = split_at_axis(&xs, axis);
        let mut os = xs.clone();
        os.remove(axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let s = (o * mid + idx) * inner;
            out.extend_from_slice(&xv[s..s + inner]);
        }
        let out = Tensor::new(&os, out)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for o in 0..outer {
                    let s = (o * mid + idx) * inner;
                    dx.data_mut()[s..s + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(TensorError::invalid("narrow", format!("{start}+{len} on axis {axis} of {xs:?}")));
        }
        let (outer, mid, inner) = split_at_axis(&xs, axis);
        let mut os = xs.clone();
        os[axis] = len;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * mid + start) * inner;
            out.extend_from_slice(&xv[s..s + len * inner]);
        }
        let out = Tensor::new(&os, out)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for o in 0..outer {
                    let s = (o * mid + start) * inner;
                    dx.data_mut()[s..s + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::invalid("stack", "no inputs"))?;
        let mut unsq = self.shape(*first).to_vec();
        if axis > unsq.len() {
            return Err(TensorError::invalid("stack", format!("axis {axis} out of range")));
        }
        unsq.insert(axis, 1);
        let parts = xs
            .iter()
            .map(|&v| self.reshape(v, &unsq))
            .collect::<Result<Vec<_>>>()?;
        // Stacking is a layout change; it is not logged as a concatenation.
        let n = self.concat_events().len();
        let out = self.concat(&parts, axis);
        self.truncate_concat_events(n);
        out
    }

    pub(crate) fn truncate_concat_events(&mut self, n: usize) {
        self.concat_events_mut().truncate(n);
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::invalid("transpose_last2", "rank must be at least 2"));
        }
        let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let batch = xs[..xs.len() - 2].iter().product::<usize>();
        let mut os = xs.clone();
        let n = os.len();
        os.swap(n - 2, n - 1);
        let out = Tensor::new(&os, transpose_batched(self.value(x).data(), batch, r, c))?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                vec![Some(Tensor::new(inp[0].shape(), transpose_batched(g.data(), batch, c, r)).expect("shape"))]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of a `(B, C, H, W)` map by a factor of two.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * c * oh * ow];
        for (plane, oplane) in xv.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for (row, orows) in plane.chunks(w).zip(oplane.chunks_mut(2 * ow)) {
                let (top, bottom) = orows.split_at_mut(ow);
                for (pair, &v) in top.chunks_mut(2).zip(row) {
                    pair[0] = v;
                    pair[1] = v;
                }
                bottom.copy_from_slice(top);
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for (dplane, gplane) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for (drow, grows) in dplane.chunks_mut(w).zip(gplane.chunks(2 * ow)) {
                        let (top, bottom) = grows.split_at(ow);
                        for ((d, t), u) in drow.iter_mut().zip(top.chunks(2)).zip(bottom.chunks(2)) {
                            *d = t[0] + t[1] + u[0] + u[1];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Average pooling with a square window and stride equal to `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::invalid("avg_pool", format!("window {k} does not tile {h}x{w}")));
        }
        if k == 1 {
            return Ok(x);
        }
        let (oh, ow) = (h / k, w / k);
        let inv = F::of(1.0 / (k * k) as f64);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * c * oh * ow];
        for (oplane, plane) in out.chunks_mut(oh * ow).zip(xv.chunks(h * w)) {
            for y in 0..h {
                for xx in 0..w {
                    oplane[(y / k) * ow + xx / k] += plane[y * w + xx];
                }
            }
            oplane.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut dx = Tensor::zeros(inp[0].shape());
                for (dplane, gplane) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for y in 0..h {
                        for xx in 0..w {
                            dplane[y * w + xx] = gplane[(y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `(B, C, H, W)` to `(B, C)` by spatial averaging.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let flat = self.reshape(x, &[b, c, h * w])?;
        let s = self.sum_axis(flat, 2)?;
        Ok(self.scale(s, 1.0 / (h * w) as f64))
    }

    /// Replicates a `(B, C)` matrix over an `h x w` grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::invalid("broadcast_spatial", format!("expected (B, C), got {xs:?}")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(xs[0] * xs[1] * hw);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, hw));
        }
        let out = Tensor::new(&[xs[0], xs[1], h, w], out)?;
        Ok(self.push_op(
            &[x],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let d = g.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
                vec![Some(Tensor::new(inp[0].shape(), d).expect("shape"))]
            }),
        ))
    }

    /// Row lookup into a `(V, E)` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::invalid("embedding", format!("table must be (V, E), got {ts:?}")));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::invalid("embedding", format!("id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        let out = Tensor::new(&[ids.len(), e], out)?;
        let ids = ids.to_vec();
        Ok(self.push_op(
            &[table],
            out,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, _: &[bool]| {
                let mut dt = Tensor::zeros(inp[0].shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &s) in dt.data_mut()[i * e..(i + 1) * e].iter_mut().zip(&g.data()[r * e..(r + 1) * e]) {
                        *d += s;
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }
}

pub(crate) fn transpose_batched<F: Float>(x: &[F], batch: usize, r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for bi in 0..batch {
        let src = &x[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
