use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::graph::{bw, Graph, Var};
use crate::tensor::Tensor;

fn view<F: Float>(data: &[F], r: usize, c: usize, t: bool) -> MatRef<'_, F> {
    let v = MatRef::new(data, r, c);
    if t {
        v.t()
    } else {
        v
    }
}

impl<F: Float> Graph<F> {
    /// `x w^T + b` for `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::shape("linear", &ws, &xs));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::zero(); n * dout];
        gemm(
            F::one(),
            MatRef::new(self.value(x).data(), n, din),
            MatRef::new(self.value(w).data(), dout, din).t(),
            F::zero(),
            &mut out,
        );
        let y = self.push_op(
            &[x, w],
            Tensor::new(&[n, dout], out)?,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                let gm = MatRef::new(g.data(), n, dout);
                let dx = needs[0].then(|| {
                    let mut d = vec![F::zero(); n * din];
                    gemm(F::one(), gm, MatRef::new(inp[1].data(), dout, din), F::zero(), &mut d);
                    Tensor::new(&[n, din], d).expect("shape")
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![F::zero(); dout * din];
                    gemm(F::one(), gm.t(), MatRef::new(inp[0].data(), n, din), F::zero(), &mut d);
                    Tensor::new(&[dout, din], d).expect("shape")
                });
                vec![dx, dw]
            }),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Batched product of `(B, M, K)` and `(B, K, N)`, with optional
    /// transposition of the trailing two axes of either operand.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(TensorError::shape("bmm", &as_, &bs));
        }
        let batch = as_[0];
        let (ar, ac) = (as_[1], as_[2]);
        let (br, bc) = (bs[1], bs[2]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::shape("bmm", &[m, k], &[k2, n]));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    F::one(),
                    view(&av[i * ar * ac..(i + 1) * ar * ac], ar, ac, trans_a),
                    view(&bv[i * br * bc..(i + 1) * br * bc], br, bc, trans_b),
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push_op(
            &[a, b],
            Tensor::new(&[batch, m, n], out)?,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                let (av, bv, gv) = (inp[0].data(), inp[1].data(), g.data());
                let da = needs[0].then(|| {
                    let mut d = vec![F::zero(); batch * ar * ac];
                    for i in 0..batch {
                        let gi = MatRef::new(&gv[i * m * n..(i + 1) * m * n], m, n);
                        let bi = view(&bv[i * br * bc..(i + 1) * br * bc], br, bc, trans_b);
                        let slot = &mut d[i * ar * ac..(i + 1) * ar * ac];
                        // dA_logical = G B^T; stored transposed when trans_a.
                        if trans_a {
                            gemm(F::one(), bi, gi.t(), F::zero(), slot);
                        } else {
                            gemm(F::one(), gi, bi.t(), F::zero(), slot);
                        }
                    }
                    Tensor::new(inp[0].shape(), d).expect("shape")
                });
                let db = needs[1].then(|| {
                    let mut d = vec![F::zero(); batch * br * bc];
                    for i in 0..batch {
                        let gi = MatRef::new(&gv[i * m * n..(i + 1) * m * n], m, n);
                        let ai = view(&av[i * ar * ac..(i + 1) * ar * ac], ar, ac, trans_a);
                        let slot = &mut d[i * br * bc..(i + 1) * br * bc];
                        if trans_b {
                            gemm(F::one(), gi.t(), ai, F::zero(), slot);
                        } else {
                            gemm(F::one(), ai.t(), gi, F::zero(), slot);
                        }
                    }
                    Tensor::new(inp[1].shape(), d).expect("shape")
                });
                vec![da, db]
            }),
        ))
    }
}
