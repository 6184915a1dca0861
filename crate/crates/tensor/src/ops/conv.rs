use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::graph::{bw, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` of a row whose input index `ox * stride + kj - pad` is in bounds.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.ow);
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(F::zero());
                    drow[hi..].fill(F::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let start = lo * g.stride + kj - g.pad;
                    for (d, s) in drow[start..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

impl<F: Float> Graph<F> {
    /// 2-D cross-correlation of `x: (B, Cin, H, W)` with `w: (Cout, Cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bsz, cin, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(TensorError::shape("conv2d", &[ws.first().copied().unwrap_or(0), cin, 0, 0], &ws));
        }
        let (cout, k) = (ws[0], ws[2]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::invalid("conv2d", format!("kernel {k} does not fit {h}x{wd} with pad {pad}")));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, ncol) = (geom.rows(), geom.cols());
        let mut out = vec![F::zero(); bsz * cout * ncol];
        let mut cols = vec![F::zero(); rows * ncol];
        {
            let xv = self.value(x).data();
            let wv = MatRef::new(self.value(w).data(), cout, rows);
            for n in 0..bsz {
                im2col(&xv[n * cin * h * wd..(n + 1) * cin * h * wd], &geom, &mut cols);
                gemm(
                    F::one(),
                    wv,
                    MatRef::new(&cols, rows, ncol),
                    F::zero(),
                    &mut out[n * cout * ncol..(n + 1) * cout * ncol],
                );
            }
        }
        let y = self.push_op(
            &[x, w],
            Tensor::new(&[bsz, cout, geom.oh, geom.ow], out)?,
            bw(move |inp: &[&Tensor<F>], _: &Tensor<F>, g: &Tensor<F>, needs: &[bool]| {
                let (xv, wv, gv) = (inp[0].data(), inp[1].data(), g.data());
                let plane = cin * geom.h * geom.w;
                let mut cols = vec![F::zero(); rows * ncol];
                let mut dx = needs[0].then(|| Tensor::zeros(inp[0].shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(inp[1].shape()));
                for n in 0..bsz {
                    let gn = MatRef::new(&gv[n * cout * ncol..(n + 1) * cout * ncol], cout, ncol);
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[n * plane..(n + 1) * plane], &geom, &mut cols);
                        gemm(F::one(), gn, MatRef::new(&cols, rows, ncol).t(), F::one(), dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(F::one(), MatRef::new(wv, cout, rows).t(), gn, F::zero(), &mut cols);
                        col2im(&cols, &geom, &mut dx.data_mut()[n * plane..(n + 1) * plane]);
                    }
                }
                vec![dx, dw]
            }),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}
