//! Per-channel feature statistics and the instance-normalization family:
//! plain IN with a learnable affine, AdaIN (scale and shift taken from a
//! style source), and AddIN (shift only, taken from a transformed
//! condition vector).
//!
//! All three share one kernel: standardize each `(sample, channel)` plane
//! over its spatial positions with `sigma = sqrt(var + eps)` (biased
//! variance), then modulate. Each layer is recorded on the graph as a single
//! fused node with a hand-written backward pass.

use fdgan_tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Negative slope of the leaky rectifier inside [`ConditionTransform`].
pub const CONDITION_LEAKY_SLOPE: f64 = 0.2;

/// Variance floor added under the square root. Must lie in `(0, 1e-3]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Epsilon(f64);

impl Epsilon {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0 && value <= 1e-3) {
            return Err(Error::config(format!("epsilon {value} outside (0, 1e-3]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Epsilon {
    fn default() -> Self {
        Self(DEFAULT_EPSILON)
    }
}

/// Per-sample, per-channel mean and deviation, both `(B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<F: Float> {
    pub mu: Tensor<F>,
    pub sigma: Tensor<F>,
}

/// Learnable per-channel scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<F: Float> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

impl<F: Float> AffineParams<F> {
    pub fn new(gamma: Vec<F>, beta: Vec<F>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::config(format!(
                "gamma has {} channels, beta has {}",
                gamma.len(),
                beta.len()
            )));
        }
        let c = gamma.len();
        Ok(Self { gamma: Tensor::new(&[c], gamma)?, beta: Tensor::new(&[c], beta)? })
    }

    pub fn identity(channels: usize) -> Self {
        Self { gamma: Tensor::full(&[channels], F::one()), beta: Tensor::zeros(&[channels]) }
    }
}

pub(crate) fn check_feature_map<F: Float>(x: &Tensor<F>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x
        .dims4()
        .map_err(|_| Error::config(format!("{what}: expected (B, C, H, W), got {:?}", x.shape())))?;
    if b == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::config(format!("{what}: empty dimension in {:?}", x.shape())));
    }
    if let Some((i, v)) = x.first_non_finite() {
        return Err(Error::NonFinite { what: what.to_string(), index: x.unravel(i), value: v.as_f64() });
    }
    Ok((b, c, h, w))
}

/// Spatial mean and deviation of every `(sample, channel)` plane.
pub fn channel_stats<F: Float>(x: &Tensor<F>, eps: Epsilon) -> Result<ChannelStats<F>> {
    let (b, c, h, w) = check_feature_map(x, "channel_stats input")?;
    let hw = h * w;
    let mut mu = Vec::with_capacity(b * c);
    let mut sigma = Vec::with_capacity(b * c);
    for plane in x.data().chunks(hw) {
        let (m, s) = plane_stats(plane, F::of(eps.value()));
        mu.push(m);
        sigma.push(s);
    }
    Ok(ChannelStats { mu: Tensor::new(&[b, c], mu)?, sigma: Tensor::new(&[b, c], sigma)? })
}

fn plane_stats<F: Float>(plane: &[F], eps: F) -> (F, F) {
    let n = F::of(plane.len() as f64);
    let mean = plane.iter().copied().sum::<F>() / n;
    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, (var + eps).sqrt())
}

/// Standardized planes plus the reciprocal deviations needed by the
/// backward pass.
struct Standardized<F> {
    xhat: Vec<F>,
    inv_sigma: Vec<F>,
}

fn standardize<F: Float>(x: &[F], hw: usize, eps: F) -> Standardized<F> {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_sigma = Vec::with_capacity(x.len() / hw);
    for plane in x.chunks(hw) {
        let (mean, sigma) = plane_stats(plane, eps);
        let inv = F::one() / sigma;
        xhat.extend(plane.iter().map(|&v| (v - mean) * inv));
        inv_sigma.push(inv);
    }
    Standardized { xhat, inv_sigma }
}

/// Gradient through the standardization given the gradient at `xhat`:
/// `dx = (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) / sigma`.
fn standardize_backward<F: Float>(dxhat: &[F], s: &Standardized<F>, hw: usize) -> Vec<F> {
    let n = F::of(hw as f64);
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((dp, xp), &inv) in dxhat.chunks(hw).zip(s.xhat.chunks(hw)).zip(&s.inv_sigma) {
        let mean_d = dp.iter().copied().sum::<F>() / n;
        let mean_dx = dp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<F>() / n;
        dx.extend(dp.iter().zip(xp).map(|(&d, &xh)| (d - mean_d - xh * mean_dx) * inv));
    }
    dx
}

fn plane_sums<F: Float>(g: &[F], hw: usize) -> Vec<F> {
    g.chunks(hw).map(|p| p.iter().copied().sum()).collect()
}

fn plane_dots<F: Float>(g: &[F], xhat: &[F], hw: usize) -> Vec<F> {
    g.chunks(hw)
        .zip(xhat.chunks(hw))
        .map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| u * v).sum())
        .collect()
}

fn expect_shape<F: Float>(g: &Graph<F>, v: Var, want: &[usize], what: &str) -> Result<()> {
    if g.shape(v) != want {
        return Err(Error::config(format!("{what}: expected shape {want:?}, got {:?}", g.shape(v))));
    }
    Ok(())
}

/// `gamma[c] * (x - mu) / sigma + beta[c]`.
pub fn instance_norm_op<F: Float>(g: &mut Graph<F>, x: Var, gamma: Var, beta: Var, eps: Epsilon) -> Result<Var> {
    let (b, c, h, w) = check_feature_map(g.value(x), "instance_norm input")?;
    expect_shape(g, gamma, &[c], "instance_norm gamma")?;
    expect_shape(g, beta, &[c], "instance_norm beta")?;
    let hw = h * w;
    let s = standardize(g.value(x).data(), hw, F::of(eps.value()));
    let (gv, bv) = (g.value(gamma).data(), g.value(beta).data());
    let mut out = Vec::with_capacity(s.xhat.len());
    for (i, plane) in s.xhat.chunks(hw).enumerate() {
        let (ga, be) = (gv[i % c], bv[i % c]);
        out.extend(plane.iter().map(|&v| ga * v + be));
    }
    let out = Tensor::new(&[b, c, h, w], out)?;
    Ok(g.push_op(
        &[x, gamma, beta],
        out,
        move |inp: &[&Tensor<F>], _: &Tensor<F>, gr: &Tensor<F>, needs: &[bool]| {
            let gamma = inp[1].data();
            let dx = needs[0].then(|| {
                let mut dxhat = gr.clone();
                for (i, plane) in dxhat.data_mut().chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v *= gamma[i % c]);
                }
                Tensor::new(inp[0].shape(), standardize_backward(dxhat.data(), &s, hw)).expect("shape")
            });
            let fold = |per_plane: Vec<F>| {
                let mut acc = vec![F::zero(); c];
                for (i, v) in per_plane.into_iter().enumerate() {
                    acc[i % c] += v;
                }
                Tensor::new(&[c], acc).expect("shape")
            };
            let dgamma = needs[1].then(|| fold(plane_dots(gr.data(), &s.xhat, hw)));
            let dbeta = needs[2].then(|| fold(plane_sums(gr.data(), hw)));
            vec![dx, dgamma, dbeta]
        },
    ))
}

/// `sigma(y) * (x - mu(x)) / sigma(x) + mu(y)` with statistics per sample
/// and channel. `y` may have a different spatial size from `x`.
pub fn adain_op<F: Float>(g: &mut Graph<F>, x: Var, y: Var, eps: Epsilon) -> Result<Var> {
    let (b, c, h, w) = check_feature_map(g.value(x), "adain content")?;
    let (by, cy, hy, wy) = check_feature_map(g.value(y), "adain style")?;
    if (b, c) != (by, cy) {
        return Err(Error::config(format!(
            "adain: content is {b}x{c}, style is {by}x{cy} (batch x channels)"
        )));
    }
    let (hw, hwy) = (h * w, hy * wy);
    let e = F::of(eps.value());
    let s = standardize(g.value(x).data(), hw, e);
    let style: Vec<(F, F)> = g.value(y).data().chunks(hwy).map(|p| plane_stats(p, e)).collect();
    let mut out = Vec::with_capacity(s.xhat.len());
    for (plane, &(mu_y, sigma_y)) in s.xhat.chunks(hw).zip(&style) {
        out.extend(plane.iter().map(|&v| sigma_y * v + mu_y));
    }
    let out = Tensor::new(&[b, c, h, w], out)?;
    Ok(g.push_op(
        &[x, y],
        out,
        move |inp: &[&Tensor<F>], _: &Tensor<F>, gr: &Tensor<F>, needs: &[bool]| {
            let dx = needs[0].then(|| {
                let mut dxhat = gr.clone();
                for (plane, &(_, sigma_y)) in dxhat.data_mut().chunks_mut(hw).zip(&style) {
                    plane.iter_mut().for_each(|v| *v *= sigma_y);
                }
                Tensor::new(inp[0].shape(), standardize_backward(dxhat.data(), &s, hw)).expect("shape")
            });
            let dy = needs[1].then(|| {
                let dmu = plane_sums(gr.data(), hw);
                let dsigma = plane_dots(gr.data(), &s.xhat, hw);
                let n = F::of(hwy as f64);
                let mut d = Vec::with_capacity(inp[1].len());
                for (i, plane) in inp[1].data().chunks(hwy).enumerate() {
                    let (mu_y, sigma_y) = style[i];
                    let k = dsigma[i] / (n * sigma_y);
                    d.extend(plane.iter().map(|&v| dmu[i] / n + k * (v - mu_y)));
                }
                Tensor::new(inp[1].shape(), d).expect("shape")
            });
            vec![dx, dy]
        },
    ))
}

/// `(x - mu) / sigma + bias[n, c]`, the bias broadcast over spatial
/// positions. There is no multiplicative modulation.
pub fn addin_op<F: Float>(g: &mut Graph<F>, x: Var, bias: Var, eps: Epsilon) -> Result<Var> {
    let (b, c, h, w) = check_feature_map(g.value(x), "addin input")?;
    expect_shape(g, bias, &[b, c], "addin bias")?;
    let hw = h * w;
    let s = standardize(g.value(x).data(), hw, F::of(eps.value()));
    let mut out = s.xhat.clone();
    for (plane, &bv) in out.chunks_mut(hw).zip(g.value(bias).data()) {
        plane.iter_mut().for_each(|v| *v += bv);
    }
    let out = Tensor::new(&[b, c, h, w], out)?;
    Ok(g.push_op(
        &[x, bias],
        out,
        move |inp: &[&Tensor<F>], _: &Tensor<F>, gr: &Tensor<F>, needs: &[bool]| {
            let dx = needs[0]
                .then(|| Tensor::new(inp[0].shape(), standardize_backward(gr.data(), &s, hw)).expect("shape"));
            let dbias = needs[1].then(|| Tensor::new(&[b, c], plane_sums(gr.data(), hw)).expect("shape"));
            vec![dx, dbias]
        },
    ))
}

/// `scale[n, c] * (x - mu) / sigma + shift[n, c]`: AdaIN with the style
/// statistics supplied directly rather than measured from a style map.
pub fn modulated_norm_op<F: Float>(g: &mut Graph<F>, x: Var, scale: Var, shift: Var, eps: Epsilon) -> Result<Var> {
    let (b, c, h, w) = check_feature_map(g.value(x), "modulated_norm input")?;
    expect_shape(g, scale, &[b, c], "modulated_norm scale")?;
    expect_shape(g, shift, &[b, c], "modulated_norm shift")?;
    let hw = h * w;
    let s = standardize(g.value(x).data(), hw, F::of(eps.value()));
    let (sv, tv) = (g.value(scale).data(), g.value(shift).data());
    let mut out = Vec::with_capacity(s.xhat.len());
    for (i, plane) in s.xhat.chunks(hw).enumerate() {
        out.extend(plane.iter().map(|&v| sv[i] * v + tv[i]));
    }
    let out = Tensor::new(&[b, c, h, w], out)?;
    Ok(g.push_op(
        &[x, scale, shift],
        out,
        move |inp: &[&Tensor<F>], _: &Tensor<F>, gr: &Tensor<F>, needs: &[bool]| {
            let dx = needs[0].then(|| {
                let mut dxhat = gr.clone();
                for (plane, &sc) in dxhat.data_mut().chunks_mut(hw).zip(inp[1].data()) {
                    plane.iter_mut().for_each(|v| *v *= sc);
                }
                Tensor::new(inp[0].shape(), standardize_backward(dxhat.data(), &s, hw)).expect("shape")
            });
            let dscale = needs[1].then(|| Tensor::new(&[b, c], plane_dots(gr.data(), &s.xhat, hw)).expect("shape"));
            let dshift = needs[2].then(|| Tensor::new(&[b, c], plane_sums(gr.data(), hw)).expect("shape"));
            vec![dx, dscale, dshift]
        },
    ))
}

/// Two fully connected layers with a leaky rectifier between them, mapping
/// a `(B, input_dim)` condition to `(B, output_dim)`. The hidden width is
/// the rounded mean of the input and output widths.
#[derive(Clone, Debug)]
pub struct ConditionTransform {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ConditionTransform {
    pub fn hidden_dim(input_dim: usize, output_dim: usize) -> usize {
        ((input_dim + output_dim + 1) / 2).max(1)
    }

    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        input_dim: usize,
        output_dim: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let hidden = Self::hidden_dim(input_dim, output_dim);
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), input_dim, hidden, true, store, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, output_dim, true, store, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn output_dim(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, c: Var) -> Result<Var> {
        let s = g.shape(c);
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::config(format!(
                "condition transform expects (B, {}), got {s:?}",
                self.input_dim()
            )));
        }
        let h = self.fc1.forward(g, p, c)?;
        let h = g.leaky_relu(h, CONDITION_LEAKY_SLOPE);
        self.fc2.forward(g, p, h)
    }

    /// Forward evaluation outside of any training graph.
    pub fn apply<F: Float>(&self, store: &ParamStore<F>, c: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let cv = g.constant(c.clone());
        let out = self.forward(&mut g, &p, cv)?;
        Ok(g.value(out).clone())
    }
}

/// Instance normalization followed by a learned per-channel affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: fdgan_tensor::ParamId,
    pub beta: fdgan_tensor::ParamId,
    pub channels: usize,
    pub eps: Epsilon,
}

impl InstanceNorm {
    pub fn new<F: Float>(name: &str, channels: usize, store: &mut ParamStore<F>) -> Self {
        let p = AffineParams::<F>::identity(channels);
        Self {
            gamma: store.add(format!("{name}.gamma"), p.gamma),
            beta: store.add(format!("{name}.beta"), p.beta),
            channels,
            eps: Epsilon::default(),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        instance_norm_op(g, x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// One AddIN site: a projection of the aligned condition to this site's
/// channel count, used as the additive bias.
#[derive(Clone, Debug)]
pub struct AddIn {
    pub proj: Linear,
    pub eps: Epsilon,
}

impl AddIn {
    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        cond_dim: usize,
        channels: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        Self { proj: Linear::new(&format!("{name}.proj"), cond_dim, channels, true, store, rng), eps: Epsilon::default() }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var, cond: Var) -> Result<Var> {
        let bias = self.proj.forward(g, p, cond)?;
        addin_op(g, x, bias, self.eps)
    }
}

/// Condition-driven AdaIN site: projections of the aligned condition give
/// the per-channel scale (centred on one) and shift.
#[derive(Clone, Debug)]
pub struct CondAdaIn {
    pub scale: Linear,
    pub shift: Linear,
    pub eps: Epsilon,
}

impl CondAdaIn {
    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        cond_dim: usize,
        channels: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        Self {
            scale: Linear::new(&format!("{name}.scale"), cond_dim, channels, true, store, rng),
            shift: Linear::new(&format!("{name}.shift"), cond_dim, channels, true, store, rng),
            eps: Epsilon::default(),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var, cond: Var) -> Result<Var> {
        let s = self.scale.forward(g, p, cond)?;
        let s = g.affine(s, 1.0, 1.0);
        let t = self.shift.forward(g, p, cond)?;
        modulated_norm_op(g, x, s, t, self.eps)
    }
}

/// Forward-only instance normalization.
pub fn instance_norm<F: Float>(x: &Tensor<F>, params: &AffineParams<F>, eps: Epsilon) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(params.gamma.clone()), g.constant(params.beta.clone()));
    let out = instance_norm_op(&mut g, xv, gv, bv, eps)?;
    Ok(g.value(out).clone())
}

/// Forward-only AdaIN.
pub fn adain<F: Float>(x: &Tensor<F>, y: &Tensor<F>, eps: Epsilon) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = adain_op(&mut g, xv, yv, eps)?;
    Ok(g.value(out).clone())
}

/// Forward-only AddIN with the bias `t_c(c)`.
pub fn addin<F: Float>(
    x: &Tensor<F>,
    c: &Tensor<F>,
    t_c: &ConditionTransform,
    store: &ParamStore<F>,
    eps: Epsilon,
) -> Result<Tensor<F>> {
    let (_, ch, _, _) = check_feature_map(x, "addin input")?;
    if t_c.output_dim() != ch {
        return Err(Error::config(format!(
            "addin: transform emits {} channels, feature map has {ch}",
            t_c.output_dim()
        )));
    }
    let mut g = Graph::new();
    let p = g.bind(store, false);
    let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
    let bias = t_c.forward(&mut g, &p, cv)?;
    let out = addin_op(&mut g, xv, bias, eps)?;
    Ok(g.value(out).clone())
}

/// Forward-only condition transform.
pub fn apply_condition_transform<F: Float>(
    c: &Tensor<F>,
    t: &ConditionTransform,
    store: &ParamStore<F>,
) -> Result<Tensor<F>> {
    t.apply(store, c)
}
