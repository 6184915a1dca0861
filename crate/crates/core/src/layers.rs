//! Parameterised building blocks shared by the networks.

use fdgan_tensor::{init, Bound, Float, Graph, ParamId, ParamStore, Var};
use rand::Rng;

use crate::error::Result;

/// Fully connected layer `x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::kaiming_uniform(&[out_dim, in_dim], in_dim, 1.0, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), fdgan_tensor::Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))?)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init::kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, 1.0, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), fdgan_tensor::Tensor::zeros(&[out_channels])));
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<F: Float, R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Self {
        Self::new(name, cin, cout, 3, 1, 1, bias, store, rng)
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)?)
    }
}

/// Kaiming gain for a leaky rectifier with slope 0.2.
pub const LEAKY_GAIN: f64 = 1.386_750_490_563_073;

/// Multiplies the listed parameters in place.
pub fn rescale<F: fdgan_tensor::Float>(store: &mut ParamStore<F>, ids: impl IntoIterator<Item = ParamId>, factor: f64) {
    let f = F::of(factor);
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= f);
    }
}
