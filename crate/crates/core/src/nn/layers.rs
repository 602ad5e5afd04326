//! Parameterized layers. Each holds handles into a [`ParamStore`] and is
//! applied through [`Graph`](super::Graph).

use super::kernels::ConvGeom;
use super::params::{BufferId, Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Weight layout `(out, in, k, k)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
    ) -> Self {
        let k = geom.kernel;
        let fan_in = in_ch * k * k;
        store.scope(name, |s| {
            let weight = s.add("weight", &[out_ch, in_ch, k, k], fan_in, init);
            let bias = bias.then(|| s.add("bias", &[out_ch], fan_in, Init::ZEROS));
            Conv2d { weight, bias, in_ch, out_ch, geom }
        })
    }
}

/// Transposed 2×2 convolution with stride 2; doubles height and width.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvTranspose2x2 {
    /// Weight layout `(in, out, 2, 2)`.
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Self {
        store.scope(name, |s| {
            // each output pixel sees in_ch inputs
            let weight = s.add("weight", &[in_ch, out_ch, 2, 2], in_ch, Init::HE);
            let bias = s.add("bias", &[out_ch], in_ch, Init::ZEROS);
            ConvTranspose2x2 { weight, bias, in_ch, out_ch }
        })
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        store.scope(name, |s| BatchNorm2d {
            gamma: s.add("weight", &[channels], 1, Init::ONES),
            beta: s.add("bias", &[channels], 1, Init::ZEROS),
            running_mean: s.add_buffer("running_mean", &[channels], 0.0),
            running_var: s.add_buffer("running_var", &[channels], 1.0),
            channels,
        })
    }
}

/// Convolution without bias followed by batch normalization, the common
/// building block of the encoder and decoders.
#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, geom: ConvGeom) -> Self {
        store.scope(name, |s| ConvBn {
            conv: Conv2d::new(s, "conv", in_ch, out_ch, geom, false, Init::HE),
            bn: BatchNorm2d::new(s, "bn", out_ch),
        })
    }
}
