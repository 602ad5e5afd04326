use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvGeom, Graph, Init, NodeId, ParamStore};

use super::scaled;

const LEAK: f32 = 0.2;

#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

/// Conditional patch discriminator. Consumes the stereo DSM and a candidate
/// DSM stacked as two channels and emits one score per image patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    store: ParamStore,
    blocks: Vec<Block>,
    head: Conv2d,
}

/// Kernel and stride of every convolution, input to output.
const LAYERS: [(usize, usize); 5] = [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)];

impl Discriminator {
    pub fn new(width: f64, seed: u64) -> Self {
        Self::build(ParamStore::new(seed), width)
    }

    pub fn shape_only(width: f64) -> Self {
        Self::build(ParamStore::shape_only(), width)
    }

    fn build(mut store: ParamStore, width: f64) -> Self {
        let chans = [2, scaled(64, width), scaled(128, width), scaled(256, width), scaled(512, width)];
        let mut blocks = Vec::new();
        for (i, &(k, s)) in LAYERS[..4].iter().enumerate() {
            let (cin, cout) = (chans[i], chans[i + 1]);
            let block = store.scope(&format!("block{i}"), |st| {
                let first = i == 0;
                let conv = Conv2d::new(st, "conv", cin, cout, ConvGeom::new(k, s, 1, 1), first, Init::HE);
                let bn = (!first).then(|| BatchNorm2d::new(st, "bn", cout));
                Block { conv, bn }
            });
            blocks.push(block);
        }
        let (k, s) = LAYERS[4];
        let head = Conv2d::new(&mut store, "head", chans[4], 1, ConvGeom::new(k, s, 1, 1), true, Init::FanIn { gain: 1.0 });
        Discriminator { store, blocks, head }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    /// Receptive field in input pixels of one output score.
    pub fn receptive_field() -> usize {
        receptive_field(&LAYERS)
    }

    /// Smallest accepted input side.
    pub fn min_input() -> usize {
        // 2 * 2 * 2 * 4 covers the three stride-2 layers and two valid 4x4s
        32
    }

    /// `condition` and `candidate` are `(n, 1, h, w)` nodes of `g`, which
    /// must be built over [`Self::store`].
    pub fn forward(&self, g: &mut Graph, condition: NodeId, candidate: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = g.value(condition).shape();
        if g.value(candidate).shape() != g.value(condition).shape() {
            return Err(Error::invalid("discriminator inputs differ in shape"));
        }
        if h < Self::min_input() || w < Self::min_input() {
            return Err(Error::invalid(format!("discriminator input {h}x{w} is smaller than {}", Self::min_input())));
        }
        let mut x = g.concat(&[condition, candidate]);
        for b in &self.blocks {
            x = g.conv2d(x, &b.conv);
            if let Some(bn) = &b.bn {
                x = g.batch_norm(x, bn);
            }
            x = g.leaky_relu(x, LEAK);
        }
        Ok(g.conv2d(x, &self.head))
    }
}

/// Receptive field of a chain of `(kernel, stride)` layers, by the backward
/// recurrence `r = r * stride + (kernel - stride)`.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    layers.iter().rev().fold(1, |r, &(k, s)| r * s + (k - s))
}
