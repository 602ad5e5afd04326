use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBn, ConvGeom, Graph, NodeId, ParamStore};

use super::{scaled, Tap};

/// Bottleneck-block counts of the four residual stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    Resnet101,
    Resnet50,
    Resnet26,
}

impl Depth {
    pub fn blocks(self) -> [usize; 4] {
        match self {
            Depth::Resnet101 => [3, 4, 23, 3],
            Depth::Resnet50 => [3, 4, 6, 3],
            Depth::Resnet26 => [2, 2, 2, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub depth: Depth,
    /// Channel multiplier; 1.0 gives the full-size network.
    pub width: f64,
    /// 8 or 16.
    pub output_stride: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec { depth: Depth::Resnet101, width: 1.0, output_stride: 8 }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::Config(format!("width multiplier must be positive, got {}", self.width)));
        }
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::Config(format!("output stride must be 8 or 16, got {}", self.output_stride)));
        }
        Ok(())
    }
}

const EXPANSION: usize = 4;

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = g.conv2d(x, &self.reduce.conv);
        let y = g.batch_norm(y, &self.reduce.bn);
        let y = g.relu(y);
        let y = g.conv2d(y, &self.spatial.conv);
        let y = g.batch_norm(y, &self.spatial.bn);
        let y = g.relu(y);
        let y = g.conv2d(y, &self.expand.conv);
        let y = g.batch_norm(y, &self.expand.bn);
        let skip = match &self.shortcut {
            Some(s) => {
                let z = g.conv2d(x, &s.conv);
                g.batch_norm(z, &s.bn)
            }
            None => x,
        };
        let y = g.add(y, skip);
        g.relu(y)
    }
}

/// Activations of one encoder pass.
#[derive(Clone, Debug)]
pub struct Features {
    pub input: NodeId,
    pub bottleneck: NodeId,
    /// Ordered like [`Encoder::taps`].
    pub taps: Vec<NodeId>,
}

/// Residual encoder with atrous late stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    stem: ConvBn,
    stages: Vec<Vec<Bottleneck>>,
    stage_channels: [usize; 4],
    stem_channels: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.width;
        let stem_channels = scaled(64, w);
        let stem = ConvBn::new(store, "stem", 1, stem_channels, ConvGeom::new(7, 2, 3, 1));
        // the last stages trade stride for dilation to hold the output stride
        let (strides, dilations): ([usize; 4], [usize; 4]) = match spec.output_stride {
            8 => ([1, 2, 1, 1], [1, 1, 2, 4]),
            _ => ([1, 2, 2, 1], [1, 1, 1, 2]),
        };
        let mut in_ch = stem_channels;
        let mut prev_dilation = 1;
        let mut stages = Vec::new();
        let mut stage_channels = [0; 4];
        for (si, &n_blocks) in spec.depth.blocks().iter().enumerate() {
            let planes = scaled(64 << si, w);
            let out_ch = planes * EXPANSION;
            stage_channels[si] = out_ch;
            let blocks = store.scope(&format!("layer{}", si + 1), |s| {
                (0..n_blocks)
                    .map(|b| {
                        let stride = if b == 0 { strides[si] } else { 1 };
                        let dil = if b == 0 { prev_dilation } else { dilations[si] };
                        s.scope(&b.to_string(), |s| {
                            let reduce = ConvBn::new(s, "reduce", in_ch, planes, ConvGeom::new(1, 1, 0, 1));
                            let spatial = ConvBn::new(s, "spatial", planes, planes, ConvGeom::new(3, stride, dil, dil));
                            let expand = ConvBn::new(s, "expand", planes, out_ch, ConvGeom::new(1, 1, 0, 1));
                            let shortcut = (b == 0)
                                .then(|| ConvBn::new(s, "shortcut", in_ch, out_ch, ConvGeom::new(1, stride, 0, 1)));
                            in_ch = out_ch;
                            Bottleneck { reduce, spatial, expand, shortcut }
                        })
                    })
                    .collect::<Vec<_>>()
            });
            prev_dilation = dilations[si];
            stages.push(blocks);
        }
        Ok(Encoder { spec, stem, stages, stage_channels, stem_channels })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels[3]
    }

    /// Skip taps from deep to shallow: stage 3, stage 2, stage 1, stem and
    /// the raw input.
    pub fn taps(&self) -> Vec<Tap> {
        let os = self.spec.output_stride;
        vec![
            Tap { channels: self.stage_channels[2], stride: os.min(16) },
            Tap { channels: self.stage_channels[1], stride: 8 },
            Tap { channels: self.stage_channels[0], stride: 4 },
            Tap { channels: self.stem_channels, stride: 2 },
            Tap { channels: 1, stride: 1 },
        ]
    }

    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<Features> {
        let [_, c, h, w] = g.value(input).shape();
        let os = self.spec.output_stride;
        if c != 1 {
            return Err(Error::invalid(format!("encoder expects 1 input channel, got {c}")));
        }
        if h % os != 0 || w % os != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("input {h}x{w} is not divisible by the output stride {os}")));
        }
        let x = g.conv2d(input, &self.stem.conv);
        let x = g.batch_norm(x, &self.stem.bn);
        let stem = g.relu(x);
        let mut x = g.max_pool(stem);
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(g, x);
            }
            outs.push(x);
        }
        Ok(Features { input, bottleneck: outs[3], taps: vec![outs[2], outs[1], outs[0], stem, input] })
    }
}
