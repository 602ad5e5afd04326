use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn, ConvGeom, ConvTranspose2x2, Graph, Init, Mat, NodeId, ParamStore};

use super::encoder::Features;
use super::{scaled, Tap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Unet,
    Deeplab,
    Pspnet,
}

impl DecoderKind {
    /// Number of encoder taps the decoder consumes.
    pub fn required_taps(self) -> usize {
        match self {
            DecoderKind::Unet => 5,
            DecoderKind::Deeplab => 1,
            DecoderKind::Pspnet => 0,
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(DecoderKind::Unet),
            "deeplab" => Ok(DecoderKind::Deeplab),
            "pspnet" => Ok(DecoderKind::Pspnet),
            _ => Err(Error::Config(format!("unknown decoder `{s}` (expected unet, deeplab or pspnet)"))),
        }
    }
}

/// How the last layer of a head is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadInit {
    /// Zero output at initialization.
    Zero,
    Standard,
}

fn head_conv(store: &mut ParamStore, in_ch: usize, out_ch: usize, init: HeadInit) -> Conv2d {
    let init = match init {
        HeadInit::Zero => Init::ZEROS,
        HeadInit::Standard => Init::FanIn { gain: 1.0 },
    };
    Conv2d::new(store, "head", in_ch, out_ch, ConvGeom::new(1, 1, 0, 1), true, init)
}

fn cbr(g: &mut Graph, x: NodeId, l: &ConvBn) -> NodeId {
    let y = g.conv2d(x, &l.conv);
    let y = g.batch_norm(y, &l.bn);
    g.relu(y)
}

fn conv3(dil: usize) -> ConvGeom {
    ConvGeom::new(3, 1, dil, dil)
}

fn conv1() -> ConvGeom {
    ConvGeom::new(1, 1, 0, 1)
}

#[derive(Clone, Debug)]
enum Stage {
    /// Resolution-preserving: conv, concat tap, two convs.
    Skip { entry: ConvBn, a: ConvBn, b: ConvBn },
    /// Upsampling: transposed conv, concat tap, two convs.
    Up { entry: ConvTranspose2x2, a: ConvBn, b: ConvBn },
}

#[derive(Clone, Debug)]
pub struct UnetDecoder {
    center: [ConvBn; 2],
    stages: Vec<Stage>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DeeplabDecoder {
    aspp: Vec<ConvBn>,
    pool: Conv2d,
    project: ConvBn,
    low: ConvBn,
    refine: [ConvBn; 2],
    head: Conv2d,
    tap: usize,
}

#[derive(Clone, Debug)]
pub struct PspDecoder {
    bins: Vec<(usize, ConvBn)>,
    fuse: ConvBn,
    head: Conv2d,
}

/// Task head mapping encoder features to a full-resolution map.
#[derive(Clone, Debug)]
pub enum Decoder {
    Unet(UnetDecoder),
    Deeplab(DeeplabDecoder),
    Pspnet(PspDecoder),
}

/// Atrous pyramid rates at output stride 16, doubled at stride 8.
const ASPP_RATES: [usize; 3] = [6, 12, 18];
const PSP_BINS: [usize; 4] = [1, 2, 3, 6];

impl Decoder {
    /// `taps` are ordered from deep to shallow as produced by the encoder;
    /// `bottleneck_stride` is the encoder output stride.
    pub fn new(
        store: &mut ParamStore,
        kind: DecoderKind,
        bottleneck: Tap,
        taps: &[Tap],
        out_ch: usize,
        width: f64,
        init: HeadInit,
    ) -> Result<Self> {
        if taps.len() < kind.required_taps() {
            return Err(Error::Config(format!(
                "{kind:?} decoder needs {} skip taps, got {}",
                kind.required_taps(),
                taps.len()
            )));
        }
        let ch = |c| scaled(c, width);
        Ok(match kind {
            DecoderKind::Unet => {
                let widths = [2048, 1024, 512, 256, 128, 64].map(ch);
                let center = [
                    ConvBn::new(store, "center.0", bottleneck.channels, widths[0], conv3(1)),
                    ConvBn::new(store, "center.1", widths[0], widths[0], conv3(1)),
                ];
                let mut stride = bottleneck.stride;
                let mut prev = widths[0];
                let mut stages = Vec::new();
                for (i, tap) in taps.iter().take(5).enumerate() {
                    let c = widths[i + 1];
                    let stage = store.scope(&format!("stage{i}"), |s| {
                        let a = ConvBn::new(s, "a", c + tap.channels, c, conv3(1));
                        let b = ConvBn::new(s, "b", c, c, conv3(1));
                        if tap.stride >= stride {
                            Stage::Skip { entry: ConvBn::new(s, "entry", prev, c, conv3(1)), a, b }
                        } else {
                            Stage::Up { entry: ConvTranspose2x2::new(s, "entry", prev, c), a, b }
                        }
                    });
                    stride = tap.stride;
                    prev = c;
                    stages.push(stage);
                }
                let head = head_conv(store, prev, out_ch, init);
                Decoder::Unet(UnetDecoder { center, stages, head })
            }
            DecoderKind::Deeplab => {
                let tap = taps
                    .iter()
                    .position(|t| t.stride == 4)
                    .ok_or_else(|| Error::Config("deeplab decoder needs a stride-4 skip tap".into()))?;
                let scale = 16 / bottleneck.stride.clamp(1, 16);
                let (a, l) = (ch(256), ch(48));
                let mut aspp = vec![ConvBn::new(store, "aspp.0", bottleneck.channels, a, conv1())];
                for (i, r) in ASPP_RATES.iter().enumerate() {
                    let d = r * scale;
                    aspp.push(ConvBn::new(store, &format!("aspp.{}", i + 1), bottleneck.channels, a, conv3(d)));
                }
                let pool = Conv2d::new(store, "aspp.pool", bottleneck.channels, a, conv1(), true, Init::HE);
                let project = ConvBn::new(store, "project", 5 * a, a, conv1());
                let low = ConvBn::new(store, "low", taps[tap].channels, l, conv1());
                let refine = [
                    ConvBn::new(store, "refine.0", a + l, a, conv3(1)),
                    ConvBn::new(store, "refine.1", a, a, conv3(1)),
                ];
                let head = head_conv(store, a, out_ch, init);
                Decoder::Deeplab(DeeplabDecoder { aspp, pool, project, low, refine, head, tap })
            }
            DecoderKind::Pspnet => {
                let p = ch(512);
                let bins = PSP_BINS
                    .iter()
                    .map(|&b| (b, ConvBn::new(store, &format!("bin{b}"), bottleneck.channels, p, conv1())))
                    .collect();
                let fuse = ConvBn::new(store, "fuse", bottleneck.channels + PSP_BINS.len() * p, p, conv3(1));
                let head = head_conv(store, p, out_ch, init);
                Decoder::Pspnet(PspDecoder { bins, fuse, head })
            }
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Unet(_) => DecoderKind::Unet,
            Decoder::Deeplab(_) => DecoderKind::Deeplab,
            Decoder::Pspnet(_) => DecoderKind::Pspnet,
        }
    }

    pub fn forward(&self, g: &mut Graph, f: &Features) -> NodeId {
        let [_, _, h, w] = g.value(f.input).shape();
        let out = match self {
            Decoder::Unet(d) => {
                let mut x = cbr(g, f.bottleneck, &d.center[0]);
                x = cbr(g, x, &d.center[1]);
                for (stage, &tap) in d.stages.iter().zip(&f.taps) {
                    let [_, _, th, tw] = g.value(tap).shape();
                    let (a, b) = match stage {
                        Stage::Skip { entry, a, b } => {
                            x = cbr(g, x, entry);
                            (a, b)
                        }
                        Stage::Up { entry, a, b } => {
                            x = g.conv_transpose2x2(x, entry);
                            x = g.relu(x);
                            (a, b)
                        }
                    };
                    x = g.resize(x, th, tw);
                    x = g.concat(&[x, tap]);
                    x = cbr(g, x, a);
                    x = cbr(g, x, b);
                }
                g.conv2d(x, &d.head)
            }
            Decoder::Deeplab(d) => {
                let x = f.bottleneck;
                let [_, _, bh, bw] = g.value(x).shape();
                let mut branches: Vec<NodeId> = d.aspp.iter().map(|l| cbr(g, x, l)).collect();
                let pooled = g.resample(x, Rc::new(Mat::adaptive_avg(bh, 1)), Rc::new(Mat::adaptive_avg(bw, 1)));
                let pooled = g.conv2d(pooled, &d.pool);
                let pooled = g.relu(pooled);
                branches.push(g.resize(pooled, bh, bw));
                let y = g.concat(&branches);
                let y = cbr(g, y, &d.project);
                let low_in = f.taps[d.tap];
                let [_, _, lh, lw] = g.value(low_in).shape();
                let y = g.resize(y, lh, lw);
                let low = cbr(g, low_in, &d.low);
                let y = g.concat(&[y, low]);
                let y = cbr(g, y, &d.refine[0]);
                let y = cbr(g, y, &d.refine[1]);
                g.conv2d(y, &d.head)
            }
            Decoder::Pspnet(d) => {
                let x = f.bottleneck;
                let [_, _, bh, bw] = g.value(x).shape();
                let mut parts = vec![x];
                for (bins, l) in &d.bins {
                    let p = g.resample(x, Rc::new(Mat::adaptive_avg(bh, *bins)), Rc::new(Mat::adaptive_avg(bw, *bins)));
                    let p = cbr(g, p, l);
                    parts.push(g.resize(p, bh, bw));
                }
                let y = g.concat(&parts);
                let y = cbr(g, y, &d.fuse);
                g.conv2d(y, &d.head)
            }
        };
        g.resize(out, h, w)
    }
}
