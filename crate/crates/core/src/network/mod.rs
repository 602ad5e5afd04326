//! Shared-encoder generator with task heads, and the patch discriminator.

mod decoders;
mod discriminator;
mod encoder;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Mode, NodeId, ParamStore, Tensor};
use crate::objectives::{Objective, ObjectiveSet};
use crate::raster::NUM_CLASSES;

pub use decoders::{Decoder, DecoderKind, HeadInit};
pub use discriminator::{receptive_field, Discriminator};
pub use encoder::{Depth, Encoder, EncoderSpec, Features};

/// An encoder feature map available to decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    pub channels: usize,
    /// Downsampling factor relative to the input.
    pub stride: usize,
}

/// Channel count after applying a width multiplier.
pub(crate) fn scaled(channels: usize, width: f64) -> usize {
    ((channels as f64 * width).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub dsm_decoder: DecoderKind,
    /// Present exactly when the segmentation objective is active.
    pub seg_decoder: Option<DecoderKind>,
    pub objectives: ObjectiveSet,
    pub seg_classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            encoder: EncoderSpec::default(),
            dsm_decoder: DecoderKind::Unet,
            seg_decoder: Some(DecoderKind::Deeplab),
            objectives: ObjectiveSet::ALL,
            seg_classes: NUM_CLASSES,
        }
    }
}

impl ModelSpec {
    /// A spec with the given objectives; the segmentation decoder follows
    /// the seg objective.
    pub fn with_objectives(mut self, objectives: ObjectiveSet) -> Self {
        self.objectives = objectives;
        if objectives.contains(Objective::Seg) {
            self.seg_decoder.get_or_insert(DecoderKind::Deeplab);
        } else {
            self.seg_decoder = None;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !self.objectives.contains(Objective::L1) {
            return Err(Error::Config("the l1 objective must always be active".into()));
        }
        if self.objectives.contains(Objective::Seg) != self.seg_decoder.is_some() {
            return Err(Error::Config("a segmentation decoder is required exactly when seg is active".into()));
        }
        if self.seg_classes != NUM_CLASSES {
            return Err(Error::Config(format!("seg_classes must be {NUM_CLASSES}")));
        }
        Ok(())
    }
}

/// Learnable scalars per part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartCounts {
    pub encoder: usize,
    pub dsm_head: usize,
    pub seg_head: Option<usize>,
}

/// Node handles of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    /// Normalized heights, `(n, 1, h, w)`.
    pub dsm: NodeId,
    /// Class logits, `(n, 3, h, w)`.
    pub seg: Option<NodeId>,
}

/// Encoder plus DSM head and optional segmentation head. The DSM head
/// predicts a correction that is added to the (normalized) input.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: ModelSpec,
    store: ParamStore,
    encoder: Encoder,
    dsm_head: Decoder,
    seg_head: Option<Decoder>,
}

impl Generator {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::build(spec, ParamStore::new(seed))
    }

    /// Parameter shapes only; enough for counting full-size models.
    pub fn shape_only(spec: &ModelSpec) -> Result<Self> {
        Self::build(spec, ParamStore::shape_only())
    }

    fn build(spec: &ModelSpec, mut store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let encoder = store.scope("encoder", |s| Encoder::new(s, spec.encoder))?;
        let bottleneck = Tap { channels: encoder.bottleneck_channels(), stride: spec.encoder.output_stride };
        let taps = encoder.taps();
        let w = spec.encoder.width;
        let dsm_head =
            store.scope("dsm_head", |s| Decoder::new(s, spec.dsm_decoder, bottleneck, &taps, 1, w, HeadInit::Zero))?;
        let seg_head = spec
            .seg_decoder
            .map(|k| {
                store.scope("seg_head", |s| Decoder::new(s, k, bottleneck, &taps, spec.seg_classes, w, HeadInit::Standard))
            })
            .transpose()?;
        Ok(Generator { spec: spec.clone(), store, encoder, dsm_head, seg_head })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn parameter_counts(&self) -> PartCounts {
        PartCounts {
            encoder: self.store.count_prefix("encoder"),
            dsm_head: self.store.count_prefix("dsm_head"),
            seg_head: self.seg_head.as_ref().map(|_| self.store.count_prefix("seg_head")),
        }
    }

    /// Both heads read the same encoder activations.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<GeneratorOutput> {
        let features = self.encoder.forward(g, input)?;
        let correction = self.dsm_head.forward(g, &features);
        let dsm = g.add(input, correction);
        let seg = self.seg_head.as_ref().map(|d| d.forward(g, &features));
        Ok(GeneratorOutput { dsm, seg })
    }

    /// Inference pass on a normalized `(n, 1, h, w)` batch.
    pub fn predict(&self, input: Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new(&self.store, Mode::Eval).without_param_grads();
        let x = g.input(input);
        let out = self.forward(&mut g, x)?;
        let dsm = g.value(out.dsm).clone();
        let seg = out.seg.map(|s| g.value(s).clone());
        Ok((dsm, seg))
    }
}
