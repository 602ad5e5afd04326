//! Generator checkpoints: safetensors payload plus JSON metadata carrying
//! the model spec, weight state and epoch.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::network::{Generator, ModelSpec};
use crate::objectives::WeightState;

const FORMAT: &str = "mtdsm-generator";
const VERSION: &str = "1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub generator: Generator,
    pub weights: WeightState,
    pub epoch: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes parameters and running statistics.
pub fn to_bytes(generator: &Generator, weights: &WeightState, epoch: usize) -> Result<Vec<u8>> {
    let store = generator.store();
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .params()
        .iter()
        .map(|p| (format!("param/{}", p.name), p))
        .chain(store.buffers().iter().map(|b| (format!("buffer/{}", b.name), b)))
        .map(|(name, p)| (name, p.shape.clone(), p.value.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), data).map_err(|e| bad(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("model_spec".to_string(), serde_json::to_string(generator.spec())?),
        ("weight_state".to_string(), serde_json::to_string(weights)?),
        ("epoch".to_string(), epoch.to_string()),
    ]);
    safetensors::serialize(views, Some(meta)).map_err(|e| bad(e.to_string()))
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().as_ref().ok_or_else(|| bad("missing metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing metadata field {k}")));
    if field("format")? != FORMAT {
        return Err(bad("not a generator checkpoint"));
    }
    if field("version")? != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", field("version")?)));
    }
    let spec: ModelSpec = serde_json::from_str(field("model_spec")?)?;
    let weights: WeightState = serde_json::from_str(field("weight_state")?)?;
    let epoch = field("epoch")?.parse().map_err(|_| bad("epoch is not an integer"))?;

    let tensors = SafeTensors::deserialize(buf).map_err(|e| bad(e.to_string()))?;
    let mut generator = Generator::new(&spec, 0)?;
    let store = generator.store_mut();
    let expected = store.params().len() + store.buffers().len();
    if tensors.len() != expected {
        return Err(bad(format!("{} tensors stored, model has {expected}", tensors.len())));
    }
    let fill = |prefix: &str, p: &mut crate::nn::Param| -> Result<()> {
        let name = format!("{prefix}/{}", p.name);
        let view = tensors.tensor(&name).map_err(|_| bad(format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != p.shape.as_slice() {
            return Err(bad(format!("tensor {name} has the wrong type or shape")));
        }
        for (v, b) in p.value.iter_mut().zip(view.data().chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        Ok(())
    };
    for p in store.params_mut() {
        fill("param", p)?;
    }
    for b in store.buffers_mut() {
        fill("buffer", b)?;
    }
    Ok(Checkpoint { generator, weights, epoch })
}

pub fn save(path: impl AsRef<Path>, generator: &Generator, weights: &WeightState, epoch: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(generator, weights, epoch)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
