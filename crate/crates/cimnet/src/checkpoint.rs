//! Self-describing checkpoints: a `CIMT` container holding
//! `layer{i}.weight` / `layer{i}.bias` for every parameterized layer and
//! the model config JSON under `__config__`.

use std::path::Path;

use cimnet_core::model::{LayerParams, ModelGraph, ParamStore};

use crate::config::{parse_model_config, ModelConfig};
use crate::container::{Payload, TensorContainer};
use crate::error::{Error, Result};

pub const CONFIG_ENTRY: &str = "__config__";

pub fn checkpoint_container(graph: &ModelGraph, params: &ParamStore<f32>) -> Result<TensorContainer> {
    params.check(graph)?;
    let mut c = TensorContainer::new();
    c.insert(CONFIG_ENTRY, Payload::Raw(ModelConfig::from_graph(graph).to_json().into_bytes()))?;
    for (i, p) in params.layers.iter().enumerate() {
        if let Some(p) = p {
            let id = ModelGraph::layer_id(i);
            c.insert(format!("{id}.weight"), Payload::F32(p.weight.clone()))?;
            c.insert(format!("{id}.bias"), Payload::F32(p.bias.clone()))?;
        }
    }
    Ok(c)
}

pub fn checkpoint_from_container(c: &TensorContainer) -> Result<(ModelGraph, ParamStore<f32>)> {
    let text = std::str::from_utf8(c.raw(CONFIG_ENTRY)?).map_err(|_| Error::Data("checkpoint config is not UTF-8".into()))?;
    let graph = parse_model_config(text)?.build()?;
    let mut layers = Vec::with_capacity(graph.layers().len());
    for i in 0..graph.layers().len() {
        layers.push(match graph.param_shapes(i) {
            None => None,
            Some(_) => {
                let id = ModelGraph::layer_id(i);
                Some(LayerParams { weight: c.f32(&format!("{id}.weight"))?.clone(), bias: c.f32(&format!("{id}.bias"))?.clone() })
            }
        });
    }
    let params = ParamStore { layers };
    params.check(&graph)?;
    Ok((graph, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, graph: &ModelGraph, params: &ParamStore<f32>) -> Result<()> {
    checkpoint_container(graph, params)?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelGraph, ParamStore<f32>)> {
    checkpoint_from_container(&TensorContainer::load(path)?)
}
