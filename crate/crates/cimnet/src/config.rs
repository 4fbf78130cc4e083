//! JSON model and training configs.
//!
//! ```json
//! {"name": "cimnet-v1-s8",
//!  "input": {"channels": 3, "height": 96, "width": 96},
//!  "layers": [{"kind": "cimconv", "stride": 8, "c_out": 32, "f_scale": "1/1", "activation": "relu"}, ...]}
//! ```

use std::fs;
use std::path::Path;

use cimnet_core::cimconv::{Activation, Ratio};
use cimnet_core::model::{InputSpec, LayerSpec, ModelGraph};
use cimnet_core::train::{LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub input: InputConfig,
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LayerConfig {
    #[serde(rename = "conv")]
    Conv {
        c_out: usize,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "one")]
        padding: usize,
    },
    #[serde(rename = "cimconv")]
    CimConv {
        stride: usize,
        c_out: usize,
        #[serde(with = "ratio_str")]
        f_scale: Ratio,
        #[serde(default, with = "activation_str")]
        activation: Activation,
    },
    #[serde(rename = "pixelshuffle")]
    PixelShuffle { factor: usize },
    #[serde(rename = "relu")]
    Relu {},
    #[serde(rename = "skip_save")]
    SkipSave { id: u32 },
    #[serde(rename = "skip_add")]
    SkipAdd { id: u32 },
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

mod ratio_str {
    use super::*;

    pub fn serialize<S: serde::Serializer>(r: &Ratio, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&r.to_string())
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Ratio, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod activation_str {
    use super::*;

    pub fn serialize<S: serde::Serializer>(a: &Activation, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(a.as_str())
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Activation, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl From<LayerConfig> for LayerSpec {
    fn from(l: LayerConfig) -> Self {
        match l {
            LayerConfig::Conv { c_out, kernel, stride, padding } => LayerSpec::Conv { c_out, kernel, stride, padding },
            LayerConfig::CimConv { stride, c_out, f_scale, activation } => LayerSpec::CimConv { stride, c_out, f_scale, activation },
            LayerConfig::PixelShuffle { factor } => LayerSpec::PixelShuffle { factor },
            LayerConfig::Relu {} => LayerSpec::Relu,
            LayerConfig::SkipSave { id } => LayerSpec::SkipSave { id },
            LayerConfig::SkipAdd { id } => LayerSpec::SkipAdd { id },
        }
    }
}

impl From<LayerSpec> for LayerConfig {
    fn from(l: LayerSpec) -> Self {
        match l {
            LayerSpec::Conv { c_out, kernel, stride, padding } => LayerConfig::Conv { c_out, kernel, stride, padding },
            LayerSpec::CimConv { stride, c_out, f_scale, activation } => LayerConfig::CimConv { stride, c_out, f_scale, activation },
            LayerSpec::PixelShuffle { factor } => LayerConfig::PixelShuffle { factor },
            LayerSpec::Relu => LayerConfig::Relu {},
            LayerSpec::SkipSave { id } => LayerConfig::SkipSave { id },
            LayerSpec::SkipAdd { id } => LayerConfig::SkipAdd { id },
        }
    }
}

impl ModelConfig {
    pub fn from_graph(g: &ModelGraph) -> Self {
        let i = g.input();
        Self {
            name: g.name().to_owned(),
            input: InputConfig { channels: i.channels, height: i.height, width: i.width },
            layers: g.layers().iter().map(|&l| l.into()).collect(),
        }
    }

    pub fn build(&self) -> Result<ModelGraph> {
        let i = self.input;
        let input = InputSpec { channels: i.channels, height: i.height, width: i.width };
        Ok(ModelGraph::new(self.name.clone(), input, self.layers.iter().map(|l| l.clone().into()).collect())?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at {path}: {}", e.into_inner()))
    })
}

pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    parse_json(text)
}

/// Parses and builds a model config file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_model_config(&text)
        .and_then(|c| c.build())
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPiece {
    pub until_epoch: u32,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfigFile {
    pub epochs: u32,
    pub batch: usize,
    pub patch: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
    /// Defaults to the standard 1e-3 / 1e-4 / 1e-6 schedule.
    pub lr_schedule: Option<Vec<LrPiece>>,
    pub steps_per_epoch: Option<usize>,
    pub val_sigma: f64,
}

impl Default for TrainConfigFile {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch: d.batch,
            patch: d.patch,
            sigma_min: d.sigma_min,
            sigma_max: d.sigma_max,
            seed: d.seed,
            lr_schedule: None,
            steps_per_epoch: None,
            val_sigma: d.val_sigma,
        }
    }
}

impl TrainConfigFile {
    pub fn build(&self) -> Result<TrainConfig> {
        let schedule = match &self.lr_schedule {
            Some(p) => LrSchedule::new(p.iter().map(|p| (p.until_epoch, p.lr)).collect())?,
            None => LrSchedule::standard(self.epochs)?,
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            patch: self.patch,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            seed: self.seed,
            schedule,
            steps_per_epoch: self.steps_per_epoch,
            val_sigma: self.val_sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    parse_json::<TrainConfigFile>(text)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_string() {
        let c = parse_model_config(
            r#"{"name":"x","input":{"channels":3,"height":8,"width":8},
                "layers":[{"kind":"cimconv","stride":2,"c_out":3,"f_scale":"1/2"},
                          {"kind":"pixelshuffle","factor":2}]}"#,
        )
        .unwrap();
        match &c.layers[0] {
            LayerConfig::CimConv { f_scale, activation, .. } => {
                assert_eq!(*f_scale, Ratio::HALF);
                assert_eq!(*activation, Activation::Relu);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_paths() {
        let e = parse_model_config(r#"{"name":"x","input":{"channels":3,"height":8,"width":8,"depth":1},"layers":[]}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("input") && e.contains("depth"), "{e}");
        let e = parse_model_config(r#"{"name":"x","input":{"channels":3,"height":8,"width":8},"layers":[{"kind":"relu"},{"kind":"conv","c_out":"a"}]}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("layers[1]"), "{e}");
        let e = parse_model_config(r#"{"name":"x","input":{"channels":3,"height":8,"width":8},"layers":[{"kind":"relu","x":1}]}"#);
        assert!(e.is_err());
        let e = parse_model_config(r#"{"name":"x","input":{"channels":3,"height":8,"width":8},"layers":[{"kind":"cimconv","stride":2,"c_out":3,"f_scale":"1/0"}]}"#);
        assert!(e.is_err());
    }

    #[test]
    fn stride_mismatch_names_layer() {
        let c = parse_model_config(
            r#"{"name":"x","input":{"channels":3,"height":10,"width":10},
                "layers":[{"kind":"relu"},{"kind":"cimconv","stride":4,"c_out":3,"f_scale":"1"}]}"#,
        )
        .unwrap();
        let e = c.build().unwrap_err().to_string();
        assert!(e.contains("layer 1") && e.contains("cimconv"), "{e}");
    }

    #[test]
    fn train_config_defaults_and_schedule() {
        let c = parse_train_config("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        let c = parse_train_config(r#"{"epochs":3,"lr_schedule":[{"until_epoch":3,"lr":0.01}]}"#).unwrap();
        assert_eq!(c.schedule.lr_at_epoch(2).unwrap(), 0.01);
        assert!(parse_train_config(r#"{"epochs":3,"lr":1}"#).is_err());
        assert!(parse_train_config(r#"{"sigma_min":9,"sigma_max":5}"#).is_err());
    }
}
