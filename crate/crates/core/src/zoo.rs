//! Builders for the five denoiser architectures.
//!
//! All five share a U-shaped body of 3×3 convolutions with two 2× down- and
//! up-sampling stages:
//!
//! * `fastdvd-block`: the plain denoising block (3×3 convolutions, stride-2
//!   downsampling, Conv+PixelShuffle upsampling).
//! * `o1-s{S}`: the block with its first convolution widened to a
//!   `(S+1)×(S+1)` kernel at stride `S` and a Conv+PixelShuffle(S) tail.
//! * `o2-s{S}`: `o1` wrapped in two resolution-preserving smoothing modules
//!   (strided conv + PixelShuffle).
//! * `abla-s{S}`: `o2` with both smoothing modules swapped for CIM-CONV.
//! * `cimnet-v1-s{S}`: smoothing, downsampling and upsampling all done by
//!   CIM-CONV, no input-to-output residual.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::cimconv::{cimconv_kernel, Activation, Ratio};
use crate::error::{Error, Result};
use crate::model::{InputSpec, LayerSpec, ModelGraph, OUTPUT_CHANNELS};

/// Strides the stride sweeps cover.
pub const STRIDES: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZooConfig {
    /// Channel widths of the full-, half- and quarter-resolution stages.
    pub widths: [usize; 3],
    pub in_channels: usize,
    /// 3×3 convolutions after each downsampling step.
    pub encoder_depth: usize,
    /// 3×3 convolutions before each upsampling step.
    pub decoder_depth: usize,
    /// Encoder-to-decoder skip additions.
    pub skips: bool,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128], in_channels: 3, encoder_depth: 2, decoder_depth: 1, skips: false }
    }
}

impl ZooConfig {
    pub fn with_widths(widths: [usize; 3]) -> Self {
        Self { widths, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    FastDvdBlock,
    BaselineO1,
    BaselineO2,
    AblaNet,
    CimNet,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::FastDvdBlock, Preset::BaselineO1, Preset::BaselineO2, Preset::AblaNet, Preset::CimNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::FastDvdBlock => "fastdvd-block",
            Preset::BaselineO1 => "o1",
            Preset::BaselineO2 => "o2",
            Preset::AblaNet => "abla",
            Preset::CimNet => "cimnet-v1",
        }
    }

    /// Graph name, e.g. `cimnet-v1-s8`.
    pub fn graph_name(self, stride: usize) -> String {
        match self {
            Preset::FastDvdBlock => String::from(self.as_str()),
            _ => format!("{}-s{stride}", self.as_str()),
        }
    }

    pub fn build(self, stride: usize, height: usize, width: usize, cfg: &ZooConfig) -> Result<ModelGraph> {
        match self {
            Preset::FastDvdBlock => build_fastdvd_block_with(height, width, cfg),
            Preset::BaselineO1 => build_baseline_o1_with(stride, height, width, cfg),
            Preset::BaselineO2 => build_baseline_o2_with(stride, height, width, cfg),
            Preset::AblaNet => build_abla_net_with(stride, height, width, cfg),
            Preset::CimNet => build_cim_net_with(stride, height, width, cfg),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if STRIDES.contains(&stride) {
        Ok(())
    } else {
        Err(Error::Config(format!("stride {stride} not in {STRIDES:?}")))
    }
}

fn check_divisible(what: &str, height: usize, width: usize, d: usize) -> Result<()> {
    if !height.is_multiple_of(d) || !width.is_multiple_of(d) || height == 0 || width == 0 {
        return Err(Error::Config(format!("{what} needs input dims divisible by {d}, got {height}x{width}")));
    }
    Ok(())
}

fn input(cfg: &ZooConfig, height: usize, width: usize) -> InputSpec {
    InputSpec { channels: cfg.in_channels, height, width }
}

fn conv(c_out: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv { c_out, kernel, stride, padding: 1 }
}

fn cim(stride: usize, c_out: usize, f_scale: Ratio, activation: Activation) -> LayerSpec {
    LayerSpec::CimConv { stride, c_out, f_scale, activation }
}

fn push_convs(layers: &mut Vec<LayerSpec>, c: usize, n: usize) {
    for _ in 0..n {
        layers.push(LayerSpec::conv3x3(c));
        layers.push(LayerSpec::Relu);
    }
}

fn skip(layers: &mut Vec<LayerSpec>, cfg: &ZooConfig, layer: LayerSpec) {
    if cfg.skips {
        layers.push(layer);
    }
}

/// Body shared by the denoising block and both baselines. `tail_channels`
/// is the channel count restored at full resolution by the final
/// Conv+PixelShuffle(S).
fn o1_layers(stride: usize, cfg: &ZooConfig, tail_channels: usize) -> Vec<LayerSpec> {
    let [c1, c2, c3] = cfg.widths;
    let mut l = Vec::new();
    l.push(conv(c1, cimconv_kernel(stride), stride));
    l.push(LayerSpec::Relu);
    push_convs(&mut l, c1, 1);
    skip(&mut l, cfg, LayerSpec::SkipSave { id: 0 });
    l.push(conv(c2, 3, 2));
    l.push(LayerSpec::Relu);
    push_convs(&mut l, c2, cfg.encoder_depth);
    skip(&mut l, cfg, LayerSpec::SkipSave { id: 1 });
    l.push(conv(c3, 3, 2));
    l.push(LayerSpec::Relu);
    push_convs(&mut l, c3, cfg.encoder_depth);
    push_convs(&mut l, c3, cfg.decoder_depth);
    l.push(LayerSpec::conv3x3(c2 * 4));
    l.push(LayerSpec::PixelShuffle { factor: 2 });
    skip(&mut l, cfg, LayerSpec::SkipAdd { id: 1 });
    push_convs(&mut l, c2, cfg.decoder_depth);
    l.push(LayerSpec::conv3x3(c1 * 4));
    l.push(LayerSpec::PixelShuffle { factor: 2 });
    skip(&mut l, cfg, LayerSpec::SkipAdd { id: 0 });
    push_convs(&mut l, c1, 1);
    l.push(LayerSpec::conv3x3(tail_channels * stride * stride));
    if stride > 1 {
        l.push(LayerSpec::PixelShuffle { factor: stride });
    }
    l
}

/// Smoothing module: strided `(S+1)×(S+1)` conv to `c_out·S²` channels then
/// PixelShuffle(S), preserving resolution.
fn smoothing_module(stride: usize, c_out: usize) -> [LayerSpec; 2] {
    [conv(c_out * stride * stride, cimconv_kernel(stride), stride), LayerSpec::PixelShuffle { factor: stride }]
}

pub fn build_fastdvd_block(height: usize, width: usize) -> Result<ModelGraph> {
    build_fastdvd_block_with(height, width, &ZooConfig::default())
}

pub fn build_fastdvd_block_with(height: usize, width: usize, cfg: &ZooConfig) -> Result<ModelGraph> {
    check_divisible("fastdvd-block", height, width, 4)?;
    ModelGraph::new(Preset::FastDvdBlock.graph_name(1), input(cfg, height, width), o1_layers(1, cfg, OUTPUT_CHANNELS))
}

pub fn build_baseline_o1(stride: usize, height: usize, width: usize) -> Result<ModelGraph> {
    build_baseline_o1_with(stride, height, width, &ZooConfig::default())
}

pub fn build_baseline_o1_with(stride: usize, height: usize, width: usize, cfg: &ZooConfig) -> Result<ModelGraph> {
    check_stride(stride)?;
    check_divisible("o1", height, width, 4 * stride)?;
    ModelGraph::new(Preset::BaselineO1.graph_name(stride), input(cfg, height, width), o1_layers(stride, cfg, OUTPUT_CHANNELS))
}

fn o2_layers(stride: usize, cfg: &ZooConfig) -> Vec<LayerSpec> {
    let c1 = cfg.widths[0];
    let mut l = Vec::new();
    l.extend(smoothing_module(stride, c1));
    l.push(LayerSpec::Relu);
    l.extend(o1_layers(stride, cfg, c1));
    l.push(LayerSpec::Relu);
    l.extend(smoothing_module(stride, OUTPUT_CHANNELS));
    l
}

pub fn build_baseline_o2(stride: usize, height: usize, width: usize) -> Result<ModelGraph> {
    build_baseline_o2_with(stride, height, width, &ZooConfig::default())
}

pub fn build_baseline_o2_with(stride: usize, height: usize, width: usize, cfg: &ZooConfig) -> Result<ModelGraph> {
    check_stride(stride)?;
    check_divisible("o2", height, width, 4 * stride)?;
    ModelGraph::new(Preset::BaselineO2.graph_name(stride), input(cfg, height, width), o2_layers(stride, cfg))
}

pub fn build_abla_net(stride: usize, height: usize, width: usize) -> Result<ModelGraph> {
    build_abla_net_with(stride, height, width, &ZooConfig::default())
}

pub fn build_abla_net_with(stride: usize, height: usize, width: usize, cfg: &ZooConfig) -> Result<ModelGraph> {
    check_stride(stride)?;
    check_divisible("abla", height, width, 4 * stride)?;
    let o2 = o2_layers(stride, cfg);
    let n = o2.len();
    let mut l = Vec::with_capacity(n - 2);
    l.push(cim(stride, cfg.widths[0], Ratio::ONE, Activation::Identity));
    l.extend_from_slice(&o2[2..n - 2]);
    l.push(cim(stride, OUTPUT_CHANNELS, Ratio::ONE, Activation::Identity));
    ModelGraph::new(Preset::AblaNet.graph_name(stride), input(cfg, height, width), l)
}

pub fn build_cim_net(stride: usize, height: usize, width: usize) -> Result<ModelGraph> {
    build_cim_net_with(stride, height, width, &ZooConfig::default())
}

/// `cimnet-v1`: stride `S` smoothing layers at both ends, resampling
/// layers at stride `max(S, 2)` so `F = 1/2` keeps `S_out` integral.
pub fn build_cim_net_with(stride: usize, height: usize, width: usize, cfg: &ZooConfig) -> Result<ModelGraph> {
    check_stride(stride)?;
    let s2 = stride.max(2);
    check_divisible("cimnet-v1", height, width, stride)?;
    check_divisible("cimnet-v1", height, width, 4 * s2)?;
    let [c1, c2, c3] = cfg.widths;
    let mut l = Vec::new();
    l.push(cim(stride, c1, Ratio::ONE, Activation::Relu));
    skip(&mut l, cfg, LayerSpec::SkipSave { id: 0 });
    l.push(cim(s2, c2, Ratio::HALF, Activation::Relu));
    push_convs(&mut l, c2, cfg.encoder_depth);
    skip(&mut l, cfg, LayerSpec::SkipSave { id: 1 });
    l.push(cim(s2, c3, Ratio::HALF, Activation::Relu));
    push_convs(&mut l, c3, cfg.encoder_depth);
    push_convs(&mut l, c3, cfg.decoder_depth);
    l.push(cim(s2, c2, Ratio::TWO, Activation::Relu));
    push_convs(&mut l, c2, cfg.decoder_depth);
    skip(&mut l, cfg, LayerSpec::SkipAdd { id: 1 });
    l.push(cim(s2, c1, Ratio::TWO, Activation::Relu));
    skip(&mut l, cfg, LayerSpec::SkipAdd { id: 0 });
    l.push(cim(stride, OUTPUT_CHANNELS, Ratio::ONE, Activation::Identity));
    ModelGraph::new(Preset::CimNet.graph_name(stride), input(cfg, height, width), l)
}
