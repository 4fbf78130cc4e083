//! Declarative layer graphs and their parameters.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerSpec`]s plus the input
//! geometry. Construction runs shape inference over the whole chain, so a
//! graph that exists is known to map `[N, C_in, H, W]` to `[N, 3, H, W]`.
//! Parameters live separately in a [`ParamStore`] indexed by layer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::cimconv::{cimconv_tape, Activation, CimConvParams, CimConvSpec, Ratio, CIMCONV_PADDING};
use crate::error::{shape_err, Error, Result};
use crate::nn::{conv2d_tape, conv_output_dim, ConvParams};
use crate::ops::{self, BlockLayout};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Output channels of every denoiser graph.
pub const OUTPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv {
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    CimConv {
        stride: usize,
        c_out: usize,
        f_scale: Ratio,
        activation: Activation,
    },
    PixelShuffle {
        factor: usize,
    },
    Relu,
    /// Remembers the current activation under `id`.
    SkipSave {
        id: u32,
    },
    /// Adds the activation saved under `id` to the current one.
    SkipAdd {
        id: u32,
    },
}

impl LayerSpec {
    pub fn conv3x3(c_out: usize) -> Self {
        LayerSpec::Conv { c_out, kernel: 3, stride: 1, padding: 1 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::CimConv { .. } => "cimconv",
            LayerSpec::PixelShuffle { .. } => "pixelshuffle",
            LayerSpec::Relu => "relu",
            LayerSpec::SkipSave { .. } => "skip_save",
            LayerSpec::SkipAdd { .. } => "skip_add",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::CimConv { .. })
    }
}

/// Channels and spatial size expected at the graph input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-sample feature shape `[C, H, W]`.
pub type FeatureShape = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    name: String,
    input: InputSpec,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input of layer `i`; the last entry is the output.
    shapes: Vec<FeatureShape>,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input: InputSpec, layers: Vec<LayerSpec>) -> Result<Self> {
        let shapes = infer_shapes(&input, &layers)?;
        let out = *shapes.last().unwrap();
        let want = [OUTPUT_CHANNELS, input.height, input.width];
        if out != want {
            return Err(Error::Config(format!(
                "graph output {out:?} does not match denoiser contract {want:?}"
            )));
        }
        Ok(Self { name: name.into(), input, layers, shapes })
    }

    /// The same layers re-validated for a different spatial size.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let input = InputSpec { height, width, ..self.input };
        Self::new(self.name.clone(), input, self.layers.clone())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Input shape of layer `i`.
    pub fn layer_input(&self, i: usize) -> FeatureShape {
        self.shapes[i]
    }

    /// Output shape of layer `i`.
    pub fn layer_output(&self, i: usize) -> FeatureShape {
        self.shapes[i + 1]
    }

    pub fn output_shape(&self) -> FeatureShape {
        *self.shapes.last().unwrap()
    }

    /// Key used for this layer's parameters in checkpoints.
    pub fn layer_id(i: usize) -> String {
        format!("layer{i}")
    }

    pub fn cimconv_spec(&self, i: usize) -> Option<CimConvSpec> {
        match self.layers[i] {
            LayerSpec::CimConv { stride, c_out, f_scale, activation } => {
                Some(CimConvSpec::new(stride, self.shapes[i][0], c_out, f_scale, activation).expect("validated at build"))
            }
            _ => None,
        }
    }

    /// Weight and bias shapes of a parameterized layer.
    pub fn param_shapes(&self, i: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let c_in = self.shapes[i][0];
        match self.layers[i] {
            LayerSpec::Conv { c_out, kernel, .. } => Some((vec![c_out, c_in, kernel, kernel], vec![c_out])),
            LayerSpec::CimConv { .. } => {
                let spec = self.cimconv_spec(i)?;
                Some((vec![spec.in_features(), spec.out_features()], vec![spec.out_features()]))
            }
            _ => None,
        }
    }

    /// Length of the flattened window vector and number of outputs per
    /// window of a matrix-bearing layer: `(K, D_out)`.
    pub fn mvm_dims(&self, i: usize) -> Option<(usize, usize)> {
        let (w, b) = self.param_shapes(i)?;
        Some(match self.layers[i] {
            LayerSpec::Conv { .. } => (w[1] * w[2] * w[3], b[0]),
            _ => (w[0], w[1]),
        })
    }

    /// Sliding windows evaluated by layer `i` (0 for layers without an MVM).
    pub fn window_count(&self, i: usize) -> usize {
        let [_, h, w] = self.shapes[i];
        match self.layers[i] {
            LayerSpec::Conv { kernel, stride, padding, .. } => {
                let ho = conv_output_dim(h, kernel, stride, padding).expect("validated at build");
                let wo = conv_output_dim(w, kernel, stride, padding).expect("validated at build");
                ho * wo
            }
            LayerSpec::CimConv { .. } => self.cimconv_spec(i).unwrap().window_count(h, w).expect("validated at build"),
            _ => 0,
        }
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let layers = (0..self.layers.len())
            .map(|i| {
                let mut rng = Rng::substream(seed, "init", i as u64);
                match self.layers[i] {
                    LayerSpec::Conv { c_out, kernel, stride, padding } => {
                        let p = ConvParams::kaiming(self.shapes[i][0], c_out, kernel, stride, padding, &mut rng);
                        Some(LayerParams { weight: p.weight, bias: p.bias })
                    }
                    LayerSpec::CimConv { .. } => {
                        let p = CimConvParams::kaiming(&self.cimconv_spec(i).unwrap(), &mut rng);
                        Some(LayerParams { weight: p.weight, bias: p.bias })
                    }
                    _ => None,
                }
            })
            .collect();
        ParamStore { layers }
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        let want = [self.input.channels, self.input.height, self.input.width];
        if [c, h, w] != want {
            return Err(shape_err("graph input", format!("{:?}, graph {} expects [N, {}, {}, {}]", x.shape(), self.name, want[0], want[1], want[2])));
        }
        Ok(())
    }

    /// Registers the parameters on `tape`, tracked when `trainable`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, trainable: bool) -> Result<Vec<Option<LayerVars>>> {
        params.check(self)?;
        Ok(params
            .layers
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerVars {
                    weight: tape.leaf(p.weight.clone(), trainable),
                    bias: tape.leaf(p.bias.clone(), trainable),
                })
            })
            .collect())
    }

    /// Differentiable forward pass.
    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, vars: &[Option<LayerVars>]) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut cur = x;
        let mut saved: Vec<(u32, Var)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |e: Error| layer_error(i, layer, e);
            cur = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let v = vars[i].ok_or_else(|| missing(i, layer))?;
                    conv2d_tape(tape, cur, v.weight, v.bias, stride, padding).map_err(at)?
                }
                LayerSpec::CimConv { .. } => {
                    let v = vars[i].ok_or_else(|| missing(i, layer))?;
                    let spec = self.cimconv_spec(i).unwrap();
                    cimconv_tape(tape, cur, &spec, v.weight, v.bias).map_err(at)?
                }
                LayerSpec::PixelShuffle { factor } => tape.pixel_shuffle(cur, factor).map_err(at)?,
                LayerSpec::Relu => tape.relu(cur).map_err(at)?,
                LayerSpec::SkipSave { id } => {
                    saved.push((id, cur));
                    cur
                }
                LayerSpec::SkipAdd { id } => {
                    let (_, s) = *saved.iter().find(|(sid, _)| *sid == id).unwrap();
                    tape.add(cur, s).map_err(at)?
                }
            };
        }
        Ok(cur)
    }

    /// Forward pass that sends every window-times-weight product through
    /// `engine`; everything else (bias, activations, permutations, skip
    /// additions) is evaluated exactly.
    pub fn infer<T: Scalar, E: LinearEngine<T> + ?Sized>(&self, params: &ParamStore<T>, x: &Tensor<T>, engine: &mut E) -> Result<Tensor<T>> {
        self.check_input(x)?;
        params.check(self)?;
        let mut cur = x.clone();
        let mut saved: Vec<(u32, Tensor<T>)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let at = |e: Error| layer_error(i, layer, e);
            cur = match *layer {
                LayerSpec::Conv { kernel, stride, padding, c_out } => {
                    let p = params.layers[i].as_ref().unwrap();
                    let [n, c_in, h, w] = cur.dims4()?;
                    let ho = conv_output_dim(h, kernel, stride, padding).map_err(at)?;
                    let wo = conv_output_dim(w, kernel, stride, padding).map_err(at)?;
                    let patches = ops::unfold_patches(&ops::pad2d(&cur, padding)?, kernel, stride)?;
                    let rows = patches.into_reshape(&[n * ho * wo, c_in * kernel * kernel])?;
                    let wmat = ops::transpose2d(&p.weight.reshape(&[c_out, c_in * kernel * kernel])?)?;
                    let prod = engine.linear(i, &rows, &wmat).map_err(at)?;
                    let biased = ops::add_row_bias(&prod, &p.bias)?;
                    let layout = BlockLayout { n, grid_h: ho, grid_w: wo, channels: c_out, block: 1 };
                    ops::assemble_blocks(&biased, layout)?.finite("conv2d").map_err(at)?
                }
                LayerSpec::CimConv { .. } => {
                    let p = params.layers[i].as_ref().unwrap();
                    let spec = self.cimconv_spec(i).unwrap();
                    let [n, _, h, w] = cur.dims4()?;
                    let (gh, gw) = spec.grid(h, w).map_err(at)?;
                    let patches = ops::unfold_patches(&ops::pad2d(&cur, CIMCONV_PADDING)?, spec.kernel(), spec.stride)?;
                    let rows = patches.into_reshape(&[n * gh * gw, spec.in_features()])?;
                    let prod = engine.linear(i, &rows, &p.weight).map_err(at)?;
                    let mut act = ops::add_row_bias(&prod, &p.bias)?;
                    if spec.activation == Activation::Relu {
                        act = ops::relu(&act);
                    }
                    let layout = BlockLayout { n, grid_h: gh, grid_w: gw, channels: spec.c_out, block: spec.s_out() };
                    ops::assemble_blocks(&act, layout)?.finite("cimconv").map_err(at)?
                }
                LayerSpec::PixelShuffle { factor } => ops::pixel_shuffle(&cur, factor).map_err(at)?,
                LayerSpec::Relu => ops::relu(&cur),
                LayerSpec::SkipSave { id } => {
                    saved.push((id, cur.clone()));
                    cur
                }
                LayerSpec::SkipAdd { id } => {
                    let (_, s) = saved.iter().find(|(sid, _)| *sid == id).unwrap();
                    crate::nn::add_skip(&cur, s).map_err(at)?
                }
            };
        }
        Ok(cur)
    }
}

fn missing(i: usize, layer: &LayerSpec) -> Error {
    Error::Layer { index: i, kind: layer.kind(), detail: "parameters not bound".into() }
}

fn layer_error(i: usize, layer: &LayerSpec, e: Error) -> Error {
    match e {
        Error::Layer { .. } => e,
        other => Error::Layer { index: i, kind: layer.kind(), detail: format!("{other}") },
    }
}

fn infer_shapes(input: &InputSpec, layers: &[LayerSpec]) -> Result<Vec<FeatureShape>> {
    if input.channels == 0 || input.height == 0 || input.width == 0 {
        return Err(Error::Config(format!("input {input:?} has a zero dimension")));
    }
    let mut shapes = vec![[input.channels, input.height, input.width]];
    let mut saved: Vec<(u32, FeatureShape)> = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let [c, h, w] = *shapes.last().unwrap();
        let fail = |detail: String| Error::Layer { index: i, kind: layer.kind(), detail };
        let next = match *layer {
            LayerSpec::Conv { c_out, kernel, stride, padding } => {
                if c_out == 0 || kernel == 0 || stride == 0 {
                    return Err(fail(format!("c_out {c_out}, kernel {kernel} and stride {stride} must be positive")));
                }
                let ho = conv_output_dim(h, kernel, stride, padding).map_err(|e| fail(format!("{e}")))?;
                let wo = conv_output_dim(w, kernel, stride, padding).map_err(|e| fail(format!("{e}")))?;
                if stride > 1 && (h % stride != 0 || w % stride != 0) {
                    return Err(fail(format!("stride {stride} does not divide input {h}x{w}")));
                }
                [c_out, ho, wo]
            }
            LayerSpec::CimConv { stride, c_out, f_scale, activation } => {
                let spec = CimConvSpec::new(stride, c, c_out, f_scale, activation).map_err(|e| fail(format!("{e}")))?;
                let [_, co, oh, ow] = spec.output_shape(1, h, w).map_err(|e| fail(format!("{e}")))?;
                [co, oh, ow]
            }
            LayerSpec::PixelShuffle { factor } => {
                if factor == 0 || c % (factor * factor) != 0 {
                    return Err(fail(format!("{c} channels not divisible by {factor}^2")));
                }
                [c / (factor * factor), h * factor, w * factor]
            }
            LayerSpec::Relu => [c, h, w],
            LayerSpec::SkipSave { id } => {
                if saved.iter().any(|(s, _)| *s == id) {
                    return Err(fail(format!("skip id {id} saved twice")));
                }
                saved.push((id, [c, h, w]));
                [c, h, w]
            }
            LayerSpec::SkipAdd { id } => {
                let Some((_, s)) = saved.iter().find(|(sid, _)| *sid == id) else {
                    return Err(fail(format!("skip id {id} added before it was saved")));
                };
                if *s != [c, h, w] {
                    return Err(fail(format!("skip {id} shape {s:?} does not match {:?}", [c, h, w])));
                }
                [c, h, w]
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Parameters of a graph, one slot per layer (`None` for parameter-free
/// layers).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Verifies that every slot matches the graph's expected shapes.
    pub fn check(&self, graph: &ModelGraph) -> Result<()> {
        if self.layers.len() != graph.layers().len() {
            return Err(Error::Config(format!(
                "{} parameter slots for {} layers",
                self.layers.len(),
                graph.layers().len()
            )));
        }
        for (i, slot) in self.layers.iter().enumerate() {
            let kind = graph.layers()[i].kind();
            match (graph.param_shapes(i), slot) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::Layer {
                            index: i,
                            kind,
                            detail: format!(
                                "parameters {:?}/{:?}, expected {ws:?}/{bs:?}",
                                p.weight.shape(),
                                p.bias.shape()
                            ),
                        });
                    }
                }
                (Some(_), None) => return Err(Error::Layer { index: i, kind, detail: "missing parameters".into() }),
                (None, Some(_)) => return Err(Error::Layer { index: i, kind, detail: "unexpected parameters".into() }),
            }
        }
        Ok(())
    }

    /// Flat list of parameter tensors in layer order (weight, then bias).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flatten().flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|p| p.as_ref().map(|p| LayerParams { weight: p.weight.cast(), bias: p.bias.cast() }))
                .collect(),
        }
    }
}

/// Evaluates the dense products of conv and CIM-CONV layers.
pub trait LinearEngine<T: Scalar> {
    /// `rows[M, K] · weight[K, D]` on behalf of layer `layer`.
    fn linear(&mut self, layer: usize, rows: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Exact digital products.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactEngine;

impl<T: Scalar> LinearEngine<T> for ExactEngine {
    fn linear(&mut self, _layer: usize, rows: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul(rows, weight)
    }
}

/// Untracked forward pass of `graph` on `x`.
pub fn graph_forward<T: Scalar>(graph: &ModelGraph, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = graph.bind(&mut tape, params, false)?;
    let xv = tape.constant(x.clone());
    let y = graph.forward_tape(&mut tape, xv, &vars)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cimconv::cimconv_forward;
    use crate::nn::conv2d;
    use crate::rng::seeded_normal;

    fn input(c: usize, h: usize, w: usize) -> InputSpec {
        InputSpec { channels: c, height: h, width: w }
    }

    #[test]
    fn rejects_contract_violation() {
        let err = ModelGraph::new("bad", input(3, 8, 8), vec![LayerSpec::conv3x3(4)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn reports_failing_layer() {
        let layers = vec![
            LayerSpec::conv3x3(4),
            LayerSpec::CimConv { stride: 3, c_out: 3, f_scale: Ratio::ONE, activation: Activation::Identity },
        ];
        let err = ModelGraph::new("bad", input(3, 8, 8), layers).unwrap_err();
        match err {
            Error::Layer { index, kind, .. } => assert_eq!((index, kind), (1, "cimconv")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn skip_pairing_validated() {
        let layers = vec![LayerSpec::SkipAdd { id: 0 }];
        assert!(ModelGraph::new("bad", input(3, 4, 4), layers).is_err());
        let layers = vec![LayerSpec::SkipSave { id: 0 }, LayerSpec::SkipAdd { id: 0 }];
        assert!(ModelGraph::new("ok", input(3, 4, 4), layers).is_ok());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let layers = vec![
            LayerSpec::CimConv { stride: 2, c_out: 4, f_scale: Ratio::ONE, activation: Activation::Relu },
            LayerSpec::conv3x3(3),
        ];
        let g = ModelGraph::new("z", input(3, 8, 8), layers).unwrap();
        let mut p = g.init_params::<f64>(1);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = seeded_normal(&mut Rng::new(2, "x"), &[2, 3, 8, 8], 0.0, 1.0);
        let y = graph_forward(&g, &p, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_graph_is_composition() {
        let layers = vec![
            LayerSpec::CimConv { stride: 2, c_out: 4, f_scale: Ratio::ONE, activation: Activation::Relu },
            LayerSpec::conv3x3(3),
        ];
        let g = ModelGraph::new("c", input(3, 8, 8), layers).unwrap();
        let p = g.init_params::<f64>(3);
        let x = seeded_normal(&mut Rng::new(4, "x"), &[1, 3, 8, 8], 0.0, 1.0);
        let y = graph_forward(&g, &p, &x).unwrap();
        let l0 = p.layers[0].as_ref().unwrap();
        let l1 = p.layers[1].as_ref().unwrap();
        let spec = g.cimconv_spec(0).unwrap();
        let h = cimconv_forward(&x, &spec, &CimConvParams::new(&spec, l0.weight.clone(), l0.bias.clone()).unwrap()).unwrap();
        let want = conv2d(&h, &ConvParams::new(l1.weight.clone(), l1.bias.clone(), 1, 1).unwrap()).unwrap();
        assert_eq!(y, want);
        assert_eq!(graph_forward(&g, &p, &x).unwrap(), y);
        assert_eq!(g.infer(&p, &x, &mut ExactEngine).unwrap(), y);
    }

    #[test]
    fn wrong_input_rejected() {
        let g = ModelGraph::new("id", input(3, 4, 4), vec![]).unwrap();
        let p = g.init_params::<f32>(0);
        assert!(graph_forward(&g, &p, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
        assert!(g.resized(4, 5).is_ok());
    }
}
