//! Crossbar lowering, MVM counting and behavioural simulation.
//!
//! A conv or CIM-CONV layer is executed as one matrix-vector product per
//! sliding window: the flattened window (length `K`) drives the array rows
//! and every output channel is one column, so a window costs one MVM per
//! tile when `K × D` exceeds the `R × C` array.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::model::{LinearEngine, ModelGraph, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossbarConfig {
    /// Inputs per array.
    pub rows: usize,
    /// Outputs per array.
    pub cols: usize,
    /// 0 disables quantization.
    pub weight_bits: u8,
    pub input_bits: u8,
    pub adc_bits: u8,
    /// Std of the Gaussian added to each column output, relative to the RMS
    /// of that MVM's outputs.
    pub noise_sigma: f64,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self::ideal()
    }
}

impl CrossbarConfig {
    /// Unbounded arrays, exact arithmetic.
    pub const fn ideal() -> Self {
        Self { rows: usize::MAX, cols: usize::MAX, weight_bits: 0, input_bits: 0, adc_bits: 0, noise_sigma: 0.0 }
    }

    /// `rows × cols` arrays with exact arithmetic.
    pub fn exact(rows: usize, cols: usize) -> Result<Self> {
        Self { rows, cols, ..Self::ideal() }.validated()
    }

    pub fn with_bits(self, weight_bits: u8, input_bits: u8, adc_bits: u8) -> Result<Self> {
        Self { weight_bits, input_bits, adc_bits, ..self }.validated()
    }

    pub fn with_noise(self, noise_sigma: f64) -> Result<Self> {
        Self { noise_sigma, ..self }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!("crossbar {}x{} has a zero dimension", self.rows, self.cols)));
        }
        for (name, b) in [("weight_bits", self.weight_bits), ("input_bits", self.input_bits), ("adc_bits", self.adc_bits)] {
            if b == 1 || b > 16 {
                return Err(Error::Config(format!("{name} = {b}, expected 0 or 2..=16")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma = {} must be finite and >= 0", self.noise_sigma)));
        }
        Ok(self)
    }

    pub fn is_exact(&self) -> bool {
        self.weight_bits == 0 && self.input_bits == 0 && self.adc_bits == 0 && self.noise_sigma == 0.0
    }

    /// Tiles needed to hold a `k × d` matrix: `(row tiles, column tiles)`.
    pub fn tiles_for(&self, k: usize, d: usize) -> (usize, usize) {
        (k.div_ceil(self.rows), d.div_ceil(self.cols))
    }
}

fn tile_ranges(len: usize, size: usize) -> impl Iterator<Item = Range<usize>> + Clone {
    (0..len.div_ceil(size)).map(move |t| t * size..((t + 1) * size).min(len))
}

/// Crossbar work of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSchedule {
    pub layer: usize,
    pub kind: &'static str,
    /// Spatial size of the layer input.
    pub height: usize,
    pub width: usize,
    pub windows: usize,
    /// Flattened window length and outputs per window (0 for layers without
    /// a matrix).
    pub k: usize,
    pub d: usize,
    pub row_tiles: usize,
    pub col_tiles: usize,
}

impl LayerSchedule {
    pub fn tiles(&self) -> usize {
        self.row_tiles * self.col_tiles
    }

    pub fn mvms(&self) -> usize {
        self.windows * self.tiles()
    }
}

/// One MVM: a window of a layer against one tile of its weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub layer: usize,
    pub window: usize,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvmSchedule {
    pub config: CrossbarConfig,
    pub layers: Vec<LayerSchedule>,
}

impl MvmSchedule {
    /// Entries in execution order: layer, window, row tile, column tile.
    pub fn entries(&self) -> impl Iterator<Item = ScheduleEntry> + '_ {
        let (r, c) = (self.config.rows, self.config.cols);
        self.layers.iter().filter(|l| l.windows > 0).flat_map(move |l| {
            (0..l.windows).flat_map(move |window| {
                tile_ranges(l.k, r).flat_map(move |rows| {
                    tile_ranges(l.d, c).map(move |cols| ScheduleEntry { layer: l.layer, window, rows: rows.clone(), cols })
                })
            })
        })
    }

    pub fn layer_total(&self, layer: usize) -> usize {
        self.layers[layer].mvms()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerSchedule::mvms).sum()
    }
}

/// Lowers `graph` evaluated at `height × width` onto arrays described by
/// `cfg`.
pub fn lower(graph: &ModelGraph, cfg: &CrossbarConfig, height: usize, width: usize) -> Result<MvmSchedule> {
    let cfg = cfg.validated()?;
    let resized;
    let g = if graph.input().height == height && graph.input().width == width {
        graph
    } else {
        resized = graph.resized(height, width)?;
        &resized
    };
    let layers = (0..g.layers().len())
        .map(|i| {
            let [_, h, w] = g.layer_input(i);
            let (k, d) = g.mvm_dims(i).unwrap_or((0, 0));
            let windows = g.window_count(i);
            let (row_tiles, col_tiles) = if windows > 0 { cfg.tiles_for(k, d) } else { (0, 0) };
            LayerSchedule { layer: i, kind: g.layers()[i].kind(), height: h, width: w, windows, k, d, row_tiles, col_tiles }
        })
        .collect();
    Ok(MvmSchedule { config: cfg, layers })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer_id: String,
    pub kind: &'static str,
    pub height: usize,
    pub width: usize,
    pub windows: usize,
    /// Tiles per window.
    pub tiles: usize,
    pub mvms: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceCost {
    pub name: String,
    pub windows: usize,
    pub mvms: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub graph: String,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerCost>,
    pub total_windows: usize,
    pub total_mvms: usize,
    pub reference: Option<ReferenceCost>,
}

impl CostReport {
    pub fn from_schedule(graph: &ModelGraph, schedule: &MvmSchedule) -> Self {
        let layers: Vec<LayerCost> = schedule
            .layers
            .iter()
            .map(|l| LayerCost {
                layer_id: ModelGraph::layer_id(l.layer),
                kind: l.kind,
                height: l.height,
                width: l.width,
                windows: l.windows,
                tiles: l.tiles(),
                mvms: l.mvms(),
            })
            .collect();
        let [_, height, width] = schedule.layers.first().map_or([0, 0, 0], |l| [0, l.height, l.width]);
        Self {
            graph: String::from(graph.name()),
            height,
            width,
            total_windows: layers.iter().map(|l| l.windows).sum(),
            total_mvms: layers.iter().map(|l| l.mvms).sum(),
            layers,
            reference: None,
        }
    }

    pub fn with_reference(mut self, reference: &CostReport) -> Self {
        self.reference = Some(ReferenceCost {
            name: reference.graph.clone(),
            windows: reference.total_windows,
            mvms: reference.total_mvms,
        });
        self
    }

    /// This graph's MVMs over the reference's.
    pub fn mvm_ratio(&self) -> Option<f64> {
        self.reference.as_ref().map(|r| self.total_mvms as f64 / r.mvms as f64)
    }

    pub fn window_ratio(&self) -> Option<f64> {
        self.reference.as_ref().map(|r| self.total_windows as f64 / r.windows as f64)
    }
}

/// Cost of `graph` at its own input size under `cfg`.
pub fn cost_report(graph: &ModelGraph, cfg: &CrossbarConfig) -> Result<CostReport> {
    let input = graph.input();
    let schedule = lower(graph, cfg, input.height, input.width)?;
    Ok(CostReport::from_schedule(graph, &schedule))
}

/// Ideal-array cost: one MVM per window.
pub fn count_mvms(graph: &ModelGraph, height: usize, width: usize) -> Result<CostReport> {
    let schedule = lower(graph, &CrossbarConfig::ideal(), height, width)?;
    Ok(CostReport::from_schedule(graph, &schedule))
}

fn quantize(xs: &mut [f64], bits: u8) {
    if bits == 0 {
        return;
    }
    let max = xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    let q = f64::from((1u32 << (bits - 1)) - 1);
    let step = max / q;
    for x in xs {
        *x = libm::round(*x / step).clamp(-q, q) * step;
    }
}

/// Noise and ADC stage applied to the column outputs of one MVM.
fn read_out(y: &mut [f64], cfg: &CrossbarConfig, rng: Option<&mut Rng>) {
    if let Some(rng) = rng {
        let rms = libm::sqrt(y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64);
        let sd = cfg.noise_sigma * rms;
        for v in y.iter_mut() {
            *v += sd * rng.normal();
        }
    }
    quantize(y, cfg.adc_bits);
}

fn mvm_into(v: &[f64], w: &[f64], d: usize, y: &mut [f64]) {
    y.fill(0.0);
    for (r, &x) in v.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &w[r * d..(r + 1) * d];
        for (o, &wv) in y.iter_mut().zip(row) {
            *o += x * wv;
        }
    }
}

/// One analog MVM `v · W` on a single tile: quantize `W` and `v`
/// symmetrically, multiply exactly, add column noise, digitize with the ADC
/// and return on the real scale.
pub fn simulate_mvm<T: Scalar>(v: &[T], w: &Tensor<T>, cfg: &CrossbarConfig, rng: &mut Rng) -> Result<Vec<T>> {
    let cfg = cfg.validated()?;
    let [k, d] = w.dims2()?;
    if v.len() != k {
        return Err(Error::Shape { op: "simulate_mvm", detail: format!("vector of {} against {k}x{d} tile", v.len()) });
    }
    if k > cfg.rows || d > cfg.cols {
        return Err(Error::Shape { op: "simulate_mvm", detail: format!("{k}x{d} tile exceeds {}x{} array", cfg.rows, cfg.cols) });
    }
    let mut wq: Vec<f64> = w.data().iter().map(|&x| Scalar::to_f64(x)).collect();
    quantize(&mut wq, cfg.weight_bits);
    let mut vq: Vec<f64> = v.iter().map(|&x| Scalar::to_f64(x)).collect();
    quantize(&mut vq, cfg.input_bits);
    let mut y = vec![0.0; d];
    mvm_into(&vq, &wq, d, &mut y);
    read_out(&mut y, &cfg, (cfg.noise_sigma > 0.0).then_some(rng));
    Ok(y.into_iter().map(T::of).collect())
}

fn window_stream(seed: u64, layer: usize, window: usize, tile: usize) -> Rng {
    let index = ((layer as u64) << 48) ^ ((tile as u64) << 32) ^ window as u64;
    Rng::substream(seed, "crossbar", index)
}

/// `rows[M, K] · weight[K, D]` with each row treated as one window of
/// `layer`, split across `R × C` tiles whose partial sums are added
/// digitally.
pub fn crossbar_matmul<T: Scalar>(
    rows: &Tensor<T>,
    weight: &Tensor<T>,
    cfg: &CrossbarConfig,
    seed: u64,
    layer: usize,
) -> Result<Tensor<T>> {
    let [m, k] = rows.dims2()?;
    let [k2, d] = weight.dims2()?;
    if k != k2 {
        return Err(Error::Shape { op: "crossbar_matmul", detail: format!("{m}x{k} by {k2}x{d}") });
    }
    if cfg.is_exact() {
        return Ok(exact_tiled(rows, weight, cfg));
    }
    let x: Vec<f64> = rows.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let mut out = vec![0.0f64; m * d];
    let col_tiles = d.div_ceil(cfg.cols);
    for (rt, rr) in tile_ranges(k, cfg.rows).enumerate() {
        for (ct, cr) in tile_ranges(d, cfg.cols).enumerate() {
            let (kt, dt) = (rr.len(), cr.len());
            let mut wt = Vec::with_capacity(kt * dt);
            for r in rr.clone() {
                wt.extend(weight.data()[r * d + cr.start..r * d + cr.end].iter().map(|&v| Scalar::to_f64(v)));
            }
            quantize(&mut wt, cfg.weight_bits);
            let mut v = vec![0.0; kt];
            let mut y = vec![0.0; dt];
            for i in 0..m {
                v.copy_from_slice(&x[i * k + rr.start..i * k + rr.end]);
                quantize(&mut v, cfg.input_bits);
                mvm_into(&v, &wt, dt, &mut y);
                let mut rng = (cfg.noise_sigma > 0.0).then(|| window_stream(seed, layer, i, rt * col_tiles + ct));
                read_out(&mut y, cfg, rng.as_mut());
                for (o, &yv) in out[i * d + cr.start..i * d + cr.end].iter_mut().zip(&y) {
                    *o += yv;
                }
            }
        }
    }
    Tensor::from_vec(&[m, d], out.into_iter().map(T::of).collect())
}

/// Exact mode: tiles visited in schedule order with partial sums added
/// straight into the output, which keeps every output's summation order
/// (ascending `k`) identical to [`crate::ops::matmul`].
fn exact_tiled<T: Scalar>(rows: &Tensor<T>, weight: &Tensor<T>, cfg: &CrossbarConfig) -> Tensor<T> {
    let [m, k] = rows.dims2().unwrap();
    let d = weight.shape()[1];
    let (x, w) = (rows.data(), weight.data());
    let mut out = vec![T::zero(); m * d];
    for i in 0..m {
        let row = &mut out[i * d..(i + 1) * d];
        for rr in tile_ranges(k, cfg.rows) {
            for cr in tile_ranges(d, cfg.cols) {
                for kk in rr.clone() {
                    let xv = x[i * k + kk];
                    if xv == T::zero() {
                        continue;
                    }
                    for (o, &wv) in row[cr.clone()].iter_mut().zip(&w[kk * d + cr.start..kk * d + cr.end]) {
                        *o = *o + xv * wv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[m, d], out).unwrap()
}

/// [`LinearEngine`] that runs every window through the crossbar model.
#[derive(Debug, Clone, Copy)]
pub struct CrossbarEngine {
    pub config: CrossbarConfig,
    pub seed: u64,
}

impl CrossbarEngine {
    pub fn new(config: CrossbarConfig, seed: u64) -> Result<Self> {
        Ok(Self { config: config.validated()?, seed })
    }
}

impl<T: Scalar> LinearEngine<T> for CrossbarEngine {
    fn linear(&mut self, layer: usize, rows: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
        crossbar_matmul(rows, weight, &self.config, self.seed, layer)
    }
}

/// Forward pass of `graph` with all conv/CIM-CONV products simulated on the
/// crossbar; nonlinearities, biases and permutations stay exact.
pub fn simulate_graph<T: Scalar>(
    graph: &ModelGraph,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    cfg: &CrossbarConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut engine = CrossbarEngine::new(*cfg, seed)?;
    graph.infer(params, x, &mut engine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cimconv::{Activation, Ratio};
    use crate::model::{graph_forward, InputSpec, LayerSpec};
    use crate::ops::matmul;
    use crate::rng::seeded_normal;
    use crate::zoo::{build_cim_net_with, Preset, ZooConfig};

    fn single(layer: LayerSpec, c_in: usize, hw: usize, tail: Vec<LayerSpec>) -> ModelGraph {
        let mut layers = vec![layer];
        layers.extend(tail);
        ModelGraph::new("t", InputSpec { channels: c_in, height: hw, width: hw }, layers).unwrap()
    }

    #[test]
    fn conv3x3_on_96_is_9216_mvms() {
        let g = single(LayerSpec::conv3x3(3), 3, 96, vec![]);
        let s = lower(&g, &CrossbarConfig::ideal(), 96, 96).unwrap();
        assert_eq!(s.total(), 9216);
        assert_eq!(s.entries().count(), 9216);
    }

    #[test]
    fn tiled_cimconv_example() {
        let cim = LayerSpec::CimConv { stride: 8, c_out: 32, f_scale: Ratio::ONE, activation: Activation::Relu };
        let g = single(cim, 3, 96, vec![LayerSpec::conv3x3(3)]);
        let s = lower(&g, &CrossbarConfig::exact(128, 256).unwrap(), 96, 96).unwrap();
        assert_eq!(s.layers[0].tiles(), 16);
        assert_eq!(s.layer_total(0), 2304);
        assert_eq!(s.entries().filter(|e| e.layer == 0).count(), 2304);
        let first: Vec<_> = s.entries().take(16).collect();
        assert_eq!(first[0].rows, 0..128);
        assert_eq!(first[8].rows, 128..243);
        assert_eq!(first[15].cols, 1792..2048);
    }

    #[test]
    fn shuffle_costs_nothing() {
        let g = single(LayerSpec::conv3x3(12), 3, 8, vec![LayerSpec::PixelShuffle { factor: 2 }, LayerSpec::Conv { c_out: 3, kernel: 3, stride: 2, padding: 1 }]);
        let s = lower(&g, &CrossbarConfig::ideal(), 8, 8).unwrap();
        assert_eq!(s.layer_total(1), 0);
        assert!(s.entries().all(|e| e.layer != 1));
    }

    #[test]
    fn report_totals_and_ratio() {
        let g = Preset::CimNet.build(8, 96, 96, &ZooConfig::default()).unwrap();
        let f = Preset::FastDvdBlock.build(1, 96, 96, &ZooConfig::default()).unwrap();
        let r = count_mvms(&g, 96, 96).unwrap().with_reference(&count_mvms(&f, 96, 96).unwrap());
        assert_eq!(r.total_mvms, 9153);
        assert_eq!(r.total_mvms, r.layers.iter().map(|l| l.mvms).sum::<usize>());
        assert_eq!(r.mvm_ratio().unwrap(), 9153.0 / 51264.0);
    }

    #[test]
    fn exact_mvm_matches_matmul() {
        let mut rng = Rng::new(1, "t");
        let w: Tensor<f64> = seeded_normal(&mut rng, &[20, 7], 0.0, 1.0);
        let v: Tensor<f64> = seeded_normal(&mut rng, &[1, 20], 0.0, 1.0);
        let got = simulate_mvm(v.data(), &w, &CrossbarConfig::ideal(), &mut rng).unwrap();
        let want = matmul(&v, &w).unwrap();
        for (a, b) in got.iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn mvm_rejects_oversized_tile() {
        let w = Tensor::<f32>::zeros(&[5, 3]);
        let cfg = CrossbarConfig::exact(4, 4).unwrap();
        assert!(simulate_mvm(&[0.0; 5], &w, &cfg, &mut Rng::new(0, "t")).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CrossbarConfig::ideal().with_bits(1, 0, 0).is_err());
        assert!(CrossbarConfig::ideal().with_bits(0, 17, 0).is_err());
        assert!(CrossbarConfig::ideal().with_noise(-0.1).is_err());
        assert!(CrossbarConfig::exact(0, 3).is_err());
    }

    #[test]
    fn noise_std_is_relative_to_column_rms() {
        let mut rng = Rng::new(3, "t");
        let (k, d) = (16, 8);
        let w: Tensor<f64> = seeded_normal(&mut rng, &[k, d], 0.0, 1.0);
        let v: Tensor<f64> = seeded_normal(&mut rng, &[1, k], 0.0, 1.0);
        let exact = matmul(&v, &w).unwrap();
        let rms = libm::sqrt(exact.data().iter().map(|x| x * x).sum::<f64>() / d as f64);
        let cfg = CrossbarConfig::ideal().with_noise(0.1).unwrap();
        let trials = 1000;
        let mut sq = vec![0.0; d];
        for _ in 0..trials {
            let y = simulate_mvm(v.data(), &w, &cfg, &mut rng).unwrap();
            for j in 0..d {
                sq[j] += ((y[j] - exact.data()[j]) / rms).powi(2);
            }
        }
        for s in sq {
            let sd = libm::sqrt(s / trials as f64);
            assert!((sd - 0.1).abs() <= 0.02, "column std {sd}");
        }
    }

    #[test]
    fn exact_simulation_is_tiling_invariant() {
        let cfg = ZooConfig::with_widths([4, 8, 8]);
        let g = build_cim_net_with(2, 16, 16, &cfg).unwrap();
        let p = g.init_params::<f32>(5);
        let x: Tensor<f32> = seeded_normal(&mut Rng::new(9, "x"), &[2, 3, 16, 16], 0.0, 1.0);
        let reference = graph_forward(&g, &p, &x).unwrap();
        for (r, c) in [(usize::MAX, usize::MAX), (7, 5), (32, 3), (1, 1)] {
            let xb = CrossbarConfig::exact(r, c).unwrap();
            let y = simulate_graph(&g, &p, &x, &xb, 0).unwrap();
            let scale = reference.max_abs();
            for (a, b) in y.data().iter().zip(reference.data()) {
                assert!((a - b).abs() <= 1e-5 * scale, "{r}x{c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn noisy_simulation_is_deterministic() {
        let g = build_cim_net_with(2, 16, 16, &ZooConfig::with_widths([4, 8, 8])).unwrap();
        let p = g.init_params::<f32>(5);
        let x: Tensor<f32> = seeded_normal(&mut Rng::new(9, "x"), &[1, 3, 16, 16], 0.0, 1.0);
        let cfg = CrossbarConfig::exact(16, 16).unwrap().with_bits(6, 6, 8).unwrap().with_noise(0.05).unwrap();
        let a = simulate_graph(&g, &p, &x, &cfg, 11).unwrap();
        let b = simulate_graph(&g, &p, &x, &cfg, 11).unwrap();
        let c = simulate_graph(&g, &p, &x, &cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
