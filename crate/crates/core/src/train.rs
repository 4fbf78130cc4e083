//! Denoiser training and evaluation: AWGN synthesis, MSE/PSNR, Adam, the
//! piecewise learning-rate schedule and the training loop.
//!
//! Pixels live in `[0, 1]`; noise levels are given in 0–255 units.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::model::{graph_forward, ModelGraph, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::Tape;

/// Channels of an RGB image.
pub const IMAGE_CHANNELS: usize = 3;

/// `clean + N(0, (sigma_255/255)²)` elementwise, without clipping.
pub fn add_awgn<T: Scalar>(clean: &Tensor<T>, sigma_255: f64, rng: &mut Rng) -> Tensor<T> {
    if sigma_255 == 0.0 {
        return clean.clone();
    }
    let sd = sigma_255 / 255.0;
    let d = clean.data();
    Tensor::from_fn(clean.shape(), |i| T::of(Scalar::to_f64(d[i]) + sd * rng.normal()))
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(shape_err("mse", alloc::string::String::from("empty tensors")));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (Scalar::to_f64(x) - Scalar::to_f64(y)).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

/// `−10·log10(mse)` for `[0, 1]` images; `+∞` when they are identical.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * libm::log10(e) })
}

/// PSNR of AWGN with the given 0–255 standard deviation.
pub fn awgn_psnr(sigma_255: f64) -> f64 {
    20.0 * libm::log10(255.0 / sigma_255)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. With `lr == 0` the moments advance but
/// the parameters are left untouched.
pub fn adam_step<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(shape_err("adam_step", format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape())));
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - libm::pow(b1, state.step as f64);
    let c2 = 1.0 - libm::pow(b2, state.step as f64);
    for (i, p) in params.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = Scalar::to_f64(g[j]);
            let mj = b1 * Scalar::to_f64(m[j]) + (1.0 - b1) * gj;
            let vj = b2 * Scalar::to_f64(v[j]) + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            if lr != 0.0 {
                let update = lr * (mj / c1) / (libm::sqrt(vj / c2) + eps);
                pd[j] = T::of(Scalar::to_f64(pd[j]) - update);
            }
        }
    }
    Ok(())
}

/// Piecewise-constant learning rate over epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    /// `(end epoch, rate)` pieces; piece `i` covers `[end_{i-1}, end_i)`.
    pieces: Vec<(u32, f64)>,
}

impl LrSchedule {
    pub fn new(pieces: Vec<(u32, f64)>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Config("empty learning-rate schedule".into()));
        }
        let mut prev = 0;
        for &(end, lr) in &pieces {
            if end <= prev {
                return Err(Error::Config(format!("schedule piece ending at epoch {end} does not advance past {prev}")));
            }
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
            }
            prev = end;
        }
        Ok(Self { pieces })
    }

    pub fn constant(lr: f64, epochs: u32) -> Result<Self> {
        Self::new(vec![(epochs, lr)])
    }

    /// 1e-3 for the first 50 epochs, 1e-4 for the next 10, then 1e-6,
    /// truncated to `epochs`.
    pub fn standard(epochs: u32) -> Result<Self> {
        let mut pieces = Vec::new();
        for (end, lr) in [(50, 1e-3), (60, 1e-4), (u32::MAX, 1e-6)] {
            pieces.push((end.min(epochs), lr));
            if end >= epochs {
                break;
            }
        }
        Self::new(pieces)
    }

    pub fn pieces(&self) -> &[(u32, f64)] {
        &self.pieces
    }

    pub fn epochs(&self) -> u32 {
        self.pieces.last().unwrap().0
    }

    pub fn lr_at_epoch(&self, epoch: u32) -> Result<f64> {
        self.pieces
            .iter()
            .find(|(end, _)| epoch < *end)
            .map(|&(_, lr)| lr)
            .ok_or(Error::EpochOutOfRange { epoch, epochs: self.epochs() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch: usize,
    pub patch: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Steps per epoch; `None` means one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    /// Noise level of the validation pass run after every epoch.
    pub val_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 96,
            patch: 96,
            sigma_min: 5.0,
            sigma_max: 50.0,
            seed: 0,
            schedule: LrSchedule::standard(100).unwrap(),
            steps_per_epoch: None,
            val_sigma: 15.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("epochs, batch and patch must be positive".into()));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!("need 0 <= sigma_min <= sigma_max, got {} and {}", self.sigma_min, self.sigma_max)));
        }
        if self.schedule.epochs() < self.epochs {
            return Err(Error::Config(format!(
                "schedule covers {} epochs, training runs {}",
                self.schedule.epochs(),
                self.epochs
            )));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Indexed collection of clean `[C, P, P]` patches in `[0, 1]`.
pub trait PatchSource {
    fn len(&self) -> usize;

    fn patch(&self, index: usize) -> Result<Tensor<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchSource for [Tensor<f32>] {
    fn len(&self) -> usize {
        <[Tensor<f32>]>::len(self)
    }

    fn patch(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self[index].clone())
    }
}

impl PatchSource for Vec<Tensor<f32>> {
    fn len(&self) -> usize {
        <[Tensor<f32>]>::len(self)
    }

    fn patch(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self[index].clone())
    }
}

/// Smooth random colour textures: per channel, a sum of a few oriented
/// sinusoids around a random base level, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTextures {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticTextures {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        Self { count, size, seed }
    }
}

impl PatchSource for SyntheticTextures {
    fn len(&self) -> usize {
        self.count
    }

    fn patch(&self, index: usize) -> Result<Tensor<f32>> {
        let mut rng = Rng::substream(self.seed, "texture", index as u64);
        let n = self.size;
        let mut data = Vec::with_capacity(IMAGE_CHANNELS * n * n);
        let waves: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                let angle = rng.uniform_range(0.0, core::f64::consts::PI);
                let freq = rng.uniform_range(0.05, 0.35);
                [freq * libm::cos(angle), freq * libm::sin(angle), rng.uniform_range(0.0, 6.3), rng.uniform_range(0.05, 0.15)]
            })
            .collect();
        for _ in 0..IMAGE_CHANNELS {
            let base = rng.uniform_range(0.3, 0.7);
            let gains: Vec<f64> = (0..waves.len()).map(|_| rng.uniform_range(0.5, 1.5)).collect();
            for y in 0..n {
                for x in 0..n {
                    let mut v = base;
                    for (w, g) in waves.iter().zip(&gains) {
                        v += g * w[3] * libm::sin(w[0] * x as f64 + w[1] * y as f64 + w[2]);
                    }
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Tensor::from_vec(&[IMAGE_CHANNELS, n, n], data)
    }
}

/// Stacks `[C, H, W]` patches into `[N, C, H, W]`.
pub fn stack(patches: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = patches.first().ok_or_else(|| shape_err("stack", alloc::string::String::from("no patches")))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * patches.len());
    for p in patches {
        if p.shape() != shape.as_slice() {
            return Err(shape_err("stack", format!("{:?} vs {:?}", p.shape(), shape)));
        }
        data.extend_from_slice(p.data());
    }
    let mut full = vec![patches.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

/// Network input for a noisy `[N, 3, H, W]` batch. Graphs with one extra
/// input channel receive a constant noise-level map `sigma/255` there.
pub fn model_input(graph: &ModelGraph, noisy: &Tensor<f32>, sigmas: &[f64]) -> Result<Tensor<f32>> {
    let [n, c, h, w] = noisy.dims4()?;
    let want = graph.input().channels;
    if want == c {
        return Ok(noisy.clone());
    }
    if want != c + 1 || sigmas.len() != n {
        return Err(shape_err("model_input", format!("{c}-channel images for a {want}-channel graph")));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * want * plane);
    for (i, s) in sigmas.iter().enumerate() {
        data.extend_from_slice(&noisy.data()[i * c * plane..(i + 1) * c * plane]);
        data.extend(core::iter::repeat_n((s / 255.0) as f32, plane));
    }
    Tensor::from_vec(&[n, want, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: u32,
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Validation PSNR after the epoch, when a validation set was given.
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub log: Vec<MetricRow>,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Loss and gradients of one noisy batch.
pub fn loss_and_grads(
    graph: &ModelGraph,
    params: &ParamStore<f32>,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let vars = graph.bind(&mut tape, params, true)?;
    let x = tape.constant(input.clone());
    let t = tape.constant(target.clone());
    let y = graph.forward_tape(&mut tape, x, &vars)?;
    let loss = tape.mse(y, t)?;
    let value = Scalar::to_f64(tape.value(loss).item().unwrap());
    let mut grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for v in vars.iter().flatten() {
        for var in [v.weight, v.bias] {
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
            out.push(g);
        }
    }
    Ok((value, out))
}

/// Trains `params` for `graph` on `train_set`, validating on `val_set` after
/// every epoch. Deterministic for a fixed `cfg.seed`.
pub fn train(
    graph: &ModelGraph,
    params: ParamStore<f32>,
    train_set: &dyn PatchSource,
    val_set: Option<&dyn PatchSource>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let g = graph.resized(cfg.patch, cfg.patch)?;
    params.check(&g)?;
    let probe = train_set.patch(0)?;
    if probe.shape() != [IMAGE_CHANNELS, cfg.patch, cfg.patch] {
        return Err(shape_err("train", format!("patch {:?}, config expects [3, {p}, {p}]", probe.shape(), p = cfg.patch)));
    }
    let mut params = params;
    let mut adam = AdamState::new(params.tensors());
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| train_set.len().div_ceil(cfg.batch));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pass = 0u64;
    let mut step = 0u64;
    let mut log = Vec::new();
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at_epoch(epoch)?;
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let mut clean = Vec::with_capacity(cfg.batch);
            while clean.len() < cfg.batch {
                if cursor == order.len() {
                    order = (0..train_set.len()).collect();
                    Rng::substream(cfg.seed, "shuffle", pass).shuffle(&mut order);
                    pass += 1;
                    cursor = 0;
                }
                clean.push(train_set.patch(order[cursor])?);
                cursor += 1;
            }
            let mut rng = Rng::substream(cfg.seed, "noise", step);
            let sigmas: Vec<f64> = (0..cfg.batch).map(|_| rng.uniform_range(cfg.sigma_min, cfg.sigma_max)).collect();
            let noisy: Vec<Tensor<f32>> = clean.iter().zip(&sigmas).map(|(c, &s)| add_awgn(c, s, &mut rng)).collect();
            let target = stack(&clean)?;
            let input = model_input(&g, &stack(&noisy)?, &sigmas)?;
            let (loss, grads) = loss_and_grads(&g, &params, &input, &target)?;
            adam_step(params.tensors_mut(), &grads, &mut adam, lr)?;
            losses.push(loss);
            epoch_loss += loss;
            step += 1;
        }
        let val_psnr = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate(&g, &params, v, cfg.val_sigma, cfg.seed)?.denoised_psnr),
            _ => None,
        };
        log.push(MetricRow { epoch, step, lr, loss: epoch_loss / steps_per_epoch as f64, val_psnr });
    }
    Ok(TrainOutcome { params, log, losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Mean PSNR of the clamped noisy inputs.
    pub noisy_psnr: f64,
    /// Mean PSNR of the clamped network outputs.
    pub denoised_psnr: f64,
    pub images: usize,
}

/// Corrupts each image with a fixed-seed AWGN draw, denoises it, clamps to
/// `[0, 1]` and averages PSNR over the set.
pub fn evaluate(graph: &ModelGraph, params: &ParamStore<f32>, set: &dyn PatchSource, sigma_255: f64, seed: u64) -> Result<EvalReport> {
    let mut noisy_sum = 0.0;
    let mut out_sum = 0.0;
    for i in 0..set.len() {
        let clean = set.patch(i)?;
        let [c, h, w] = match *clean.shape() {
            [c, h, w] => [c, h, w],
            _ => return Err(shape_err("evaluate", format!("image {:?} is not [C, H, W]", clean.shape()))),
        };
        let clean = clean.into_reshape(&[1, c, h, w])?;
        let mut rng = Rng::substream(seed, "eval", i as u64);
        let noisy = add_awgn(&clean, sigma_255, &mut rng);
        let (noisy_db, out_db) = denoise_pair(graph, params, &clean, &noisy, sigma_255)?;
        noisy_sum += noisy_db;
        out_sum += out_db;
    }
    let n = set.len().max(1) as f64;
    Ok(EvalReport { noisy_psnr: noisy_sum / n, denoised_psnr: out_sum / n, images: set.len() })
}

/// Denoises one noisy `[1, 3, H, W]` image, clamped to `[0, 1]`.
pub fn denoise(graph: &ModelGraph, params: &ParamStore<f32>, noisy: &Tensor<f32>, sigma_255: f64) -> Result<Tensor<f32>> {
    let [_, _, h, w] = noisy.dims4()?;
    let resized;
    let g = if graph.input().height == h && graph.input().width == w {
        graph
    } else {
        resized = graph.resized(h, w)?;
        &resized
    };
    let input = model_input(g, noisy, &vec![sigma_255; noisy.shape()[0]])?;
    Ok(graph_forward(g, params, &input)?.clamp(0.0, 1.0))
}

fn denoise_pair(graph: &ModelGraph, params: &ParamStore<f32>, clean: &Tensor<f32>, noisy: &Tensor<f32>, sigma: f64) -> Result<(f64, f64)> {
    let out = denoise(graph, params, noisy, sigma)?;
    Ok((psnr(clean, &noisy.clamp(0.0, 1.0))?, psnr(clean, &out)?))
}
