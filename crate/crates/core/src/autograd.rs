//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operator appends one node holding its output value,
//! the operator tag and its parents. [`Tape::backward`] walks the nodes in
//! reverse creation order exactly once and accumulates gradients into the
//! tracked leaves. Untracked subgraphs are skipped entirely.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, BlockLayout};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Pad(usize),
    Unfold { k: usize, s: usize, dims: [usize; 4] },
    Reshape,
    Transpose,
    MatMul,
    AddBias,
    Relu,
    Assemble(BlockLayout),
    PixelShuffle(usize),
    Add,
    Sub,
    Mul,
    Scale(T),
    Sum,
    Mse,
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    parents: [Option<usize>; 2],
    tracked: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, `None` for untracked values or leaves the
    /// loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            parents: [None, None],
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf (a trainable parameter or an input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        let value = value.finite(name)?;
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        let mut ps = [None, None];
        for (slot, p) in ps.iter_mut().zip(parents) {
            *slot = Some(p.0);
        }
        self.nodes.push(Node { value, op, parents: ps, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn pad2d(&mut self, x: Var, p: usize) -> Result<Var> {
        let y = ops::pad2d(self.value(x), p)?;
        self.push(y, Op::Pad(p), &[x], "pad2d")
    }

    pub fn unfold(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let y = ops::unfold_patches(self.value(x), k, s)?;
        self.push(y, Op::Unfold { k, s, dims }, &[x], "unfold_patches")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push(y, Op::Reshape, &[x], "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose2d(self.value(x))?;
        self.push(y, Op::Transpose, &[x], "transpose")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        self.push(y, Op::MatMul, &[a, b], "matmul")
    }

    /// `x[M,D] + bias[D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = ops::add_row_bias(self.value(x), self.value(bias))?;
        self.push(y, Op::AddBias, &[x, bias], "add_bias")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu, &[x], "relu")
    }

    pub fn assemble_blocks(&mut self, rows: Var, layout: BlockLayout) -> Result<Var> {
        let y = ops::assemble_blocks(self.value(rows), layout)?;
        self.push(y, Op::Assemble(layout), &[rows], "assemble_blocks")
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = ops::pixel_shuffle(self.value(x), r)?;
        self.push(y, Op::PixelShuffle(r), &[x], "pixel_shuffle")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(y, Op::Add, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(y, Op::Sub, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(y, Op::Mul, &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(c), &[x], "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum, &[x], "sum")
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = T::of(va.numel() as f64);
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        self.push(Tensor::scalar(s / n), Op::Mse, &[a, b], "mse")
    }

    /// Sign pattern of every ReLU input on the tape. Two evaluations with
    /// equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu = node.op {
                let input = &self.nodes[node.parents[0].unwrap()].value;
                out.extend(input.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let [p0, p1] = node.parents;
            let (p0, p1) = (p0.unwrap(), p1);
            let pv = |i: usize| &self.nodes[i].value;
            let wants = |i: usize| self.nodes[i].tracked;
            let mut contrib: [Option<Tensor<T>>; 2] = [None, None];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Pad(p) => contrib[0] = Some(ops::crop2d(&g, *p)?),
                Op::Unfold { k, s, dims } => contrib[0] = Some(ops::fold_patches(&g, *dims, *k, *s)?),
                Op::Reshape => contrib[0] = Some(g.into_reshape(pv(p0).shape())?),
                Op::Transpose => contrib[0] = Some(ops::transpose2d(&g)?),
                Op::MatMul => {
                    let p1 = p1.unwrap();
                    if wants(p0) {
                        contrib[0] = Some(ops::matmul_nt(&g, pv(p1))?);
                    }
                    if wants(p1) {
                        contrib[1] = Some(ops::matmul_tn(pv(p0), &g)?);
                    }
                }
                Op::AddBias => {
                    if wants(p1.unwrap()) {
                        contrib[1] = Some(ops::column_sums(&g)?);
                    }
                    contrib[0] = Some(g);
                }
                Op::Relu => {
                    contrib[0] = Some(g.zip_map(pv(p0), |gv, x| if x > T::zero() { gv } else { T::zero() })?);
                }
                Op::Assemble(layout) => {
                    contrib[0] = Some(ops::split_blocks(&g, *layout)?.into_reshape(pv(p0).shape())?);
                }
                Op::PixelShuffle(r) => contrib[0] = Some(ops::pixel_unshuffle(&g, *r)?),
                Op::Add => {
                    contrib[1] = Some(g.clone());
                    contrib[0] = Some(g);
                }
                Op::Sub => {
                    contrib[1] = Some(g.map(|v| -v));
                    contrib[0] = Some(g);
                }
                Op::Mul => {
                    let p1 = p1.unwrap();
                    contrib[0] = Some(g.zip_map(pv(p1), |a, b| a * b)?);
                    contrib[1] = Some(g.zip_map(pv(p0), |a, b| a * b)?);
                }
                Op::Scale(c) => contrib[0] = Some(g.map(|v| v * *c)),
                Op::Sum => {
                    let gv = g.item().unwrap();
                    contrib[0] = Some(Tensor::full(pv(p0).shape(), gv));
                }
                Op::Mse => {
                    let p1 = p1.unwrap();
                    let gv = g.item().unwrap();
                    let c = T::of(2.0) * gv / T::of(pv(p0).numel() as f64);
                    let d = pv(p0).zip_map(pv(p1), |a, b| (a - b) * c)?;
                    contrib[1] = Some(d.map(|v| -v));
                    contrib[0] = Some(d);
                }
            }
            for (parent, c) in [Some(p0), p1].into_iter().zip(contrib) {
                let (Some(parent), Some(c)) = (parent, c) else { continue };
                if !wants(parent) {
                    continue;
                }
                grads[parent] = Some(match grads[parent].take() {
                    None => c,
                    Some(acc) => acc.zip_map(&c, |a, b| a + b)?,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Outcome of a central finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation moved some ReLU input across zero.
    pub skipped: usize,
}

/// Denominator floor for relative errors of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-3;

/// Central-difference check of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, vs| f(t, vs[0]), core::slice::from_ref(x), eps, usize::MAX)
}

/// Central-difference check of `f` with respect to every tensor in `inputs`.
///
/// At most `max_coords` evenly spaced coordinates per input are perturbed.
/// Coordinates where either perturbation changes the ReLU sign pattern sit
/// on (or within `eps` of) a kink and are skipped.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64, max_coords: usize) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(tape.value(out).shape().to_vec()))?;
        Ok((v, tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(out)?;

    let mut report = GradCheck { max_rel_err: 0.0, checked: 0, skipped: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zero);
        let step = n.div_ceil(max_coords.max(1)).max(1);
        for j in (0..n).step_by(step) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (fp, pat_p) = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let (fm, pat_m) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if pat_p != base_pattern || pat_m != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
