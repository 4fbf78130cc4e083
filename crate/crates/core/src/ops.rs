//! Eager tensor kernels.
//!
//! These are the forward computations (and the adjoints the tape needs)
//! behind every differentiable operator. They allocate their outputs and
//! never touch a tape. All reductions run in a fixed sequential order so
//! results are reproducible bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Zero border of width `p` on both spatial axes of an NCHW tensor.
pub fn pad2d<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if p == 0 {
        return Ok(x.clone());
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); n * c * hp * wp];
    let src = x.data();
    for plane in 0..n * c {
        for row in 0..h {
            let s = (plane * h + row) * w;
            let d = (plane * hp + row + p) * wp + p;
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, hp, wp], out))
}

/// Adjoint of [`pad2d`]: drops the border of width `p`.
pub fn crop2d<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [n, c, hp, wp] = x.dims4()?;
    if p == 0 {
        return Ok(x.clone());
    }
    if hp <= 2 * p || wp <= 2 * p {
        return Err(dim_err("crop2d", format!("{hp}x{wp} too small to crop {p}")));
    }
    let (h, w) = (hp - 2 * p, wp - 2 * p);
    let mut out = Vec::with_capacity(n * c * h * w);
    let src = x.data();
    for plane in 0..n * c {
        for row in 0..h {
            let s = (plane * hp + row + p) * wp + p;
            out.extend_from_slice(&src[s..s + w]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Number of windows along each spatial axis for kernel `k` and stride `s`.
pub fn patch_grid(h: usize, w: usize, k: usize, s: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(dim_err("unfold", format!("kernel {k} and stride {s} must be positive")));
    }
    if k > h || k > w {
        return Err(dim_err("unfold", format!("kernel {k} exceeds input {h}x{w}")));
    }
    Ok(((h - k) / s + 1, (w - k) / s + 1))
}

/// Sliding-window patches `[N, L, C·k·k]` of an NCHW tensor.
///
/// Patch `l = i·grid_w + j` reads rows `[i·s, i·s+k)` and columns
/// `[j·s, j·s+k)`; each patch is flattened channel-major, then row, then
/// column.
pub fn unfold_patches<T: Scalar>(x: &Tensor<T>, k: usize, s: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (gh, gw) = patch_grid(h, w, k, s)?;
    let (l, kk) = (gh * gw, c * k * k);
    let mut out = vec![T::zero(); n * l * kk];
    let src = x.data();
    for b in 0..n {
        for i in 0..gh {
            for j in 0..gw {
                let base = (b * l + i * gw + j) * kk;
                for ch in 0..c {
                    for dy in 0..k {
                        let s_off = ((b * c + ch) * h + i * s + dy) * w + j * s;
                        let d_off = base + (ch * k + dy) * k;
                        out[d_off..d_off + k].copy_from_slice(&src[s_off..s_off + k]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, l, kk], out))
}

/// Adjoint of [`unfold_patches`]: scatter-adds patch gradients back onto an
/// `[N, C, H, W]` map.
pub fn fold_patches<T: Scalar>(
    g: &Tensor<T>,
    dims: [usize; 4],
    k: usize,
    s: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims;
    let (gh, gw) = patch_grid(h, w, k, s)?;
    let (l, kk) = (gh * gw, c * k * k);
    if g.numel() != n * l * kk {
        return Err(shape_err("fold_patches", format!("{:?} vs [{n}, {l}, {kk}]", g.shape())));
    }
    let mut out = vec![T::zero(); n * c * h * w];
    let src = g.data();
    for b in 0..n {
        for i in 0..gh {
            for j in 0..gw {
                let base = (b * l + i * gw + j) * kk;
                for ch in 0..c {
                    for dy in 0..k {
                        let d_off = ((b * c + ch) * h + i * s + dy) * w + j * s;
                        let s_off = base + (ch * k + dy) * k;
                        for dx in 0..k {
                            out[d_off + dx] = out[d_off + dx] + src[s_off + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Dot product with eight fixed accumulator lanes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for q in 0..chunks {
        let (x, y) = (&a[q * 8..q * 8 + 8], &b[q * 8..q * 8 + 8]);
        for t in 0..8 {
            lanes[t] = lanes[t] + x[t] * y[t];
        }
    }
    let mut acc = T::zero();
    for i in chunks * 8..a.len() {
        acc = acc + a[i] * b[i];
    }
    lanes.iter().fold(T::zero(), |s, &v| s + v) + acc
}

/// `a[M,K] · b[K,P]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [k2, p] = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {p}]")));
    }
    let mut out = vec![T::zero(); m * p];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, p], out))
}

/// `a[M,P] · b[K,P]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, p] = a.dims2()?;
    let [k, p2] = b.dims2()?;
    if p != p2 {
        return Err(shape_err("matmul_nt", format!("[{m}, {p}] x [{k}, {p2}]^T")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let arow = &ad[i * p..(i + 1) * p];
        for kk in 0..k {
            out.push(dot(arow, &bd[kk * p..(kk + 1) * p]));
        }
    }
    Ok(Tensor::from_parts(vec![m, k], out))
}

/// `a[M,K]ᵀ · b[M,P]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [m2, p] = b.dims2()?;
    if m != m2 {
        return Err(shape_err("matmul_tn", format!("[{m}, {k}]^T x [{m2}, {p}]")));
    }
    let mut out = vec![T::zero(); k * p];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let brow = &bd[i * p..(i + 1) * p];
        for (kk, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![k, p], out))
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let d = a.data();
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = d[i * k + j];
        }
    }
    Ok(Tensor::from_parts(vec![k, m], out))
}

/// `x[M,D] + bias[D]` broadcast over rows.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, d] = x.dims2()?;
    if bias.numel() != d {
        return Err(shape_err("add_bias", format!("rows of width {d}, bias {:?}", bias.shape())));
    }
    let b = bias.data();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o = *o + bv;
        }
    }
    Ok(Tensor::from_parts(vec![m, d], out))
}

/// Column sums of `x[M,D]`; the adjoint of the bias broadcast.
pub fn column_sums<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, d] = x.dims2()?;
    let mut out = vec![T::zero(); d];
    for row in x.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Ok(Tensor::from_parts(vec![d], out))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Geometry of a block placement: `n` images, a `grid_h × grid_w` patch grid,
/// and `channels × block × block` values per patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub n: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub block: usize,
}

impl BlockLayout {
    pub fn row_width(&self) -> usize {
        self.channels * self.block * self.block
    }

    pub fn rows(&self) -> usize {
        self.n * self.grid_h * self.grid_w
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.n, self.channels, self.grid_h * self.block, self.grid_w * self.block]
    }
}

/// Places each patch row as a non-overlapping `block × block` tile.
///
/// Row `n·L + i·grid_w + j`, column `(c·block + a)·block + b` lands at
/// output `[n, c, i·block + a, j·block + b]`. With `block = 1` this is the
/// plain "rows to NCHW" reshape used by im2col convolution.
pub fn assemble_blocks<T: Scalar>(rows: &Tensor<T>, layout: BlockLayout) -> Result<Tensor<T>> {
    if rows.numel() != layout.rows() * layout.row_width() {
        return Err(shape_err(
            "assemble_blocks",
            format!("{:?} does not hold {layout:?}", rows.shape()),
        ));
    }
    let BlockLayout { n, grid_h, grid_w, channels, block } = layout;
    let (oh, ow) = (grid_h * block, grid_w * block);
    let rw = layout.row_width();
    let src = rows.data();
    let mut out = vec![T::zero(); n * channels * oh * ow];
    for b in 0..n {
        for i in 0..grid_h {
            for j in 0..grid_w {
                let row = &src[(b * grid_h * grid_w + i * grid_w + j) * rw..][..rw];
                for c in 0..channels {
                    for a in 0..block {
                        let d = ((b * channels + c) * oh + i * block + a) * ow + j * block;
                        let s = (c * block + a) * block;
                        out[d..d + block].copy_from_slice(&row[s..s + block]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, channels, oh, ow], out))
}

/// Inverse permutation of [`assemble_blocks`], returning `[rows, row_width]`.
pub fn split_blocks<T: Scalar>(x: &Tensor<T>, layout: BlockLayout) -> Result<Tensor<T>> {
    if x.dims4()? != layout.output_dims() {
        return Err(shape_err(
            "split_blocks",
            format!("{:?} vs {:?}", x.shape(), layout.output_dims()),
        ));
    }
    let BlockLayout { n, grid_h, grid_w, channels, block } = layout;
    let (oh, ow) = (grid_h * block, grid_w * block);
    let rw = layout.row_width();
    let src = x.data();
    let mut out = vec![T::zero(); layout.rows() * rw];
    for b in 0..n {
        for i in 0..grid_h {
            for j in 0..grid_w {
                let row = &mut out[(b * grid_h * grid_w + i * grid_w + j) * rw..][..rw];
                for c in 0..channels {
                    for a in 0..block {
                        let s = ((b * channels + c) * oh + i * block + a) * ow + j * block;
                        let d = (c * block + a) * block;
                        row[d..d + block].copy_from_slice(&src[s..s + block]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![layout.rows(), rw], out))
}

/// `[N, C·r², H, W] → [N, C, H·r, W·r]` with
/// `out[n, c, h·r+a, w·r+b] = x[n, c·r² + a·r + b, h, w]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cr, h, w] = x.dims4()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(dim_err(
            "pixel_shuffle",
            format!("{cr} channels not divisible by factor {r}^2"),
        ));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for a in 0..r {
                for bb in 0..r {
                    let sc = ch * r * r + a * r + bb;
                    for y in 0..h {
                        let s = ((b * cr + sc) * h + y) * w;
                        let d = ((b * c + ch) * oh + y * r + a) * ow + bb;
                        for xx in 0..w {
                            out[d + xx * r] = src[s + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Inverse of [`pixel_shuffle`]: `[N, C, H·r, W·r] → [N, C·r², H, W]`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = x.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(dim_err(
            "pixel_unshuffle",
            format!("{oh}x{ow} not divisible by factor {r}"),
        ));
    }
    let (h, w, cr) = (oh / r, ow / r, c * r * r);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for a in 0..r {
                for bb in 0..r {
                    let dc = ch * r * r + a * r + bb;
                    for y in 0..h {
                        let d = ((b * cr + dc) * h + y) * w;
                        let s = ((b * c + ch) * oh + y * r + a) * ow + bb;
                        for xx in 0..w {
                            out[d + xx] = src[s + xx * r];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cr, h, w], out))
}
