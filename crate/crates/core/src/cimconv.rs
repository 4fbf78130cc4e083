//! The CIM-CONV pseudo-convolution.
//!
//! A CIM-CONV layer with stride `S`, output channels `C_out` and scale
//! factor `F`:
//!
//! 1. pads the input by one pixel and cuts it into overlapping `k × k`
//!    windows at stride `S` (`k = S + 1`, or 3 when `S = 1`);
//! 2. maps each flattened window through one shared fully-connected layer
//!    to `C_out · S_out²` values, `S_out = S · F`, followed by the
//!    activation;
//! 3. reshapes every result to a `C_out × S_out × S_out` block and tiles
//!    the blocks side by side without overlap.
//!
//! Each window is one matrix-vector product, so the layer costs exactly
//! `(H/S) · (W/S)` MVMs while scaling the feature map by `F`.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::kaiming_pair;
use crate::ops::{self, BlockLayout};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Positive rational number in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ratio {
    num: u32,
    den: u32,
}

const fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };
    pub const HALF: Ratio = Ratio { num: 1, den: 2 };
    pub const TWO: Ratio = Ratio { num: 2, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("scale factor {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    /// `n · self` when it is a whole number.
    pub fn scale_exact(self, n: usize) -> Option<usize> {
        let p = n.checked_mul(self.num as usize)?;
        (p % self.den as usize == 0).then(|| p / self.den as usize)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    /// Accepts `"num/den"` or a bare integer.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("scale factor {s:?} is not of the form \"num/den\""));
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let num = n.parse::<u32>().map_err(|_| bad())?;
        let den = d.parse::<u32>().map_err(|_| bad())?;
        Ratio::new(num, den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Window size used at stride `s`: `s + 1`, except 3 at stride 1.
pub fn cimconv_kernel(stride: usize) -> usize {
    if stride == 1 {
        3
    } else {
        stride + 1
    }
}

/// Padding applied by every CIM-CONV layer.
pub const CIMCONV_PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CimConvSpec {
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub f_scale: Ratio,
    pub activation: Activation,
}

impl CimConvSpec {
    pub fn new(stride: usize, c_in: usize, c_out: usize, f_scale: Ratio, activation: Activation) -> Result<Self> {
        if stride == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!(
                "cimconv needs positive stride and channels, got S={stride} c_in={c_in} c_out={c_out}"
            )));
        }
        if f_scale.scale_exact(stride).is_none_or(|v| v == 0) {
            return Err(Error::Config(format!(
                "cimconv stride {stride} times scale {f_scale} is not a positive integer"
            )));
        }
        Ok(Self { stride, c_in, c_out, f_scale, activation })
    }

    pub fn kernel(&self) -> usize {
        cimconv_kernel(self.stride)
    }

    /// Side of the block each window produces, `S · F`.
    pub fn s_out(&self) -> usize {
        self.f_scale.scale_exact(self.stride).expect("validated in new")
    }

    /// Flattened window length `c_in · k²`.
    pub fn in_features(&self) -> usize {
        self.c_in * self.kernel() * self.kernel()
    }

    /// Values per window `c_out · S_out²`.
    pub fn out_features(&self) -> usize {
        self.c_out * self.s_out() * self.s_out()
    }

    /// Patch grid `(H/S, W/S)`.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride;
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "cimconv stride {s} does not divide input {h}x{w}"
            )));
        }
        let k = self.kernel();
        let (hp, wp) = (h + 2 * CIMCONV_PADDING, w + 2 * CIMCONV_PADDING);
        let grid = ops::patch_grid(hp, wp, k, s)?;
        debug_assert_eq!(grid, (h / s, w / s));
        Ok(grid)
    }

    /// `(N, c_out, (H/S)·S_out, (W/S)·S_out)`.
    pub fn output_shape(&self, n: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        let (gh, gw) = self.grid(h, w)?;
        Ok([n, self.c_out, gh * self.s_out(), gw * self.s_out()])
    }

    /// Number of windows, one MVM each.
    pub fn window_count(&self, h: usize, w: usize) -> Result<usize> {
        let (gh, gw) = self.grid(h, w)?;
        Ok(gh * gw)
    }

    fn check_params<T: Scalar>(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
        let want = [self.in_features(), self.out_features()];
        if weight.shape() != want || bias.shape() != [want[1]] {
            return Err(shape_err(
                "cimconv",
                format!(
                    "weight {:?} / bias {:?}, expected {want:?} / [{}]",
                    weight.shape(),
                    bias.shape(),
                    want[1]
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CimConvParams<T: Scalar = f32> {
    /// `[c_in·k², c_out·S_out²]`.
    pub weight: Tensor<T>,
    /// `[c_out·S_out²]`, shared by all windows.
    pub bias: Tensor<T>,
}

impl<T: Scalar> CimConvParams<T> {
    pub fn new(spec: &CimConvSpec, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        spec.check_params(&weight, &bias)?;
        Ok(Self { weight, bias })
    }

    pub fn kaiming(spec: &CimConvSpec, rng: &mut Rng) -> Self {
        let (weight, bias) = kaiming_pair(
            &[spec.in_features(), spec.out_features()],
            spec.in_features(),
            spec.out_features(),
            rng,
        );
        Self { weight, bias }
    }
}

/// CIM-CONV on the tape.
pub fn cimconv_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, spec: &CimConvSpec, weight: Var, bias: Var) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4()?;
    if c != spec.c_in {
        return Err(shape_err("cimconv", format!("input has {c} channels, spec expects {}", spec.c_in)));
    }
    spec.check_params(tape.value(weight), tape.value(bias))?;
    let (gh, gw) = spec.grid(h, w)?;
    let padded = tape.pad2d(x, CIMCONV_PADDING)?;
    let patches = tape.unfold(padded, spec.kernel(), spec.stride)?;
    let rows = tape.reshape(patches, &[n * gh * gw, spec.in_features()])?;
    let prod = tape.matmul(rows, weight)?;
    let mut act = tape.add_bias(prod, bias)?;
    if spec.activation == Activation::Relu {
        act = tape.relu(act)?;
    }
    let layout = BlockLayout { n, grid_h: gh, grid_w: gw, channels: spec.c_out, block: spec.s_out() };
    tape.assemble_blocks(act, layout)
}

pub fn cimconv_forward<T: Scalar>(x: &Tensor<T>, spec: &CimConvSpec, params: &CimConvParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(params.weight.clone());
    let b = tape.constant(params.bias.clone());
    let y = cimconv_tape(&mut tape, xv, spec, w, b)?;
    Ok(tape.value(y).clone())
}

impl fmt::Display for CimConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cimconv(S={}, {}->{}, F={}, {})",
            self.stride,
            self.c_in,
            self.c_out,
            self.f_scale,
            self.activation.as_str()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_many;
    use crate::rng::seeded_normal;
    use alloc::string::ToString;
    use alloc::vec::Vec;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        seeded_normal(&mut Rng::new(seed, "cimconv"), shape, 0.0, 1.0)
    }

    /// Per-patch loop: extract a padded window, flatten it, multiply by the
    /// dense weight, then write the block into place.
    fn patch_oracle(x: &Tensor<f64>, spec: &CimConvSpec, p: &CimConvParams<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.dims4().unwrap();
        let (k, s, so) = (spec.kernel(), spec.stride, spec.s_out());
        let (gh, gw) = (h / s, w / s);
        let d = spec.out_features();
        let mut out = Tensor::zeros(&[n, spec.c_out, gh * so, gw * so]);
        let [_, _, oh, ow] = [n, spec.c_out, gh * so, gw * so];
        for b in 0..n {
            for i in 0..gh {
                for j in 0..gw {
                    let mut v = Vec::new();
                    for ch in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let y = (i * s + dy) as isize - 1;
                                let xx = (j * s + dx) as isize - 1;
                                let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
                                v.push(if inside { x.at4(b, ch, y as usize, xx as usize) } else { 0.0 });
                            }
                        }
                    }
                    for o in 0..d {
                        let mut acc = p.bias.data()[o];
                        for (q, vq) in v.iter().enumerate() {
                            acc += vq * p.weight.data()[q * d + o];
                        }
                        if spec.activation == Activation::Relu {
                            acc = acc.max(0.0);
                        }
                        let (co, rem) = (o / (so * so), o % (so * so));
                        let (a, bb) = (rem / so, rem % so);
                        out.data_mut()[((b * spec.c_out + co) * oh + i * so + a) * ow + j * so + bb] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("1/2".parse::<Ratio>().unwrap(), Ratio::HALF);
        assert_eq!("4/2".parse::<Ratio>().unwrap(), Ratio::TWO);
        assert_eq!("3".parse::<Ratio>().unwrap(), Ratio::new(3, 1).unwrap());
        assert!("0/2".parse::<Ratio>().is_err());
        assert!("a/b".parse::<Ratio>().is_err());
        assert_eq!(Ratio::HALF.to_string(), "1/2");
    }

    #[test]
    fn kernel_rule() {
        assert_eq!(cimconv_kernel(1), 3);
        assert_eq!(cimconv_kernel(2), 3);
        assert_eq!(cimconv_kernel(4), 5);
        assert_eq!(cimconv_kernel(8), 9);
    }

    #[test]
    fn non_integral_s_out_rejected() {
        assert!(CimConvSpec::new(1, 3, 4, Ratio::HALF, Activation::Relu).is_err());
        assert!(CimConvSpec::new(3, 3, 4, Ratio::HALF, Activation::Relu).is_err());
        assert!(CimConvSpec::new(2, 3, 4, Ratio::HALF, Activation::Relu).is_ok());
    }

    #[test]
    fn output_shapes() {
        let spec = |s, f| CimConvSpec::new(s, 3, 5, f, Activation::Relu).unwrap();
        assert_eq!(spec(8, Ratio::ONE).output_shape(1, 96, 96).unwrap(), [1, 5, 96, 96]);
        assert_eq!(spec(8, Ratio::HALF).output_shape(1, 96, 96).unwrap(), [1, 5, 48, 48]);
        assert_eq!(spec(2, Ratio::TWO).output_shape(1, 24, 24).unwrap(), [1, 5, 48, 48]);
        let err = spec(8, Ratio::ONE).output_shape(1, 100, 96).unwrap_err();
        assert!(err.to_string().contains("does not divide"), "{err}");
    }

    #[test]
    fn window_counts() {
        let spec = |s| CimConvSpec::new(s, 3, 5, Ratio::ONE, Activation::Relu).unwrap();
        assert_eq!(spec(8).window_count(96, 96).unwrap(), 144);
        assert_eq!(spec(1).window_count(96, 96).unwrap(), 9216);
        assert_eq!(spec(8).window_count(24, 24).unwrap(), 9);
    }

    #[test]
    fn zero_input_tiles_bias() {
        let spec = CimConvSpec::new(2, 2, 3, Ratio::ONE, Activation::Identity).unwrap();
        let mut p = CimConvParams::<f64>::kaiming(&spec, &mut Rng::new(1, "init"));
        p.bias = randn(&[spec.out_features()], 2);
        let y = cimconv_forward(&Tensor::zeros(&[1, 2, 6, 4]), &spec, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 4]);
        for c in 0..3 {
            for r in 0..6 {
                for col in 0..4 {
                    let want = p.bias.data()[(c * 2 + r % 2) * 2 + col % 2];
                    assert_eq!(y.at4(0, c, r, col), want);
                }
            }
        }
    }

    #[test]
    fn single_patch_is_plain_fc() {
        let h = 4;
        let spec = CimConvSpec::new(h, 2, 3, Ratio::new(1, h as u32).unwrap(), Activation::Relu).unwrap();
        let p = CimConvParams::<f64>::new(&spec, randn(&[spec.in_features(), 3], 3), randn(&[3], 4)).unwrap();
        let x = randn(&[1, 2, h, h], 5);
        let y = cimconv_forward(&x, &spec, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1, 1]);
        // The single 5x5 window covers the padded image minus its last
        // (all-zero) row and column.
        let k = spec.kernel();
        let padded = ops::pad2d(&x, 1).unwrap();
        let mut flat = Vec::new();
        for c in 0..2 {
            for r in 0..k {
                for col in 0..k {
                    flat.push(padded.at4(0, c, r, col));
                }
            }
        }
        let flat = Tensor::from_vec(&[1, spec.in_features()], flat).unwrap();
        let want = ops::relu(&crate::nn::fc(&flat, &crate::nn::FcParams::new(p.weight.clone(), p.bias.clone()).unwrap()).unwrap());
        assert_eq!(y.data(), want.data());
    }

    #[test]
    fn matches_patch_oracle() {
        let spec = CimConvSpec::new(4, 3, 2, Ratio::ONE, Activation::Relu).unwrap();
        let p = CimConvParams::new(&spec, randn(&[75, 32], 6), randn(&[32], 7)).unwrap();
        let x = randn(&[1, 3, 16, 16], 8);
        let got = cimconv_forward(&x, &spec, &p).unwrap();
        let want = patch_oracle(&x, &spec, &p);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-12) || (a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_has_no_seam_without_bias() {
        let spec = CimConvSpec::new(4, 2, 1, Ratio::ONE, Activation::Identity).unwrap();
        let k = spec.kernel();
        // Constant weights make every entry of a block equal to a quarter of
        // the window sum. Windows away from the top/left border see no
        // padding, so those blocks join without a seam.
        let w = Tensor::full(&[2 * k * k, 16], 0.25);
        let p = CimConvParams::new(&spec, w, Tensor::zeros(&[16])).unwrap();
        let x = Tensor::full(&[1, 2, 16, 16], 1.0);
        let y = cimconv_forward(&x, &spec, &p).unwrap();
        for r in 4..16 {
            for c in 4..15 {
                assert_eq!(y.at4(0, 0, r, c), y.at4(0, 0, r, c + 1));
            }
        }
    }

    #[test]
    fn gradients_wrt_input_weight_bias() {
        let spec = CimConvSpec::new(2, 2, 2, Ratio::TWO, Activation::Relu).unwrap();
        let probe = randn(&[1, 2, 8, 8], 9);
        let r = grad_check_many(
            |t, v| {
                let y = cimconv_tape(t, v[0], &spec, v[1], v[2])?;
                let c = t.constant(probe.clone());
                let y = t.mul(y, c)?;
                t.sum(y)
            },
            &[randn(&[1, 2, 4, 4], 10), randn(&[spec.in_features(), spec.out_features()], 11), randn(&[spec.out_features()], 12)],
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(r.checked > 200);
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}
