//! Dueling 3D-convolutional Q-network with hand-written gradients.
//!
//! The net maps an observation (one or two video streams plus the step
//! one-hot) to one linear Q value per action. Per stream: three 3x3x3 conv
//! blocks (spatial stride 2, temporal stride 1, ReLU) then average pooling
//! over time and each spatial quadrant, which keeps a coarse where-signal
//! alongside the what-signal; two-stream nets fuse the pooled vectors by
//! elementwise multiplication. The fused features concatenated with the
//! step one-hot feed a ReLU trunk and the dueling value/advantage heads,
//! `Q = V + (A - mean A)`.
//!
//! Everything is generic over the float type: training runs in `f32`,
//! gradient checking instantiates the same code in `f64` so central
//! differences resolve well below the acceptance tolerance.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::rng::Pcg32;

/// Float type the net is instantiated at.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    /// Fused multiply-add `self * a + b` (single rounding, maps to FMA).
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense 4D activation tensor, `[t][h][w][c]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<S> {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Feat<S> {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Feat { t, h, w, c, data: vec![S::ZERO; t * h * w * c] }
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.c + c
    }

    pub fn from_clip(clip: &VideoClip<f32>) -> Self {
        Feat {
            t: clip.t,
            h: clip.h,
            w: clip.w,
            c: clip.channels.count(),
            data: clip.data.iter().map(|&v| S::from_f32(v)).collect(),
        }
    }
}

const KERNEL: usize = 3;

/// Dot product with eight independent accumulator lanes. Plain `acc += a*b`
/// is a serial float reduction the compiler must not reorder; the fixed
/// lane split keeps results deterministic and lets it vectorize.
#[inline]
fn dot_lanes<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut lanes = [S::ZERO; 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for j in 0..8 {
            lanes[j] = ca[j].mul_add(cb[j], lanes[j]);
        }
    }
    let mut acc = S::ZERO;
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        acc = x.mul_add(y, acc);
    }
    for l in lanes {
        acc += l;
    }
    acc
}

/// 3x3x3 convolution, spatial stride 2, temporal stride 1, padding 1 on
/// every axis. Weights are stored `[kt][kh][kw][ci][co]` so the innermost
/// loops run over contiguous output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<S> {
    pub ci: usize,
    pub co: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
}

/// Output extent of one strided spatial axis.
fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Output positions whose stride-2 input tap `2*o + k - 1` lands inside an
/// axis of length `n_in`, as a half-open range clamped to `n_out`.
fn tap_range(k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = if n_in >= k { ((n_in - k) / 2 + 1).min(n_out) } else { 0 };
    (lo, hi)
}

impl<S: Scalar> Conv3d<S> {
    fn build(ci: usize, co: usize, mut weight: impl FnMut(usize) -> S) -> Self {
        let fan_in = KERNEL * KERNEL * KERNEL * ci;
        let w = (0..fan_in * co).map(|_| weight(fan_in)).collect();
        Conv3d { ci, co, w, b: vec![S::ZERO; co] }
    }

    pub fn out_dims(&self, x: &Feat<S>) -> (usize, usize, usize) {
        (x.t, conv_out(x.h), conv_out(x.w))
    }

    pub fn forward(&self, x: &Feat<S>) -> Result<Feat<S>> {
        if x.c != self.ci {
            return Err(Error::ShapeMismatch(format!(
                "conv input has {} channels, expected {}",
                x.c, self.ci
            )));
        }
        // Monomorphized kernels keep the per-voxel accumulator in vector
        // registers; the dynamic path covers unusual widths.
        match self.co {
            8 => Ok(self.forward_const::<8>(x)),
            16 => Ok(self.forward_const::<16>(x)),
            32 => Ok(self.forward_const::<32>(x)),
            _ => Ok(self.forward_dyn(x)),
        }
    }

    fn forward_const<const CO: usize>(&self, x: &Feat<S>) -> Feat<S> {
        let (t, ho, wo) = self.out_dims(x);
        let ci = self.ci;
        let mut out = Feat::zeros(t, ho, wo, CO);
        let mut bias = [S::ZERO; CO];
        bias.copy_from_slice(&self.b);
        for to in 0..t {
            for yo in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias;
                    for kt in 0..KERNEL {
                        let ti = (to + kt) as isize - 1;
                        if ti < 0 || ti >= x.t as isize {
                            continue;
                        }
                        for kh in 0..KERNEL {
                            let yi = (2 * yo + kh) as isize - 1;
                            if yi < 0 || yi >= x.h as isize {
                                continue;
                            }
                            for kw in 0..KERNEL {
                                let xi = (2 * xo + kw) as isize - 1;
                                if xi < 0 || xi >= x.w as isize {
                                    continue;
                                }
                                let xb = x.idx(ti as usize, yi as usize, xi as usize, 0);
                                let wb = (((kt * KERNEL + kh) * KERNEL + kw) * ci) * CO;
                                for cin in 0..ci {
                                    let xv = x.data[xb + cin];
                                    let wrow: &[S; CO] = self.w
                                        [wb + cin * CO..wb + (cin + 1) * CO]
                                        .try_into()
                                        .expect("row width");
                                    for k in 0..CO {
                                        acc[k] = xv.mul_add(wrow[k], acc[k]);
                                    }
                                }
                            }
                        }
                    }
                    let ob = out.idx(to, yo, xo, 0);
                    out.data[ob..ob + CO].copy_from_slice(&acc);
                }
            }
        }
        out
    }

    fn forward_dyn(&self, x: &Feat<S>) -> Feat<S> {
        let (t, ho, wo) = self.out_dims(x);
        let (ci, co) = (self.ci, self.co);
        let mut out = Feat::zeros(t, ho, wo, co);
        for row in out.data.chunks_exact_mut(co) {
            row.copy_from_slice(&self.b);
        }
        for to in 0..t {
            for yo in 0..ho {
                let ob = out.idx(to, yo, 0, 0);
                let out_row = &mut out.data[ob..ob + wo * co];
                for kt in 0..KERNEL {
                    let ti = (to + kt) as isize - 1;
                    if ti < 0 || ti >= x.t as isize {
                        continue;
                    }
                    for kh in 0..KERNEL {
                        let yi = (2 * yo + kh) as isize - 1;
                        if yi < 0 || yi >= x.h as isize {
                            continue;
                        }
                        let xrow_base = x.idx(ti as usize, yi as usize, 0, 0);
                        for kw in 0..KERNEL {
                            let (lo, hi) = tap_range(kw, x.w, wo);
                            let wb = (((kt * KERNEL + kh) * KERNEL + kw) * ci) * co;
                            for cin in 0..ci {
                                let wrow = &self.w[wb + cin * co..wb + (cin + 1) * co];
                                for xo in lo..hi {
                                    let xv = x.data[xrow_base + (2 * xo + kw - 1) * ci + cin];
                                    // Post-ReLU inputs are mostly zeros;
                                    // skipping them is a large win.
                                    if xv == S::ZERO {
                                        continue;
                                    }
                                    let orow = &mut out_row[xo * co..(xo + 1) * co];
                                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                                        *o = xv.mul_add(wv, *o);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients of a scalar loss wrt weights, bias, and (optionally) the
    /// input, given the loss gradient wrt the output.
    pub fn backward(
        &self,
        x: &Feat<S>,
        dout: &Feat<S>,
        compute_dx: bool,
    ) -> Result<(Vec<S>, Vec<S>, Option<Feat<S>>)> {
        let (t, ho, wo) = self.out_dims(x);
        if (dout.t, dout.h, dout.w, dout.c) != (t, ho, wo, self.co) {
            return Err(Error::ShapeMismatch("conv backward dout dims".into()));
        }
        let co = self.co;
        let mut dw = vec![S::ZERO; self.w.len()];
        let mut db = vec![S::ZERO; co];
        let mut dx = if compute_dx {
            Some(Feat::zeros(x.t, x.h, x.w, x.c))
        } else {
            None
        };
        for chunk in dout.data.chunks_exact(co) {
            for (o, &v) in db.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        match co {
            8 => self.backward_loops::<8>(x, dout, &mut dw, dx.as_mut()),
            16 => self.backward_loops::<16>(x, dout, &mut dw, dx.as_mut()),
            32 => self.backward_loops::<32>(x, dout, &mut dw, dx.as_mut()),
            _ => self.backward_loops::<0>(x, dout, &mut dw, dx.as_mut()),
        }
        Ok((dw, db, dx))
    }

    /// Weight and input gradient accumulation. `CO` pins the channel width
    /// at compile time for the common layer sizes; 0 means dynamic.
    fn backward_loops<const CO: usize>(
        &self,
        x: &Feat<S>,
        dout: &Feat<S>,
        dw: &mut [S],
        dx: Option<&mut Feat<S>>,
    ) {
        let (t, ho, wo) = self.out_dims(x);
        let ci = self.ci;
        let co = if CO == 0 { self.co } else { CO };
        for to in 0..t {
            for yo in 0..ho {
                for xo in 0..wo {
                    let dbase = dout.idx(to, yo, xo, 0);
                    let drow = &dout.data[dbase..dbase + co];
                    for kt in 0..KERNEL {
                        let ti = (to + kt) as isize - 1;
                        if ti < 0 || ti >= x.t as isize {
                            continue;
                        }
                        for kh in 0..KERNEL {
                            let yi = (2 * yo + kh) as isize - 1;
                            if yi < 0 || yi >= x.h as isize {
                                continue;
                            }
                            for kw in 0..KERNEL {
                                let xi = (2 * xo + kw) as isize - 1;
                                if xi < 0 || xi >= x.w as isize {
                                    continue;
                                }
                                let xb = x.idx(ti as usize, yi as usize, xi as usize, 0);
                                let wb = (((kt * KERNEL + kh) * KERNEL + kw) * ci) * co;
                                for cin in 0..ci {
                                    let xv = x.data[xb + cin];
                                    if xv != S::ZERO {
                                        let wo_ = wb + cin * co;
                                        let dwrow = &mut dw[wo_..wo_ + co];
                                        for (o, &dv) in dwrow.iter_mut().zip(drow) {
                                            *o = xv.mul_add(dv, *o);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let dxf = match dx {
            Some(f) => f,
            None => return,
        };
        for to in 0..t {
            for yo in 0..ho {
                for xo in 0..wo {
                    let dbase = dout.idx(to, yo, xo, 0);
                    let drow = &dout.data[dbase..dbase + co];
                    for kt in 0..KERNEL {
                        let ti = (to + kt) as isize - 1;
                        if ti < 0 || ti >= x.t as isize {
                            continue;
                        }
                        for kh in 0..KERNEL {
                            let yi = (2 * yo + kh) as isize - 1;
                            if yi < 0 || yi >= x.h as isize {
                                continue;
                            }
                            for kw in 0..KERNEL {
                                let xi = (2 * xo + kw) as isize - 1;
                                if xi < 0 || xi >= x.w as isize {
                                    continue;
                                }
                                let xb = x.idx(ti as usize, yi as usize, xi as usize, 0);
                                let wb = (((kt * KERNEL + kh) * KERNEL + kw) * ci) * co;
                                for cin in 0..ci {
                                    let wrow = &self.w[wb + cin * co..wb + (cin + 1) * co];
                                    dxf.data[xb + cin] += dot_lanes(wrow, drow);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fully-connected layer, weights `[out][in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Linear<S> {
    fn build(fan_in: usize, fan_out: usize, mut weight: impl FnMut(usize) -> S) -> Self {
        let w = (0..fan_in * fan_out).map(|_| weight(fan_in)).collect();
        Linear { fan_in, fan_out, w, b: vec![S::ZERO; fan_out] }
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.fan_in {
            return Err(Error::ShapeMismatch(format!(
                "linear input {} vs fan_in {}",
                x.len(),
                self.fan_in
            )));
        }
        let mut y = self.b.clone();
        for o in 0..self.fan_out {
            let wrow = &self.w[o * self.fan_in..(o + 1) * self.fan_in];
            y[o] += dot_lanes(wrow, x);
        }
        Ok(y)
    }

    pub fn backward(&self, x: &[S], dy: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
        let mut dw = vec![S::ZERO; self.w.len()];
        let mut dx = vec![S::ZERO; self.fan_in];
        for o in 0..self.fan_out
        {
            let g = dy[o];
            let wrow = &self.w[o * self.fan_in..(o + 1) * self.fan_in];
            let dwrow = &mut dw[o * self.fan_in..(o + 1) * self.fan_in];
            for i in 0..self.fan_in {
                dwrow[i] = g * x[i];
                dx[i] = g.mul_add(wrow[i], dx[i]);
            }
        }
        (dw, dy.to_vec(), dx)
    }
}

pub fn relu_in_place<S: Scalar>(data: &mut [S]) {
    for v in data {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
}

/// Mask `d` by the ReLU activation pattern (`act` holds post-ReLU values).
pub fn relu_backward<S: Scalar>(act: &[S], d: &mut [S]) {
    for (v, a) in d.iter_mut().zip(act) {
        if !(*a > S::ZERO) {
            *v = S::ZERO;
        }
    }
}

/// Global average pool over t, h, w.
/// Average over time and over each spatial quadrant separately: a coarse
/// position-aware pooling. Output slot `q * C + c` holds channel `c` of
/// quadrant `q`, quadrants in row-major order. Odd sizes give the top and
/// left halves the extra row or column; a degenerate axis leaves the
/// missing quadrants at zero.
pub fn quadrant_avg_pool<S: Scalar>(x: &Feat<S>) -> Vec<S> {
    let hs = x.h.div_ceil(2);
    let ws = x.w.div_ceil(2);
    let mut out = vec![S::ZERO; 4 * x.c];
    let mut counts = [0u64; 4];
    let mut i = 0;
    for _ in 0..x.t {
        for y in 0..x.h {
            for xw in 0..x.w {
                let q = usize::from(y >= hs) * 2 + usize::from(xw >= ws);
                counts[q] += 1;
                let dst = &mut out[q * x.c..(q + 1) * x.c];
                for (o, &v) in dst.iter_mut().zip(&x.data[i..i + x.c]) {
                    *o += v;
                }
                i += x.c;
            }
        }
    }
    for q in 0..4 {
        if counts[q] > 0 {
            let inv = S::from_f64(1.0 / counts[q] as f64);
            for o in &mut out[q * x.c..(q + 1) * x.c] {
                *o *= inv;
            }
        }
    }
    out
}

pub fn quadrant_avg_pool_backward<S: Scalar>(t: usize, h: usize, w: usize, d: &[S]) -> Feat<S> {
    let c = d.len() / 4;
    let hs = h.div_ceil(2);
    let ws = w.div_ceil(2);
    let mut counts = [0u64; 4];
    for y in 0..h {
        for x in 0..w {
            counts[usize::from(y >= hs) * 2 + usize::from(x >= ws)] += t as u64;
        }
    }
    let mut out = Feat::zeros(t, h, w, c);
    let mut i = 0;
    for _ in 0..t {
        for y in 0..h {
            for x in 0..w {
                let q = usize::from(y >= hs) * 2 + usize::from(x >= ws);
                let inv = S::from_f64(1.0 / counts[q] as f64);
                let src = &d[q * c..(q + 1) * c];
                for (o, &g) in out.data[i..i + c].iter_mut().zip(src) {
                    *o = g * inv;
                }
                i += c;
            }
        }
    }
    out
}

/// Elementwise product of the two stream feature vectors.
pub fn fuse_two_stream<S: Scalar>(a: &[S], b: &[S]) -> Result<Vec<S>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "fusion inputs {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).collect())
}

/// `Q[a] = V + Adv[a] - mean(Adv)`.
pub fn dueling_combine<S: Scalar>(v: S, adv: &[S]) -> Vec<S> {
    let mut mean = S::ZERO;
    for &a in adv {
        mean += a;
    }
    mean *= S::from_f64(1.0 / adv.len() as f64);
    adv.iter().map(|&a| v + a - mean).collect()
}

/// Gradients of the dueling aggregation: `(dV, dAdv)` from `dQ`.
pub fn dueling_backward<S: Scalar>(dq: &[S]) -> (S, Vec<S>) {
    let mut total = S::ZERO;
    for &g in dq {
        total += g;
    }
    let share = total * S::from_f64(1.0 / dq.len() as f64);
    (total, dq.iter().map(|&g| g - share).collect())
}

/// Which input streams the net consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    Rgb,
    Flow,
    TwoStream,
}

impl StreamKind {
    /// Channel count of each backbone input, RGB slot first.
    pub fn input_channels(&self) -> &'static [usize] {
        match self {
            StreamKind::Rgb => &[3],
            StreamKind::Flow => &[2],
            StreamKind::TwoStream => &[3, 2],
        }
    }

    pub fn uses_flow(&self) -> bool {
        !matches!(self, StreamKind::Rgb)
    }
}

/// Network architecture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub stream: StreamKind,
    pub t_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    /// Step one-hot length appended to the pooled features.
    pub n_steps: usize,
    pub num_actions: usize,
    pub conv_channels: Vec<usize>,
    pub fc_units: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stream: StreamKind::Rgb,
            t_in: 16,
            h_in: 64,
            w_in: 64,
            n_steps: 5,
            num_actions: 7,
            conv_channels: vec![8, 16, 32],
            fc_units: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.h_in == 0 || self.w_in == 0 {
            return Err(Error::Config("input dims must be nonzero".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if self.num_actions < 2 {
            return Err(Error::Config("need at least the two classify actions".into()));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("conv_channels must be nonzero".into()));
        }
        if self.fc_units == 0 {
            return Err(Error::Config("fc_units must be nonzero".into()));
        }
        Ok(())
    }

    /// Channel count of the last conv block.
    pub fn feature_dim(&self) -> usize {
        *self.conv_channels.last().expect("validated")
    }

    /// Width of the pooled feature vector: one slot per channel per
    /// spatial quadrant.
    pub fn pooled_dim(&self) -> usize {
        4 * self.feature_dim()
    }

    pub fn fc_in(&self) -> usize {
        self.pooled_dim() + self.n_steps
    }
}

/// All trainable tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<S> {
    pub cfg: NetConfig,
    /// One conv stack per input stream, RGB slot first.
    pub streams: Vec<Vec<Conv3d<S>>>,
    pub fc: Linear<S>,
    pub value: Linear<S>,
    pub advantage: Linear<S>,
}

impl<S: Scalar> NetParams<S> {
    fn build(cfg: NetConfig, weight: &mut dyn FnMut(usize) -> S) -> Result<Self> {
        cfg.validate()?;
        let mut streams = Vec::new();
        for &cin in cfg.stream.input_channels() {
            let mut convs = Vec::new();
            let mut ci = cin;
            for &co in &cfg.conv_channels {
                convs.push(Conv3d::build(ci, co, &mut *weight));
                ci = co;
            }
            streams.push(convs);
        }
        let fc = Linear::build(cfg.fc_in(), cfg.fc_units, &mut *weight);
        let value = Linear::build(cfg.fc_units, 1, &mut *weight);
        let advantage = Linear::build(cfg.fc_units, cfg.num_actions, &mut *weight);
        Ok(NetParams { cfg, streams, fc, value, advantage })
    }

    /// He-uniform weight init (`±sqrt(6 / fan_in)`), zero biases. Draws
    /// happen in f64 so nets of every scalar type share values per seed.
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = Pcg32::new(seed, 11);
        Self::build(cfg, &mut |fan_in| {
            let limit = (6.0 / fan_in as f64).sqrt();
            S::from_f64(rng.uniform_in(-limit, limit))
        })
    }

    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        Self::build(cfg, &mut |_| S::ZERO)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cfg.clone()).expect("existing config is valid")
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Vec<S>> {
        let mut out = Vec::new();
        for convs in &self.streams {
            for c in convs {
                out.push(&c.w);
                out.push(&c.b);
            }
        }
        out.push(&self.fc.w);
        out.push(&self.fc.b);
        out.push(&self.value.w);
        out.push(&self.value.b);
        out.push(&self.advantage.w);
        out.push(&self.advantage.b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut out: Vec<&mut Vec<S>> = Vec::new();
        for convs in &mut self.streams {
            for c in convs {
                out.push(&mut c.w);
                out.push(&mut c.b);
            }
        }
        out.push(&mut self.fc.w);
        out.push(&mut self.fc.b);
        out.push(&mut self.value.w);
        out.push(&mut self.value.b);
        out.push(&mut self.advantage.w);
        out.push(&mut self.advantage.b);
        out
    }

    /// Stable names aligned with [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (si, convs) in self.streams.iter().enumerate() {
            for li in 0..convs.len() {
                out.push(format!("stream{si}.conv{li}.w"));
                out.push(format!("stream{si}.conv{li}.b"));
            }
        }
        for name in ["fc.w", "fc.b", "value.w", "value.b", "advantage.w", "advantage.b"] {
            out.push(name.to_string());
        }
        out
    }

    /// Logical shapes aligned with [`tensors`](Self::tensors).
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for convs in &self.streams {
            for c in convs {
                out.push(vec![KERNEL, KERNEL, KERNEL, c.ci, c.co]);
                out.push(vec![c.co]);
            }
        }
        for l in [&self.fc, &self.value, &self.advantage] {
            out.push(vec![l.fan_out, l.fan_in]);
            out.push(vec![l.fan_out]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_in_place(&mut self, other: &Self) {
        let theirs = other.tensors();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.iter_mut().zip(t) {
                *a += b;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for t in self.tensors() {
            for &v in t {
                let x = v.to_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn stream_inputs(&self, obs: &Observation) -> Result<Vec<Feat<S>>> {
        let cfg = &self.cfg;
        if obs.step_onehot.len() != cfg.n_steps {
            return Err(Error::ShapeMismatch(format!(
                "step one-hot length {} vs {}",
                obs.step_onehot.len(),
                cfg.n_steps
            )));
        }
        let ones = obs.step_onehot.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || obs.step_onehot.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::ShapeMismatch("step one-hot must have exactly one 1".into()));
        }
        let mut inputs = Vec::new();
        for &want_c in cfg.stream.input_channels() {
            let clip = if want_c == 3 {
                &obs.rgb
            } else {
                obs.flow.as_ref().ok_or_else(|| {
                    Error::ShapeMismatch("observation lacks the flow stream".into())
                })?
            };
            if (clip.t, clip.h, clip.w) != (cfg.t_in, cfg.h_in, cfg.w_in)
                || clip.channels.count() != want_c
            {
                return Err(Error::ShapeMismatch(format!(
                    "stream dims {}x{}x{}x{} vs {}x{}x{}x{}",
                    clip.t,
                    clip.h,
                    clip.w,
                    clip.channels.count(),
                    cfg.t_in,
                    cfg.h_in,
                    cfg.w_in,
                    want_c
                )));
            }
            inputs.push(Feat::from_clip(clip));
        }
        Ok(inputs)
    }

    /// Q values for one observation.
    pub fn forward(&self, obs: &Observation) -> Result<Vec<S>> {
        Ok(self.forward_cached(obs)?.0)
    }

    /// Q values plus every intermediate activation needed by
    /// [`backward`](Self::backward).
    pub fn forward_cached(&self, obs: &Observation) -> Result<(Vec<S>, ForwardCache<S>)> {
        let inputs = self.stream_inputs(obs)?;
        let mut acts = Vec::with_capacity(inputs.len());
        let mut gaps = Vec::with_capacity(inputs.len());
        for (si, input) in inputs.iter().enumerate() {
            let convs = &self.streams[si];
            let mut stack: Vec<Feat<S>> = Vec::with_capacity(convs.len());
            for (li, conv) in convs.iter().enumerate() {
                let below = if li == 0 { input } else { &stack[li - 1] };
                let mut out = conv.forward(below)?;
                relu_in_place(&mut out.data);
                stack.push(out);
            }
            gaps.push(quadrant_avg_pool(stack.last().expect("nonempty stack")));
            acts.push(stack);
        }
        let fused = if gaps.len() == 2 {
            fuse_two_stream(&gaps[0], &gaps[1])?
        } else {
            gaps[0].clone()
        };
        let mut concat = fused.clone();
        concat.extend(obs.step_onehot.iter().map(|&v| S::from_f32(v)));
        let mut hidden = self.fc.forward(&concat)?;
        relu_in_place(&mut hidden);
        let value_out = self.value.forward(&hidden)?;
        let adv_out = self.advantage.forward(&hidden)?;
        let q = dueling_combine(value_out[0], &adv_out);
        Ok((
            q,
            ForwardCache { inputs, acts, gaps, concat, hidden, value_out, adv_out },
        ))
    }

    /// Parameter gradients for one sample given the loss gradient wrt Q.
    pub fn backward(&self, cache: &ForwardCache<S>, dq: &[S]) -> Result<NetParams<S>> {
        if dq.len() != self.cfg.num_actions {
            return Err(Error::ShapeMismatch("dq length".into()));
        }
        let mut g = self.zeros_like();
        let (dv, dadv) = dueling_backward(dq);
        let (dwv, dbv, dh_v) = self.value.backward(&cache.hidden, &[dv]);
        g.value.w = dwv;
        g.value.b = dbv;
        let (dwa, dba, dh_a) = self.advantage.backward(&cache.hidden, &dadv);
        g.advantage.w = dwa;
        g.advantage.b = dba;
        let mut dh: Vec<S> = dh_v.iter().zip(&dh_a).map(|(&a, &b)| a + b).collect();
        relu_backward(&cache.hidden, &mut dh);
        let (dwfc, dbfc, dconcat) = self.fc.backward(&cache.concat, &dh);
        g.fc.w = dwfc;
        g.fc.b = dbfc;
        let f = self.cfg.pooled_dim();
        let dfused = &dconcat[..f];
        let dgaps: Vec<Vec<S>> = if cache.gaps.len() == 2 {
            vec![
                dfused.iter().zip(&cache.gaps[1]).map(|(&d, &o)| d * o).collect(),
                dfused.iter().zip(&cache.gaps[0]).map(|(&d, &o)| d * o).collect(),
            ]
        } else {
            vec![dfused.to_vec()]
        };
        for si in 0..self.streams.len() {
            let convs = &self.streams[si];
            let stack = &cache.acts[si];
            let top = stack.last().expect("nonempty stack");
            let mut d = quadrant_avg_pool_backward(top.t, top.h, top.w, &dgaps[si]);
            for li in (0..convs.len()).rev() {
                relu_backward(&stack[li].data, &mut d.data);
                let below = if li == 0 { &cache.inputs[si] } else { &stack[li - 1] };
                let (dw, db, dx) = convs[li].backward(below, &d, li > 0)?;
                g.streams[si][li].w = dw;
                g.streams[si][li].b = db;
                if li > 0 {
                    d = dx.expect("requested input gradient");
                }
            }
        }
        Ok(g)
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    inputs: Vec<Feat<S>>,
    acts: Vec<Vec<Feat<S>>>,
    gaps: Vec<Vec<S>>,
    concat: Vec<S>,
    hidden: Vec<S>,
    value_out: Vec<S>,
    adv_out: Vec<S>,
}

impl<S> ForwardCache<S> {
    pub fn value_estimate(&self) -> &S {
        &self.value_out[0]
    }

    pub fn advantages(&self) -> &[S] {
        &self.adv_out
    }
}

/// Regression loss applied per (action, target) entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LossKind {
    Mse,
    Huber { delta: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Mse
    }
}

impl LossKind {
    /// Loss value and dloss/derror for one residual.
    fn at(&self, e: f64) -> (f64, f64) {
        match *self {
            LossKind::Mse => (e * e, 2.0 * e),
            LossKind::Huber { delta } => {
                if e.abs() <= delta {
                    (0.5 * e * e, e)
                } else {
                    (delta * (e.abs() - 0.5 * delta), delta * e.signum())
                }
            }
        }
    }
}

/// One training sample: an observation plus Q targets for one or more
/// actions. The usual case is a single taken action; full-vector targets
/// pass all actions.
#[derive(Debug, Clone)]
pub struct BatchSample<'a> {
    pub obs: &'a Observation,
    pub targets: Vec<(usize, f64)>,
}

impl<'a> BatchSample<'a> {
    pub fn single(obs: &'a Observation, action: usize, target: f64) -> Self {
        BatchSample { obs, targets: vec![(action, target)] }
    }
}

fn validate_batch<S: Scalar>(params: &NetParams<S>, batch: &[BatchSample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let mut entries = 0;
    for s in batch {
        if s.targets.is_empty() {
            return Err(Error::Config("sample without targets".into()));
        }
        for &(a, y) in &s.targets {
            if a >= params.cfg.num_actions {
                return Err(Error::InvalidAction(format!(
                    "target action {a} out of {}",
                    params.cfg.num_actions
                )));
            }
            if !y.is_finite() {
                return Err(Error::NonFinite("target_q"));
            }
            entries += 1;
        }
    }
    Ok(entries)
}

/// Mean loss over all batch entries, forward only.
pub fn batch_loss<S: Scalar>(
    params: &NetParams<S>,
    batch: &[BatchSample],
    kind: LossKind,
) -> Result<f64> {
    let entries = validate_batch(params, batch)?;
    let mut total = 0.0;
    for s in batch {
        let q = params.forward(s.obs)?;
        for &(a, y) in &s.targets {
            total += kind.at(q[a].to_f64() - y).0;
        }
    }
    Ok(total / entries as f64)
}

/// Mean loss over all batch entries plus parameter gradients. Per-sample
/// work runs in parallel; the reduction is a fixed-order sum so results
/// are identical for any worker count.
pub fn loss_and_grads<S: Scalar>(
    params: &NetParams<S>,
    batch: &[BatchSample],
    kind: LossKind,
) -> Result<(f64, NetParams<S>)> {
    use rayon::prelude::*;
    let entries = validate_batch(params, batch)?;
    let inv = 1.0 / entries as f64;
    let per_sample: Result<Vec<(f64, NetParams<S>)>> = batch
        .par_iter()
        .map(|s| {
            let (q, cache) = params.forward_cached(s.obs)?;
            let mut dq = vec![S::ZERO; params.cfg.num_actions];
            let mut loss = 0.0;
            for &(a, y) in &s.targets {
                let (l, de) = kind.at(q[a].to_f64() - y);
                loss += l * inv;
                dq[a] += S::from_f64(de * inv);
            }
            let g = params.backward(&cache, &dq)?;
            Ok((loss, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for (l, g) in per_sample? {
        loss += l;
        grads.add_in_place(&g);
    }
    Ok((loss, grads))
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut NetParams<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = S::from_f64(max_norm / norm);
        for t in grads.tensors_mut() {
            for v in t {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam state aligned with a particular net's tensor list.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &NetParams<S>, lr: f64) -> Self {
        let zeros: Vec<Vec<S>> = params.tensors().iter().map(|t| vec![S::ZERO; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update: clip the gradient global norm, advance the moments, and
    /// apply the bias-corrected step.
    pub fn apply(&mut self, params: &mut NetParams<S>, grads: &NetParams<S>) -> Result<()> {
        let gts = grads.tensors();
        let pts = params.tensors_mut();
        if gts.len() != self.m.len() || pts.len() != self.m.len() {
            return Err(Error::ShapeMismatch("optimizer state misaligned".into()));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let nb1 = S::from_f64(1.0 - self.beta1);
        let nb2 = S::from_f64(1.0 - self.beta2);
        let bc1 = S::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let bc2 = S::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let scale = S::from_f64(scale);
        for (ti, (p, g)) in pts.into_iter().zip(gts).enumerate() {
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + nb1 * gi;
                v[i] = b2 * v[i] + nb2 * gi * gi;
                let mhat = m[i] * bc1;
                let vhat = v[i] * bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSHQ";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    tensors: Vec<TensorInfo>,
    adam: Option<AdamMeta>,
    config_echo: serde_json::Value,
}

/// A saved net: parameters, optional optimizer state, and an
/// application-level config echo validated by loaders.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: NetParams<f32>,
    pub adam: Option<Adam<f32>>,
    pub config_echo: serde_json::Value,
}

/// Layout: magic, version u16 LE, header length u32 LE, JSON header, then
/// every tensor as f32 little-endian in manifest order; with optimizer
/// state, first moments then second moments follow in the same order.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = ck.params.tensors();
    let names = ck.params.tensor_names();
    let shapes = ck.params.tensor_shapes();
    let header = CheckpointHeader {
        net: ck.params.cfg.clone(),
        tensors: names
            .into_iter()
            .zip(&shapes)
            .map(|(name, shape)| TensorInfo { name, shape: shape.clone() })
            .collect(),
        adam: ck.adam.as_ref().map(|a| AdamMeta {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            clip_norm: a.clip_norm,
            step: a.step,
        }),
        config_echo: ck.config_echo.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    let mut put = |ts: &[&Vec<f32>]| {
        for t in ts {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    put(&tensors);
    if let Some(a) = &ck.adam {
        let m: Vec<&Vec<f32>> = a.m.iter().collect();
        let v: Vec<&Vec<f32>> = a.v.iter().collect();
        put(&m);
        put(&v);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let need = |n: usize, at: usize| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::Format("checkpoint truncated".into()))
        } else {
            Ok(())
        }
    };
    need(10, 0)?;
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    need(hlen, 10)?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[10..10 + hlen])?;
    let mut params = NetParams::<f32>::zeros(header.net)?;
    let expect_names = params.tensor_names();
    let expect_shapes = params.tensor_shapes();
    if header.tensors.len() != expect_names.len() {
        return Err(Error::Format("tensor manifest does not match architecture".into()));
    }
    for (info, (name, shape)) in header.tensors.iter().zip(expect_names.iter().zip(&expect_shapes)) {
        if &info.name != name || &info.shape != shape {
            return Err(Error::Format(format!(
                "tensor {} shape mismatch against architecture",
                info.name
            )));
        }
    }
    let mut at = 10 + hlen;
    let mut take = |dst: &mut Vec<f32>| -> Result<()> {
        let n = dst.len() * 4;
        if bytes.len() < at + n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        for (i, v) in dst.iter_mut().enumerate() {
            let o = at + i * 4;
            *v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        }
        at += n;
        Ok(())
    };
    for t in params.tensors_mut() {
        take(t)?;
    }
    let adam = match header.adam {
        None => None,
        Some(meta) => {
            let mut a = Adam::new(&params, meta.lr);
            a.beta1 = meta.beta1;
            a.beta2 = meta.beta2;
            a.eps = meta.eps;
            a.clip_norm = meta.clip_norm;
            a.step = meta.step;
            for t in a.m.iter_mut().chain(a.v.iter_mut()) {
                take(t)?;
            }
            Some(a)
        }
    };
    if at != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint { params, adam, config_echo: header.config_echo })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    Ok(std::fs::write(path, encode_checkpoint(ck)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
