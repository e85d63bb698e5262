//! TV-L1 optical flow.
//!
//! Minimizes total variation of the flow field plus an L1 data-fidelity
//! term, the robust-to-outliers objective that suits fast erratic motion
//! better than quadratic penalties. Solved the standard way: a coarse-to-
//! fine pyramid, and at each level an alternation between a pointwise
//! thresholding step on the linearized data term and a dual (Chambolle)
//! update on the TV term, re-linearizing via warps of the second image.
//!
//! Inputs are Rec.601 luma planes of raw 0..255 pixel values; the default
//! `lambda`/`theta`/`tau` are tuned for that range.

use crate::clip::{Channels, VideoClip};
use crate::error::{Error, Result};

/// Solver parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TvL1Params {
    /// Data-term weight.
    pub lambda: f32,
    /// Coupling between the flow and its auxiliary variable.
    pub theta: f32,
    /// Dual ascent step.
    pub tau: f32,
    /// Re-linearizations per pyramid level.
    pub warps: usize,
    /// Fixed-point iterations per warp.
    pub inner_iters: usize,
    /// Downsampling factor between pyramid levels.
    pub pyramid_scale: f64,
    /// Stop adding levels once the short image side would drop below this.
    pub min_level_size: usize,
    /// Displacement (in pixels) that maps to 1.0 after normalization.
    pub max_displacement: f32,
}

impl Default for TvL1Params {
    fn default() -> Self {
        TvL1Params {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            warps: 5,
            inner_iters: 30,
            pyramid_scale: 0.5,
            min_level_size: 16,
            max_displacement: 8.0,
        }
    }
}

/// Single-channel image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(h: usize, w: usize) -> Plane {
        Plane { h, w, data: vec![0.0; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    fn at_clamped(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.at(y, x)
    }

    fn bilinear(&self, y: f32, x: f32) -> f32 {
        let xf = x.floor();
        let yf = y.floor();
        let fx = x - xf;
        let fy = y - yf;
        let (xi, yi) = (xf as isize, yf as isize);
        let v00 = self.at_clamped(yi, xi);
        let v01 = self.at_clamped(yi, xi + 1);
        let v10 = self.at_clamped(yi + 1, xi);
        let v11 = self.at_clamped(yi + 1, xi + 1);
        let top = v00 + fx * (v01 - v00);
        let bot = v10 + fx * (v11 - v10);
        top + fy * (bot - top)
    }

    /// 2x2 box-average downsample (edges clamped).
    fn half(&self) -> Plane {
        let nh = self.h.div_ceil(2);
        let nw = self.w.div_ceil(2);
        let mut out = Plane::zeros(nh, nw);
        for y in 0..nh {
            for x in 0..nw {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += self.at_clamped((2 * y + dy) as isize, (2 * x + dx) as isize);
                    }
                }
                out.data[y * nw + x] = acc * 0.25;
            }
        }
        out
    }

    /// Bilinear resize with pixel-center alignment.
    fn resize(&self, nh: usize, nw: usize) -> Plane {
        let mut out = Plane::zeros(nh, nw);
        for y in 0..nh {
            let sy = ((y as f32 + 0.5) * self.h as f32 / nh as f32 - 0.5)
                .clamp(0.0, (self.h - 1) as f32);
            for x in 0..nw {
                let sx = ((x as f32 + 0.5) * self.w as f32 / nw as f32 - 0.5)
                    .clamp(0.0, (self.w - 1) as f32);
                out.data[y * nw + x] = self.bilinear(sy, sx);
            }
        }
        out
    }
}

/// Dense flow field; `u` is horizontal displacement, `v` vertical, in
/// pixels of the input planes.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub u: Plane,
    pub v: Plane,
}

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Luma plane of one RGB frame (raw 0..255 values).
pub fn luma_frame(clip: &VideoClip<u8>, t: usize) -> Plane {
    let mut out = Plane::zeros(clip.h, clip.w);
    for y in 0..clip.h {
        for x in 0..clip.w {
            let r = clip.data[clip.idx(t, y, x, 0)] as f32;
            let g = clip.data[clip.idx(t, y, x, 1)] as f32;
            let b = clip.data[clip.idx(t, y, x, 2)] as f32;
            out.data[y * clip.w + x] =
                LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b;
        }
    }
    out
}

fn forward_diff(p: &Plane) -> (Plane, Plane) {
    let mut gx = Plane::zeros(p.h, p.w);
    let mut gy = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let i = y * p.w + x;
            gx.data[i] = if x + 1 < p.w { p.at(y, x + 1) - p.at(y, x) } else { 0.0 };
            gy.data[i] = if y + 1 < p.h { p.at(y + 1, x) - p.at(y, x) } else { 0.0 };
        }
    }
    (gx, gy)
}

fn centered_grad(p: &Plane) -> (Plane, Plane) {
    let mut gx = Plane::zeros(p.h, p.w);
    let mut gy = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let i = y * p.w + x;
            gx.data[i] =
                0.5 * (p.at_clamped(y as isize, x as isize + 1) - p.at_clamped(y as isize, x as isize - 1));
            gy.data[i] =
                0.5 * (p.at_clamped(y as isize + 1, x as isize) - p.at_clamped(y as isize - 1, x as isize));
        }
    }
    (gx, gy)
}

/// Adjoint of forward differences: backward-difference divergence.
fn divergence(px: &Plane, py: &Plane) -> Plane {
    let (h, w) = (px.h, px.w);
    let mut div = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x == 0 {
                px.at(y, 0)
            } else if x + 1 == w {
                -px.at(y, x - 1)
            } else {
                px.at(y, x) - px.at(y, x - 1)
            };
            let dy = if y == 0 {
                py.at(0, x)
            } else if y + 1 == h {
                -py.at(y - 1, x)
            } else {
                py.at(y, x) - py.at(y - 1, x)
            };
            div.data[i] = dx + dy;
        }
    }
    div
}

fn warp(p: &Plane, u: &Plane, v: &Plane) -> Plane {
    let mut out = Plane::zeros(p.h, p.w);
    for y in 0..p.h {
        for x in 0..p.w {
            let i = y * p.w + x;
            out.data[i] = p.bilinear(y as f32 + v.data[i], x as f32 + u.data[i]);
        }
    }
    out
}

/// TV + L1 objective value for the current flow estimate.
fn energy(i0: &Plane, i1: &Plane, u: &Plane, v: &Plane, lambda: f32) -> f64 {
    let warped = warp(i1, u, v);
    let (ux, uy) = forward_diff(u);
    let (vx, vy) = forward_diff(v);
    let mut e = 0.0f64;
    for i in 0..u.data.len() {
        let tv = (ux.data[i] * ux.data[i] + uy.data[i] * uy.data[i]).sqrt()
            + (vx.data[i] * vx.data[i] + vy.data[i] * vy.data[i]).sqrt();
        let data = (warped.data[i] - i0.data[i]).abs();
        e += tv as f64 + (lambda * data) as f64;
    }
    e
}

const GRAD_EPS: f32 = 1e-9;

fn solve_level(
    i0: &Plane,
    i1: &Plane,
    u: &mut Plane,
    v: &mut Plane,
    params: &TvL1Params,
    energies: Option<&mut Vec<f64>>,
) {
    let (h, w) = (i0.h, i0.w);
    let n = h * w;
    let lt = params.lambda * params.theta;
    let tau_theta = params.tau / params.theta;

    let (i1x, i1y) = centered_grad(i1);
    let mut p1x = Plane::zeros(h, w);
    let mut p1y = Plane::zeros(h, w);
    let mut p2x = Plane::zeros(h, w);
    let mut p2y = Plane::zeros(h, w);
    let mut local_energies = Vec::new();

    for _ in 0..params.warps {
        let u0 = u.clone();
        let v0 = v.clone();
        let i1w = warp(i1, &u0, &v0);
        let i1wx = warp(&i1x, &u0, &v0);
        let i1wy = warp(&i1y, &u0, &v0);

        // rho(u, v) = rho_c + I1x*u + I1y*v, linearized around (u0, v0).
        let mut rho_c = vec![0.0f32; n];
        let mut grad = vec![0.0f32; n];
        for i in 0..n {
            rho_c[i] = i1w.data[i]
                - i1wx.data[i] * u0.data[i]
                - i1wy.data[i] * v0.data[i]
                - i0.data[i];
            grad[i] = i1wx.data[i] * i1wx.data[i] + i1wy.data[i] * i1wy.data[i];
        }

        for _ in 0..params.inner_iters {
            // Thresholding step on the data term.
            let mut v1 = Plane::zeros(h, w);
            let mut v2 = Plane::zeros(h, w);
            for i in 0..n {
                let rho = rho_c[i] + i1wx.data[i] * u.data[i] + i1wy.data[i] * v.data[i];
                let (du, dv) = if rho < -lt * grad[i] {
                    (lt * i1wx.data[i], lt * i1wy.data[i])
                } else if rho > lt * grad[i] {
                    (-lt * i1wx.data[i], -lt * i1wy.data[i])
                } else if grad[i] > GRAD_EPS {
                    let s = -rho / grad[i];
                    (s * i1wx.data[i], s * i1wy.data[i])
                } else {
                    (0.0, 0.0)
                };
                v1.data[i] = u.data[i] + du;
                v2.data[i] = v.data[i] + dv;
            }

            // TV proximal step via the dual variables.
            let div1 = divergence(&p1x, &p1y);
            let div2 = divergence(&p2x, &p2y);
            for i in 0..n {
                u.data[i] = v1.data[i] + params.theta * div1.data[i];
                v.data[i] = v2.data[i] + params.theta * div2.data[i];
            }
            let (ux, uy) = forward_diff(u);
            let (vx, vy) = forward_diff(v);
            for i in 0..n {
                let nu = (ux.data[i] * ux.data[i] + uy.data[i] * uy.data[i]).sqrt();
                let dn = 1.0 + tau_theta * nu;
                p1x.data[i] = (p1x.data[i] + tau_theta * ux.data[i]) / dn;
                p1y.data[i] = (p1y.data[i] + tau_theta * uy.data[i]) / dn;
                let nv = (vx.data[i] * vx.data[i] + vy.data[i] * vy.data[i]).sqrt();
                let dm = 1.0 + tau_theta * nv;
                p2x.data[i] = (p2x.data[i] + tau_theta * vx.data[i]) / dm;
                p2y.data[i] = (p2y.data[i] + tau_theta * vy.data[i]) / dm;
            }
        }
        local_energies.push(energy(i0, i1, u, v, params.lambda));
    }
    if let Some(out) = energies {
        *out = local_energies;
    }
}

fn build_pyramid(p: &Plane, params: &TvL1Params) -> Vec<Plane> {
    let mut levels = vec![p.clone()];
    loop {
        let last = levels.last().unwrap();
        let nh = (last.h as f64 * params.pyramid_scale).floor() as usize;
        let nw = (last.w as f64 * params.pyramid_scale).floor() as usize;
        if nh.min(nw) < params.min_level_size {
            break;
        }
        levels.push(last.half());
    }
    levels
}

/// Flow from `prev` to `next`. Returns per-pixel displacements in pixels.
pub fn tvl1_flow(prev: &Plane, next: &Plane, params: &TvL1Params) -> Result<FlowField> {
    tvl1_flow_traced(prev, next, params, None)
}

/// Same as [`tvl1_flow`] but optionally records the objective value after
/// each warp of the finest level (coarser levels report into the same list
/// first, so the list is grouped by level, finest last).
pub fn tvl1_flow_traced(
    prev: &Plane,
    next: &Plane,
    params: &TvL1Params,
    mut warp_energies: Option<&mut Vec<Vec<f64>>>,
) -> Result<FlowField> {
    if prev.h != next.h || prev.w != next.w {
        return Err(Error::ShapeMismatch(format!(
            "flow inputs {}x{} vs {}x{}",
            prev.h, prev.w, next.h, next.w
        )));
    }
    if prev.h == 0 || prev.w == 0 {
        return Err(Error::EmptyClip);
    }
    let pyr0 = build_pyramid(prev, params);
    let pyr1 = build_pyramid(next, params);
    let coarsest = pyr0.len() - 1;
    let mut u = Plane::zeros(pyr0[coarsest].h, pyr0[coarsest].w);
    let mut v = Plane::zeros(pyr0[coarsest].h, pyr0[coarsest].w);

    for level in (0..=coarsest).rev() {
        if u.h != pyr0[level].h || u.w != pyr0[level].w {
            let sx = pyr0[level].w as f32 / u.w as f32;
            let sy = pyr0[level].h as f32 / u.h as f32;
            u = u.resize(pyr0[level].h, pyr0[level].w);
            v = v.resize(pyr0[level].h, pyr0[level].w);
            for val in &mut u.data {
                *val *= sx;
            }
            for val in &mut v.data {
                *val *= sy;
            }
        }
        let mut level_energy = Vec::new();
        solve_level(
            &pyr0[level],
            &pyr1[level],
            &mut u,
            &mut v,
            params,
            Some(&mut level_energy),
        );
        if let Some(out) = warp_energies.as_deref_mut() {
            out.push(level_energy);
        }
    }
    Ok(FlowField { u, v })
}

/// Flow stream for a whole clip: one field per adjacent frame pair, the
/// last field duplicated so T matches, displacements divided by
/// `max_displacement` and clamped to [-1, 1]. Channel 0 is u, channel 1 v.
pub fn clip_flow(clip: &VideoClip<u8>, params: &TvL1Params) -> Result<VideoClip<f32>> {
    if clip.channels != Channels::Rgb {
        return Err(Error::ShapeMismatch("clip_flow expects an RGB clip".into()));
    }
    if clip.t < 2 {
        return Err(Error::EmptyClip);
    }
    let planes: Vec<Plane> = (0..clip.t).map(|t| luma_frame(clip, t)).collect();
    let mut out = VideoClip::<f32>::zeros(clip.t, clip.h, clip.w, Channels::Flow, clip.fps)?;
    let inv = 1.0 / params.max_displacement;
    for t in 0..clip.t - 1 {
        let field = tvl1_flow(&planes[t], &planes[t + 1], params)?;
        for y in 0..clip.h {
            for x in 0..clip.w {
                let i = y * clip.w + x;
                let ou = out.idx(t, y, x, 0);
                out.data[ou] = (field.u.data[i] * inv).clamp(-1.0, 1.0);
                let ov = out.idx(t, y, x, 1);
                out.data[ov] = (field.v.data[i] * inv).clamp(-1.0, 1.0);
            }
        }
    }
    let stride = clip.h * clip.w * 2;
    let (head, tail) = out.data.split_at_mut((clip.t - 1) * stride);
    tail.copy_from_slice(&head[(clip.t - 2) * stride..]);
    Ok(out)
}
