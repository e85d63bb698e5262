//! Video tensors and the pixel-space operations the attention pipeline uses:
//! temporal subsampling, normalization, and box-driven crop-resize.
//!
//! Layout is always `[T][H][W][C]` row-major with channels innermost, the
//! same order the clip container serializes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::RegionBox;

/// What the channel axis holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    Rgb,
    Flow,
}

impl Channels {
    pub fn count(&self) -> usize {
        match self {
            Channels::Rgb => 3,
            Channels::Flow => 2,
        }
    }

    pub fn from_count(c: usize) -> Result<Self> {
        match c {
            3 => Ok(Channels::Rgb),
            2 => Ok(Channels::Flow),
            _ => Err(Error::Format(format!("unsupported channel count {c}"))),
        }
    }
}

/// Clip class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Violent,
    NonViolent,
}

impl Label {
    /// Index used in confusion matrices and classify-action slots
    /// (violent first).
    pub fn index(&self) -> usize {
        match self {
            Label::Violent => 0,
            Label::NonViolent => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Violent),
            1 => Ok(Label::NonViolent),
            _ => Err(Error::InvalidAction(format!("class index {i}"))),
        }
    }
}

/// Dense video tensor. `P` is `u8` for stored clips, `f32` for the working
/// form the network sees.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip<P> {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: Channels,
    /// Informational only; not consulted by any operation here.
    pub fps: f32,
    pub data: Vec<P>,
}

/// A stored clip with its annotations.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip: VideoClip<u8>,
    pub label: Label,
    pub gt_box: Option<RegionBox>,
    pub seed: u64,
}

pub const DEFAULT_FPS: f32 = 24.0;

impl<P: Copy + Default> VideoClip<P> {
    pub fn new(
        t: usize,
        h: usize,
        w: usize,
        channels: Channels,
        fps: f32,
        data: Vec<P>,
    ) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::EmptyClip);
        }
        let want = t * h * w * channels.count();
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "clip data has {} values, dims {}x{}x{}x{} need {}",
                data.len(),
                t,
                h,
                w,
                channels.count(),
                want
            )));
        }
        Ok(VideoClip { t, h, w, channels, fps, data })
    }

    pub fn zeros(t: usize, h: usize, w: usize, channels: Channels, fps: f32) -> Result<Self> {
        let n = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(channels.count()))
            .ok_or(Error::EmptyClip)?;
        Self::new(t, h, w, channels, fps, vec![P::default(); n])
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.channels.count() + c
    }

    pub fn frame(&self, t: usize) -> &[P] {
        let stride = self.h * self.w * self.channels.count();
        &self.data[t * stride..(t + 1) * stride]
    }

    /// Indices picked by [`sample_frames`](Self::sample_frames) for a clip of
    /// length `t` resampled to `t_out` frames: an even stride when the clip
    /// is long enough, last-frame padding when it is short.
    pub fn frame_indices(t: usize, t_out: usize) -> Vec<usize> {
        if t >= t_out {
            (0..t_out).map(|i| i * t / t_out).collect()
        } else {
            (0..t_out).map(|i| i.min(t - 1)).collect()
        }
    }

    /// Evenly resample the time axis to `t_out` frames.
    pub fn sample_frames(&self, t_out: usize) -> Result<VideoClip<P>> {
        if t_out == 0 {
            return Err(Error::EmptyClip);
        }
        let idx = Self::frame_indices(self.t, t_out);
        let stride = self.h * self.w * self.channels.count();
        let mut data = Vec::with_capacity(t_out * stride);
        for &i in &idx {
            data.extend_from_slice(self.frame(i));
        }
        VideoClip::new(t_out, self.h, self.w, self.channels, self.fps, data)
    }
}

impl VideoClip<u8> {
    /// Working-form copy with raw 0..255 values.
    pub fn to_f32(&self) -> VideoClip<f32> {
        VideoClip {
            t: self.t,
            h: self.h,
            w: self.w,
            channels: self.channels,
            fps: self.fps,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Map pixels to [-1, 1] via `v / 127.5 - 1`.
    pub fn normalize(&self) -> VideoClip<f32> {
        let mut out = self.to_f32();
        out.normalize_in_place();
        out
    }
}

impl VideoClip<f32> {
    /// Apply the same `v / 127.5 - 1` map as [`VideoClip::normalize`] to a
    /// clip still holding raw 0..255 values.
    pub fn normalize_in_place(&mut self) {
        for v in &mut self.data {
            *v = *v / 127.5 - 1.0;
        }
    }

    /// Crop `region` out of every frame and bilinearly resample it to
    /// `out_h` x `out_w`. The pixel rect is the box rounded
    /// half-away-from-zero; sampling aligns pixel centers and clamps at the
    /// crop edges, so an identity box at unchanged size copies exactly.
    pub fn crop_resize(
        &self,
        region: &RegionBox,
        out_h: usize,
        out_w: usize,
    ) -> Result<VideoClip<f32>> {
        region.validate()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::EmptyClip);
        }
        let rect = region.pixel_rect(self.w, self.h)?;
        let (cw, ch) = (rect.width(), rect.height());
        let nc = self.channels.count();
        let mut out =
            VideoClip::<f32>::zeros(self.t, out_h, out_w, self.channels, self.fps)?;

        // Source coordinate (within the crop) for each output column/row.
        let map = |j: usize, out_n: usize, crop_n: usize| -> (usize, usize, f32) {
            let s = (j as f64 + 0.5) * crop_n as f64 / out_n as f64 - 0.5;
            let s = s.clamp(0.0, (crop_n - 1) as f64);
            let lo = s.floor();
            let frac = (s - lo) as f32;
            let lo = lo as usize;
            let hi = (lo + 1).min(crop_n - 1);
            (lo, hi, frac)
        };
        let cols: Vec<(usize, usize, f32)> = (0..out_w).map(|j| map(j, out_w, cw)).collect();
        let rows: Vec<(usize, usize, f32)> = (0..out_h).map(|i| map(i, out_h, ch)).collect();

        for t in 0..self.t {
            for (i, &(ylo, yhi, fy)) in rows.iter().enumerate() {
                for (j, &(xlo, xhi, fx)) in cols.iter().enumerate() {
                    for c in 0..nc {
                        let at = |yy: usize, xx: usize| {
                            self.data[self.idx(t, rect.y0 + yy, rect.x0 + xx, c)]
                        };
                        let top = at(ylo, xlo) + fx * (at(ylo, xhi) - at(ylo, xlo));
                        let bot = at(yhi, xlo) + fx * (at(yhi, xhi) - at(yhi, xlo));
                        let v = top + fy * (bot - top);
                        let o = out.idx(t, i, j, c);
                        out.data[o] = v;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    fn random_clip(rng: &mut Pcg32, t: usize, h: usize, w: usize) -> VideoClip<u8> {
        let n = t * h * w * 3;
        let data: Vec<u8> = (0..n).map(|_| rng.below(256) as u8).collect();
        VideoClip::new(t, h, w, Channels::Rgb, DEFAULT_FPS, data).unwrap()
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let clip =
            VideoClip::new(1, 1, 3, Channels::Rgb, DEFAULT_FPS, vec![0, 127, 255, 0, 0, 0, 0, 0, 0])
                .unwrap();
        let n = clip.normalize();
        assert_eq!(n.data[0], -1.0);
        assert!((n.data[1] - (-0.003_921_57)).abs() < 1e-7);
        assert_eq!(n.data[2], 1.0);
    }

    #[test]
    fn normalize_stays_in_unit_range() {
        let mut rng = Pcg32::new(21, 0);
        let n = random_clip(&mut rng, 2, 5, 5).normalize();
        assert!(n.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn frame_sampling_even_stride() {
        assert_eq!(VideoClip::<u8>::frame_indices(10, 5), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn frame_sampling_pads_short_clips() {
        assert_eq!(VideoClip::<u8>::frame_indices(3, 5), vec![0, 1, 2, 2, 2]);
    }

    #[test]
    fn frame_sampling_identity() {
        let mut rng = Pcg32::new(22, 0);
        let clip = random_clip(&mut rng, 4, 3, 3);
        let s = clip.sample_frames(4).unwrap();
        assert_eq!(s.data, clip.data);
    }

    #[test]
    fn frame_indices_are_monotone_and_in_range() {
        let mut rng = Pcg32::new(23, 0);
        for _ in 0..200 {
            let t = 1 + rng.below(40);
            let t_out = 1 + rng.below(40);
            let idx = VideoClip::<u8>::frame_indices(t, t_out);
            assert_eq!(idx.len(), t_out);
            assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            assert!(idx.iter().all(|&i| i < t));
        }
    }

    #[test]
    fn crop_resize_identity_is_exact() {
        let mut rng = Pcg32::new(24, 0);
        let clip = random_clip(&mut rng, 3, 6, 7).to_f32();
        let out = clip.crop_resize(&RegionBox::IDENTITY, 6, 7).unwrap();
        assert_eq!(out.data, clip.data);
    }

    #[test]
    fn crop_resize_aligned_half_crop_is_a_block_copy() {
        let mut rng = Pcg32::new(25, 0);
        let clip = random_clip(&mut rng, 1, 4, 4).to_f32();
        let b = RegionBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let out = clip.crop_resize(&b, 2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    assert_eq!(out.data[out.idx(0, y, x, c)], clip.data[clip.idx(0, y, x, c)]);
                }
            }
        }
    }

    // Direct per-pixel bilinear evaluation, written from the interpolation
    // formula to check the vectorized path against.
    fn bilinear_at(vals: &[f32], n: usize, out_n: usize, j: usize) -> f32 {
        let s = ((j as f64 + 0.5) * n as f64 / out_n as f64 - 0.5)
            .clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let f = (s - lo as f64) as f32;
        vals[lo] * (1.0 - f) + f * vals[hi]
    }

    #[test]
    fn crop_resize_upsample_matches_direct_bilinear() {
        // One row of two pixels upsampled to four columns.
        let clip = VideoClip::new(
            1,
            1,
            2,
            Channels::Rgb,
            DEFAULT_FPS,
            vec![10.0, 0.0, 0.0, 50.0, 0.0, 0.0],
        )
        .unwrap();
        let out = clip.crop_resize(&RegionBox::IDENTITY, 1, 4).unwrap();
        let row = [10.0f32, 50.0];
        for j in 0..4 {
            let want = bilinear_at(&row, 2, 4, j);
            let got = out.data[out.idx(0, 0, j, 0)];
            assert!((got - want).abs() < 1e-6, "col {j}: {got} vs {want}");
        }
        // Interior columns are true mixtures, not copies.
        assert!((out.data[out.idx(0, 0, 1, 0)] - 20.0).abs() < 1e-5);
        assert!((out.data[out.idx(0, 0, 2, 0)] - 40.0).abs() < 1e-5);
    }

    #[test]
    fn crop_resize_2x2_to_4x4_matches_separable_oracle() {
        let mut rng = Pcg32::new(26, 0);
        let clip = random_clip(&mut rng, 1, 2, 2).to_f32();
        let out = clip.crop_resize(&RegionBox::IDENTITY, 4, 4).unwrap();
        for c in 0..3 {
            // Interpolate rows first, then the column direction.
            let g = |y: usize, x: usize| clip.data[clip.idx(0, y, x, c)];
            for i in 0..4 {
                for j in 0..4 {
                    let top = bilinear_at(&[g(0, 0), g(0, 1)], 2, 4, j);
                    let bot = bilinear_at(&[g(1, 0), g(1, 1)], 2, 4, j);
                    let want = bilinear_at(&[top, bot], 2, 4, i);
                    let got = out.data[out.idx(0, i, j, c)];
                    assert!((got - want).abs() < 1e-5, "({i},{j},{c})");
                }
            }
        }
    }

    #[test]
    fn crop_resize_rejects_sub_pixel_crops() {
        let clip = VideoClip::<f32>::zeros(1, 4, 4, Channels::Rgb, DEFAULT_FPS).unwrap();
        let b = RegionBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        assert!(matches!(
            clip.crop_resize(&b, 2, 2),
            Err(Error::DegenerateZoom { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(VideoClip::<u8>::new(1, 2, 2, Channels::Rgb, DEFAULT_FPS, vec![0; 5]).is_err());
        assert!(VideoClip::<u8>::new(0, 2, 2, Channels::Rgb, DEFAULT_FPS, vec![]).is_err());
    }
}
