//! Region boxes in normalized image coordinates and the algebra the zoom
//! mechanism is built on.
//!
//! A [`RegionBox`] is axis-aligned, expressed as corner fractions of whatever
//! frame it is applied to. Zooming twice composes two boxes; `compose` is the
//! affine nesting operation that turns "box B selected inside the view of
//! box A" into a single box in source coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with normalized corners, `0 <= x0 < x1 <= 1` and same
/// for y. Serialized as the 4-array `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct RegionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Integer pixel rectangle, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

impl From<[f64; 4]> for RegionBox {
    fn from(v: [f64; 4]) -> Self {
        RegionBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<RegionBox> for [f64; 4] {
    fn from(b: RegionBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl RegionBox {
    /// The whole frame.
    pub const IDENTITY: RegionBox = RegionBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = RegionBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= 1.0
            && self.y1 <= 1.0
            && self.x0 < self.x1
            && self.y0 < self.y1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!(
                "[{}, {}, {}, {}]",
                self.x0, self.y0, self.x1, self.y1
            )))
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Resolve `inner`, expressed in this box's local frame, into the frame
    /// this box lives in. Associative, with `IDENTITY` as the neutral
    /// element on the left.
    pub fn compose(&self, inner: &RegionBox) -> RegionBox {
        let w = self.width();
        let h = self.height();
        RegionBox {
            x0: self.x0 + inner.x0 * w,
            y0: self.y0 + inner.y0 * h,
            x1: self.x0 + inner.x1 * w,
            y1: self.y0 + inner.y1 * h,
        }
    }

    /// Intersection-over-union with `other`.
    pub fn iou(&self, other: &RegionBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Pixel rectangle of this box on a `w` x `h` frame. Corners are scaled
    /// and rounded half-away-from-zero; a rect smaller than one pixel on
    /// either axis is a degenerate zoom.
    pub fn pixel_rect(&self, w: usize, h: usize) -> Result<PixelRect> {
        let px0 = (self.x0 * w as f64).round() as usize;
        let px1 = (self.x1 * w as f64).round() as usize;
        let py0 = (self.y0 * h as f64).round() as usize;
        let py1 = (self.y1 * h as f64).round() as usize;
        if px1 <= px0 || py1 <= py0 {
            return Err(Error::DegenerateZoom {
                w: self.width() * w as f64,
                h: self.height() * h as f64,
            });
        }
        Ok(PixelRect {
            x0: px0,
            y0: py0,
            x1: px1.min(w),
            y1: py1.min(h),
        })
    }
}

/// The static zoom targets the agent chooses between: four 0.6-scale corner
/// boxes plus one 0.6-scale center box. Defined for `k == 5`; other sizes
/// must come from a config file.
pub fn default_prior_boxes(k: usize) -> Result<Vec<RegionBox>> {
    if k != 5 {
        return Err(Error::Config(format!(
            "default prior-box layout is defined for k=5, got k={k}"
        )));
    }
    Ok(vec![
        RegionBox::new(0.0, 0.0, 0.6, 0.6)?,
        RegionBox::new(0.4, 0.0, 1.0, 0.6)?,
        RegionBox::new(0.0, 0.4, 0.6, 1.0)?,
        RegionBox::new(0.4, 0.4, 1.0, 1.0)?,
        RegionBox::new(0.2, 0.2, 0.8, 0.8)?,
    ])
}
