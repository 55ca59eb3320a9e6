//! Box arithmetic, ground-truth occlusion and ROI feature extraction.
//!
//! Boxes use the top-left + size convention `(x, y, w, h)` in image pixels.
//! Feature grids are row-major `C x H x W`; grid cell `(gy, gx)` covers the
//! image region `[gx * stride, (gx + 1) * stride)` horizontally and its value
//! lives at the cell center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default ROI output resolution (14 x 14).
pub const DEFAULT_ROI_SIZE: usize = 14;
/// Default feature stride: one grid cell per 8 image pixels.
pub const DEFAULT_STRIDE: f64 = 8.0;

/// Axis-aligned rectangle, top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BBox::new(r.x, r.y, r.w, r.h)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox { x: b.x, y: b.y, w: b.w, h: b.h }
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox { x, y, w, h });
        }
        Ok(BBox { x, y, w, h })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Returns a copy shifted by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// True when the box lies fully inside `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Occlusion level of a ground-truth box: its largest IoU with any other
/// ground-truth box of the same image. `others` must not contain `g`.
pub fn gt_occlusion<'a>(g: &BBox, others: impl IntoIterator<Item = &'a BBox>) -> f64 {
    others.into_iter().map(|o| iou(g, o)).fold(0.0, f64::max)
}

/// Dense `C x H x W` activation grid with a spatial stride in image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    stride: f64,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, stride: f64, values: Vec<f64>) -> Result<Self> {
        if !(stride.is_finite() && stride > 0.0) {
            return Err(Error::InvalidConfig(format!("feature stride must be positive, got {stride}")));
        }
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{height}x{width} = {expected} values"),
                found: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("feature grid contains non-finite values".into()));
        }
        Ok(FeatureGrid { channels, height, width, stride, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: f64) -> Result<Self> {
        FeatureGrid::new(channels, height, width, stride, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> f64 {
        self.stride
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Image extent covered by the grid, in pixels.
    pub fn image_extent(&self) -> (f64, f64) {
        (self.width as f64 * self.stride, self.height as f64 * self.stride)
    }

    /// Reads one lattice value, zero outside the grid.
    fn at_or_zero(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0.0
        } else {
            self.get(c, y as usize, x as usize)
        }
    }

    /// Bilinear sample at continuous feature coordinates where lattice value
    /// `(gy, gx)` sits at `(gy + 0.5, gx + 0.5)`.
    pub fn sample(&self, c: usize, fy: f64, fx: f64) -> f64 {
        let u = fx - 0.5;
        let v = fy - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let ax = u - x0;
        let ay = v - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = (1.0 - ax) * self.at_or_zero(c, y0, x0) + ax * self.at_or_zero(c, y0, x0 + 1);
        let bottom = (1.0 - ax) * self.at_or_zero(c, y0 + 1, x0) + ax * self.at_or_zero(c, y0 + 1, x0 + 1);
        (1.0 - ay) * top + ay * bottom
    }

    /// Mean of each channel over the grid cells whose centers fall inside `b`.
    pub fn mean_over(&self, b: &BBox) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        let mut count = 0usize;
        for gy in 0..self.height {
            let cy = (gy as f64 + 0.5) * self.stride;
            if cy < b.y() || cy >= b.bottom() {
                continue;
            }
            for gx in 0..self.width {
                let cx = (gx as f64 + 0.5) * self.stride;
                if cx < b.x() || cx >= b.right() {
                    continue;
                }
                count += 1;
                for (c, s) in sums.iter_mut().enumerate() {
                    *s += self.get(c, gy, gx);
                }
            }
        }
        if count > 0 {
            sums.iter_mut().for_each(|s| *s /= count as f64);
        }
        sums
    }
}

/// Fixed-size `C x S x S` feature patch extracted for one box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    channels: usize,
    size: usize,
    values: Vec<f64>,
}

impl RoiFeature {
    pub fn new(channels: usize, size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * size * size {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{size}x{size}"),
                found: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("ROI feature contains non-finite values".into()));
        }
        Ok(RoiFeature { channels, size, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.size + y) * self.size + x]
    }
}

/// Extracts an `out_size x out_size` patch for `roi` by bilinear sampling at
/// each output cell center. Samples falling outside the grid read as zero.
pub fn roi_align(fg: &FeatureGrid, roi: &BBox, out_size: usize) -> Result<RoiFeature> {
    if out_size == 0 {
        return Err(Error::InvalidConfig("ROI output size must be positive".into()));
    }
    let (img_w, img_h) = fg.image_extent();
    if roi.right() <= 0.0 || roi.bottom() <= 0.0 || roi.x() >= img_w || roi.y() >= img_h {
        return Err(Error::EmptyRoi);
    }
    let s = fg.stride();
    let (x0, y0) = (roi.x() / s, roi.y() / s);
    let bin_w = roi.w() / s / out_size as f64;
    let bin_h = roi.h() / s / out_size as f64;
    let mut values = Vec::with_capacity(fg.channels() * out_size * out_size);
    for c in 0..fg.channels() {
        for oy in 0..out_size {
            let fy = y0 + (oy as f64 + 0.5) * bin_h;
            for ox in 0..out_size {
                let fx = x0 + (ox as f64 + 0.5) * bin_w;
                values.push(fg.sample(c, fy, fx));
            }
        }
    }
    Ok(RoiFeature { channels: fg.channels(), size: out_size, values })
}
