//! Box arithmetic and the crop-and-resize operation with its exact inverse.
//!
//! Boxes are stored in center-size form. Corner form only appears inside the
//! overlap computations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Raster};

/// Default context factor for template crops.
pub const TEMPLATE_FACTOR: f64 = 2.0;
/// Default context factor for search crops.
pub const SEARCH_FACTOR: f64 = 4.0;
/// A clipped ground-truth box keeping less than this fraction of its area is invisible.
pub const MIN_VISIBLE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    FramePixels,
    CropNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub space: Space,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, space: Space) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "negative box size {w}x{h}");
        Self {
            cx,
            cy,
            w,
            h,
            space,
        }
    }

    pub fn frame(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx, cy, w, h, Space::FramePixels)
    }

    pub fn crop(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx, cy, w, h, Space::CropNormalized)
    }

    /// From top-left corner plus size (the `x,y,w,h` annotation form).
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64, space: Space) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h, space)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub fn to_corner_form(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    pub fn params(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Enforces a minimum side length, reporting whether anything changed.
    pub fn clamp_min_size(&self, min_side: f64) -> (Self, bool) {
        let w = self.w.max(min_side);
        let h = self.h.max(min_side);
        let changed = w != self.w || h != self.h || !w.is_finite() || !h.is_finite();
        let out = Self {
            w: if w.is_finite() { w } else { min_side },
            h: if h.is_finite() { h } else { min_side },
            ..*self
        };
        (out, changed)
    }

    /// Clips to the unit square (crop-normalized boxes only).
    ///
    /// Returns the clipped box and whether it keeps at least
    /// [`MIN_VISIBLE_FRACTION`] of the original area.
    pub fn clip_to_unit(&self) -> Result<(BBox, bool)> {
        if self.space != Space::CropNormalized {
            return Err(Error::SpaceMismatch(self.space, Space::CropNormalized));
        }
        let (x0, y0, x1, y1) = self.corners();
        let (x0, y0) = (x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0));
        let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        let clipped = BBox::crop((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0);
        let original = self.area();
        let visible = original > 0.0 && clipped.area() >= MIN_VISIBLE_FRACTION * original;
        Ok((clipped, visible))
    }
}

fn same_space(a: &BBox, b: &BBox) -> Result<()> {
    if a.space != b.space {
        return Err(Error::SpaceMismatch(a.space, b.space));
    }
    Ok(())
}

fn intersection_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

fn hull_area(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0))
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    same_space(a, b)?;
    let (inter, union) = intersection_union(a, b);
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Generalized IoU: `iou - (hull - union) / hull`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    same_space(a, b)?;
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::DegenerateBox(format!(
                "giou needs positive area, got {}x{}",
                bx.w, bx.h
            )));
        }
    }
    let (inter, union) = intersection_union(a, b);
    let hull = hull_area(a, b);
    Ok(inter / union - (hull - union) / hull)
}

/// Affine map between a frame and a square crop of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    /// Crop center in frame pixels.
    pub source_center: (f64, f64),
    /// Crop side length in frame pixels.
    pub source_side: f64,
    /// Side of the resampled crop in pixels.
    pub output_resolution: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToCrop,
    ToFrame,
}

impl CropTransform {
    pub fn new(source_center: (f64, f64), source_side: f64, output_resolution: usize) -> Self {
        Self {
            source_center,
            source_side,
            output_resolution,
        }
    }

    /// Frame pixel -> crop-normalized coordinate.
    pub fn point_to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.source_center.0) / self.source_side + 0.5,
            (y - self.source_center.1) / self.source_side + 0.5,
        )
    }

    /// Crop-normalized coordinate -> frame pixel.
    pub fn point_to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.source_center.0 + (u - 0.5) * self.source_side,
            self.source_center.1 + (v - 0.5) * self.source_side,
        )
    }

    /// Frame pixel -> crop pixel (before normalization by the output resolution).
    pub fn point_to_crop_pixels(&self, x: f64, y: f64) -> (f64, f64) {
        let (u, v) = self.point_to_crop(x, y);
        let r = self.output_resolution as f64;
        (u * r, v * r)
    }

    /// Crop pixels per frame pixel.
    pub fn scale(&self) -> f64 {
        self.output_resolution as f64 / self.source_side
    }
}

pub fn map_box(b: &BBox, t: &CropTransform, direction: Direction) -> Result<BBox> {
    match direction {
        Direction::ToCrop => {
            if b.space != Space::FramePixels {
                return Err(Error::SpaceMismatch(b.space, Space::FramePixels));
            }
            let (cx, cy) = t.point_to_crop(b.cx, b.cy);
            Ok(BBox::crop(cx, cy, b.w / t.source_side, b.h / t.source_side))
        }
        Direction::ToFrame => {
            if b.space != Space::CropNormalized {
                return Err(Error::SpaceMismatch(b.space, Space::CropNormalized));
            }
            let (cx, cy) = t.point_to_frame(b.cx, b.cy);
            Ok(BBox::frame(cx, cy, b.w * t.source_side, b.h * t.source_side))
        }
    }
}

/// Crops a square of side `search_factor * sqrt(w * h)` centered on `b`.
pub fn crop<F: Raster + ?Sized>(
    frame: &F,
    b: &BBox,
    search_factor: f64,
    out_res: usize,
) -> Result<(Image, CropTransform)> {
    if b.space != Space::FramePixels {
        return Err(Error::SpaceMismatch(b.space, Space::FramePixels));
    }
    if !(b.w > 0.0 && b.h > 0.0) || !b.w.is_finite() || !b.h.is_finite() {
        return Err(Error::DegenerateBox(format!(
            "crop needs positive box size, got {}x{}",
            b.w, b.h
        )));
    }
    if !(search_factor > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "search factor must exceed 1, got {search_factor}"
        )));
    }
    let side = search_factor * (b.w * b.h).sqrt();
    let t = CropTransform::new((b.cx, b.cy), side, out_res);
    Ok((resample(frame, &t), t))
}

/// Bilinear resampling of the region described by `t`.
///
/// Samples falling outside the frame read the per-channel frame mean.
pub fn resample<F: Raster + ?Sized>(frame: &F, t: &CropTransform) -> Image {
    let r = t.output_resolution;
    let mean = frame.channel_mean();
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let fetch = |x: i64, y: i64, c: usize| -> f32 {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            mean[c]
        } else {
            frame.sample(x as usize, y as usize, c)
        }
    };
    let mut data = vec![0f32; r * r * 3];
    let step = t.source_side / r as f64;
    let x_origin = t.source_center.0 - t.source_side / 2.0;
    let y_origin = t.source_center.1 - t.source_side / 2.0;
    for i in 0..r {
        // pixel-index space: pixel k has its center at k + 0.5
        let py = y_origin + (i as f64 + 0.5) * step - 0.5;
        let y0 = py.floor();
        let wy = (py - y0) as f32;
        let y0 = y0 as i64;
        for j in 0..r {
            let px = x_origin + (j as f64 + 0.5) * step - 0.5;
            let x0 = px.floor();
            let wx = (px - x0) as f32;
            let x0 = x0 as i64;
            let o = (i * r + j) * 3;
            for c in 0..3 {
                let top = fetch(x0, y0, c) * (1.0 - wx) + fetch(x0 + 1, y0, c) * wx;
                let bot = fetch(x0, y0 + 1, c) * (1.0 - wx) + fetch(x0 + 1, y0 + 1, c) * wx;
                data[o + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Image::new(r, r, data).expect("sized above")
}
