//! Bounding-box algebra: conventions, IoU, scaling, clipping.
//!
//! The canonical box representation everywhere in this crate is corner form
//! `(x1, y1, x2, y2)` in absolute pixels. Other conventions (COCO xywh,
//! YOLO center-normalized) exist only at format boundaries and are bridged
//! by [`convert_box`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in canonical corner form. Coordinates are real-valued;
/// rounding to integer pixels happens only when a consumer format demands it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Image dimensions in pixels, both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(ImageDims { width, height })
    }
}

impl std::fmt::Display for ImageDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Coordinate convention of a raw 4-tuple at a format boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// `(x1, y1, x2, y2)` absolute pixels — the canonical form.
    CornerAbs,
    /// `(x1, y1, x2, y2)` as fractions of image size.
    CornerNorm,
    /// `(cx, cy, w, h)` as fractions of image size — YOLO labels.
    CenterNorm,
    /// `(x, y, w, h)` absolute pixels, `(x, y)` top-left — COCO bboxes.
    XywhAbs,
}

impl Convention {
    fn is_normalized(self) -> bool {
        matches!(self, Convention::CornerNorm | Convention::CenterNorm)
    }
}

impl BoundingBox {
    /// Checked constructor enforcing the ordering invariant.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 <= x2 && y1 <= y2) {
            return Err(Error::Domain(format!(
                "box corners out of order: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::Domain("box coordinate is not finite".into()));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    /// Unchecked constructor for coordinates already known to be ordered.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2);
        BoundingBox { x1, y1, x2, y2 }
    }

    /// COCO-style `(x, y, w, h)`; extents must be non-negative.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::Domain(format!(
                "negative box extent: w={w}, h={h}"
            )));
        }
        BoundingBox::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Zero-area boxes arise legitimately from clipping; geometry tolerates
    /// them (IoU 0) while parsers reject negative extents.
    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }
}

/// Intersection over union of two canonical boxes.
///
/// Returns 0 when either box is degenerate or the boxes are disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    if ix2 <= ix1 || iy2 <= iy1 {
        return 0.0;
    }
    let inter = (ix2 - ix1) * (iy2 - iy1);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Multiply every coordinate by `factor` (> 0). Ordering is preserved.
pub fn scale_box(b: &BoundingBox, factor: f64) -> Result<BoundingBox> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale factor must be positive and finite, got {factor}"
        )));
    }
    Ok(BoundingBox {
        x1: b.x1 * factor,
        y1: b.y1 * factor,
        x2: b.x2 * factor,
        y2: b.y2 * factor,
    })
}

/// Clamp a canonical box to `[0, width] x [0, height]`. Idempotent; may
/// produce a zero-area box.
pub fn clip_box(b: &BoundingBox, dims: ImageDims) -> BoundingBox {
    let w = dims.width as f64;
    let h = dims.height as f64;
    let x1 = b.x1.clamp(0.0, w);
    let y1 = b.y1.clamp(0.0, h);
    let x2 = b.x2.clamp(0.0, w);
    let y2 = b.y2.clamp(0.0, h);
    BoundingBox { x1, y1, x2, y2 }
}

/// Convert a raw 4-tuple between conventions.
///
/// `dims` is required exactly when the conversion crosses the
/// normalized/absolute boundary. Normalized inputs are validated to lie in
/// `[0, 1]` and rejected with a domain error otherwise.
pub fn convert_box(
    quad: [f64; 4],
    from: Convention,
    to: Convention,
    dims: Option<ImageDims>,
) -> Result<[f64; 4]> {
    if from.is_normalized() && quad.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!(
            "normalized box field outside [0,1]: {quad:?}"
        )));
    }

    // Corner form within the source space (normalized or absolute).
    let corners = match from {
        Convention::CornerAbs | Convention::CornerNorm => quad,
        Convention::XywhAbs => {
            let [x, y, w, h] = quad;
            [x, y, x + w, y + h]
        }
        Convention::CenterNorm => {
            let [cx, cy, w, h] = quad;
            [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
        }
    };

    // Cross the normalized/absolute boundary if needed.
    let corners = if from.is_normalized() == to.is_normalized() {
        corners
    } else {
        let dims = dims.ok_or_else(|| {
            Error::InvalidArgument(
                "image dims required to convert between normalized and absolute forms".into(),
            )
        })?;
        let (w, h) = (dims.width as f64, dims.height as f64);
        if from.is_normalized() {
            [corners[0] * w, corners[1] * h, corners[2] * w, corners[3] * h]
        } else {
            [corners[0] / w, corners[1] / h, corners[2] / w, corners[3] / h]
        }
    };

    let [x1, y1, x2, y2] = corners;
    Ok(match to {
        Convention::CornerAbs | Convention::CornerNorm => corners,
        Convention::XywhAbs => [x1, y1, x2 - x1, y2 - y1],
        Convention::CenterNorm => [
            (x1 + x2) / 2.0,
            (y1 + y2) / 2.0,
            x2 - x1,
            y2 - y1,
        ],
    })
}

/// Convert a raw boundary tuple into a canonical corner-absolute box.
pub fn to_canonical(quad: [f64; 4], from: Convention, dims: Option<ImageDims>) -> Result<BoundingBox> {
    let [x1, y1, x2, y2] = convert_box(quad, from, Convention::CornerAbs, dims)?;
    BoundingBox::new(x1, y1, x2, y2)
}

/// Express a canonical box in another convention.
pub fn from_canonical(b: &BoundingBox, to: Convention, dims: Option<ImageDims>) -> Result<[f64; 4]> {
    convert_box([b.x1, b.y1, b.x2, b.y2], Convention::CornerAbs, to, dims)
}
