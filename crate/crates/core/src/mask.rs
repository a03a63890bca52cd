//! Boxes, binary masks and their uncompressed run-length encoding.
//!
//! Run-length counts are over row-major pixel order and always start with a
//! run of zeros (possibly of length 0), alternating zeros and ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Positive extent and fully inside a `width` x `height` image.
    pub fn is_valid_in(&self, width: u32, height: u32) -> bool {
        self.is_finite()
            && self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= f64::from(width)
            && self.bottom() <= f64::from(height)
    }

    /// Intersection with the image rectangle; `None` when nothing of positive
    /// area remains.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        if !self.is_finite() {
            return None;
        }
        let x0 = self.x.clamp(0.0, f64::from(width));
        let y0 = self.y.clamp(0.0, f64::from(height));
        let x1 = self.right().clamp(0.0, f64::from(width));
        let y1 = self.bottom().clamp(0.0, f64::from(height));
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Tight rectangle enclosing both boxes.
    pub fn union_rect(&self, other: &BBox) -> BBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Grows the box by `margin` on every side.
    pub fn expand(&self, margin: f64) -> BBox {
        BBox::new(
            self.x - margin,
            self.y - margin,
            self.w + 2.0 * margin,
            self.h + 2.0 * margin,
        )
    }

    /// Pixel index range `[x0, x1) x [y0, y1)` covered by the box, clipped to
    /// the image.
    pub fn pixel_span(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let clip = |v: f64, hi: u32| v.max(0.0).min(f64::from(hi)) as u32;
        (
            clip(self.x.floor(), width),
            clip(self.y.floor(), height),
            clip(self.right().ceil(), width),
            clip(self.bottom().ceil(), height),
        )
    }

    pub fn contains_rect(&self, inner: &BBox) -> bool {
        inner.x >= self.x
            && inner.y >= self.y
            && inner.right() <= self.right()
            && inner.bottom() <= self.bottom()
    }
}

/// Dense binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Mask with every pixel touched by `bbox` set.
    pub fn from_box(width: u32, height: u32, bbox: &BBox) -> Self {
        let mut mask = Self::new(width, height);
        let (x0, y0, x1, y1) = bbox.pixel_span(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                mask.set(x, y, true);
            }
        }
        mask
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let idx = (y * self.width + x) as usize;
        self.data[idx] = value;
    }

    pub fn area(&self) -> u64 {
        self.data.iter().filter(|&&p| p).count() as u64
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<u64> {
        self.check_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count() as u64)
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<u64> {
        self.check_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a || **b)
            .count() as u64)
    }

    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        let union = self.union_area(other)?;
        if union == 0 {
            return Ok(0.0);
        }
        Ok(self.intersection_area(other)? as f64 / union as f64)
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_dims(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a || *b)
            .collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    /// Tight pixel rectangle of the set pixels.
    pub fn bounding_rect(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != u32::MAX).then(|| {
            BBox::new(
                f64::from(x0),
                f64::from(y0),
                f64::from(x1 - x0),
                f64::from(y1 - y0),
            )
        })
    }

    /// Clears every pixel outside the pixel span of `rect`.
    pub fn clip_to(&mut self, rect: &BBox) {
        let (x0, y0, x1, y1) = rect.pixel_span(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if x < x0 || x >= x1 || y < y0 || y >= y1 {
                    self.set(x, y, false);
                }
            }
        }
    }

    pub fn encode(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &p in &self.data {
            if p == current {
                run += 1;
            } else {
                counts.push(run);
                current = p;
                run = 1;
            }
        }
        counts.push(run);
        RleMask {
            width: self.width,
            height: self.height,
            counts,
        }
    }
}

/// Uncompressed run-length mask as stored on disk and exchanged with the
/// segmentation provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn decode(&self) -> Result<BinaryMask> {
        let total = self.width as usize * self.height as usize;
        let mut data = Vec::with_capacity(total);
        let mut value = false;
        for &run in &self.counts {
            data.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        if data.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                found: data.len(),
            });
        }
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }
}
