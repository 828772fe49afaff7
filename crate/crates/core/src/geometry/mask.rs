//! Boolean pixel masks.

use crate::error::{FloweError, Result};

/// An `H x W` boolean plane (validity, occlusion, loss masks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(FloweError::dim(
                "mask::from_vec",
                format!("{height}x{width} needs {} bits, got {}", height * width, data.len()),
            ));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize) -> bool {
        debug_assert!(y < self.height && x < self.width);
        self.data[y * self.width + x]
    }

    #[inline(always)]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        debug_assert!(y < self.height && x < self.width);
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of true pixels in [0, 1].
    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_true() as f64 / self.data.len() as f64
        }
    }

    /// Elementwise AND; dimensions must match.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(FloweError::dim(
                "mask::and",
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn not(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    /// 3x3 erosion: a pixel stays true only if it and all 8 neighbors are
    /// true; pixels on the image border always erode to false.
    pub fn erode3x3(&self) -> Mask {
        let mut out = Mask::filled(self.height, self.width, false);
        if self.height < 3 || self.width < 3 {
            return out;
        }
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                let mut all = true;
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if !self.get((y as i64 + dy) as usize, (x as i64 + dx) as usize) {
                            all = false;
                            break 'scan;
                        }
                    }
                }
                out.set(y, x, all);
            }
        }
        out
    }
}
