//! Binary region maps and small helpers for channels-first images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Axis-aligned half-open box `[x0, x1) × [y0, y1)` in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Row-major `h × w` map of booleans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "binary_map",
                shape: vec![height, width],
                reason: format!("data length {}", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_box(height: usize, width: usize, b: BoundingBox) -> Self {
        let mut map = Self::empty(height, width);
        for y in b.y0..b.y1.min(height) {
            for x in b.x0..b.x1.min(width) {
                map.data[y * width + x] = true;
            }
        }
        map
    }

    /// Pixels strictly greater than `threshold`.
    pub fn from_values<T: Element>(values: &Tensor<T>, threshold: f64) -> Result<Self> {
        let &[h, w] = values.shape() else {
            return Err(Error::InvalidShape {
                op: "binary_map",
                shape: values.shape().to_vec(),
                reason: "expected [h, w]".into(),
            });
        };
        Ok(Self {
            height: h,
            width: w,
            data: values.data().iter().map(|v| v.f64() > threshold).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            })
        }
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize> {
        self.check_same(other, "intersection")?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "union")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Smallest box containing every set pixel.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bb: Option<BoundingBox> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, b)| **b) {
            let (y, x) = (i / self.width, i % self.width);
            bb = Some(match bb {
                None => BoundingBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
                Some(b) => BoundingBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x + 1),
                    y1: b.y1.max(y + 1),
                },
            });
        }
        bb
    }

    /// 0/1 values as a `[h, w]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::new([self.height, self.width], data).expect("consistent shape")
    }
}

/// Intersection over union of two binary maps. Two empty maps give 1.
pub fn iou(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `[c, h, w]` extents of a channels-first image tensor.
pub fn image_dims<T: Element>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op: "image",
            shape: image.shape().to_vec(),
            reason: "expected [c, h, w]".into(),
        }),
    }
}
