use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Element, Padding, Tape, Tensor, Var};

/// Normalized radial-basis smoothing kernel for `[h, w]` masks.
///
/// The half-width is `ceil(radius_fraction × min(h, w))` pixels and the
/// Gaussian width is half of that, so the kernel falls to `e^-2` at its
/// border. Borders are reflect-padded; the output is a convex combination
/// of input values and therefore stays in the input's range.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfFilter<T = f32> {
    radius_fraction: f64,
    radius: usize,
    shape: [usize; 2],
    kernel: Tensor<T>,
}

/// Serializable description of a filter, independent of image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub radius_fraction: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { radius_fraction: 0.05 }
    }
}

impl FilterSpec {
    pub fn build<T: Element>(&self, height: usize, width: usize) -> Result<RbfFilter<T>> {
        RbfFilter::new(self.radius_fraction, height, width)
    }
}

impl<T: Element> RbfFilter<T> {
    pub fn new(radius_fraction: f64, height: usize, width: usize) -> Result<Self> {
        if !(radius_fraction > 0.0 && radius_fraction.is_finite()) {
            return Err(Error::invalid(format!(
                "filter radius fraction must be positive, got {radius_fraction}"
            )));
        }
        let side = height.min(width);
        let radius = (radius_fraction * side as f64).ceil() as usize;
        let k = 2 * radius + 1;
        if k > side {
            return Err(Error::invalid(format!(
                "filter kernel of {k} pixels is larger than the {height}x{width} image"
            )));
        }
        let weights = Self::weights(radius);
        Ok(Self {
            radius_fraction,
            radius,
            shape: [height, width],
            kernel: Tensor::new([1, 1, k, k], weights.into_iter().map(T::of).collect())?,
        })
    }

    fn weights(radius: usize) -> Vec<f64> {
        let sigma = (radius as f64 / 2.0).max(0.5);
        let r = radius as isize;
        let raw: Vec<f64> = (-r..=r)
            .flat_map(|y| (-r..=r).map(move |x| (y, x)))
            .map(|(y, x)| (-((y * y + x * x) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    pub fn radius_fraction(&self) -> f64 {
        self.radius_fraction
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    /// `[1, 1, k, k]` kernel weights.
    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    pub fn center_weight(&self) -> T {
        let k = 2 * self.radius + 1;
        self.kernel.data()[self.radius * k + self.radius]
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != self.shape {
            return Err(Error::ShapeMismatch {
                op: "rbf_smooth",
                left: shape.to_vec(),
                right: self.shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Differentiable smoothing of an `[h, w]` mask recorded on `tape`.
    pub fn apply_var(&self, tape: &mut Tape<T>, mask: Var) -> Result<Var> {
        self.check(tape.value(mask).shape())?;
        let [h, w] = self.shape;
        let x = tape.reshape(mask, [1, h, w])?;
        let k = tape.constant(self.kernel.clone());
        let y = tape.conv2d(x, k, Padding::Reflect)?;
        tape.reshape(y, [h, w])
    }

    /// Untracked smoothing.
    pub fn apply(&self, mask: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(mask.shape())?;
        let [h, w] = self.shape;
        let x = mask.clone().reshape([1, h, w])?;
        conv2d(&x, &self.kernel, Padding::Reflect)?.reshape([h, w])
    }
}
