//! Differentiable classifiers under explanation and the perturbed-image pair.

mod blur;
mod cnn;
mod oracle;
pub mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::image_dims;
use crate::tensor::{Element, Tape, Tensor, Var};

pub use blur::{gaussian_blur, gaussian_blur_px, gaussian_kernel_1d};
pub use cnn::{accuracy, train_toy_cnn, CnnTrainConfig, ToyCnn};
pub use oracle::OracleClassifier;
pub use weights::{load_weights, save_weights, NamedTensor};

/// A differentiable image classifier `[c, h, w] -> probabilities`.
pub trait Classifier<T: Element> {
    fn num_classes(&self) -> usize;

    /// Records the forward pass on `tape` and returns the post-softmax
    /// probability vector.
    fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Var>;

    fn probabilities(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let p = self.forward(&mut tape, x)?;
        Ok(tape.value(p).to_f64_vec())
    }

    /// Gradient of the probability of `class` with respect to the image.
    fn input_gradient(&self, image: &Tensor<T>, class: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.param(image.clone());
        let p = self.forward(&mut tape, x)?;
        let target = tape.select(p, class)?;
        let mut grads = tape.backward(target)?;
        Ok(grads.take(x).unwrap_or_else(|| Tensor::zeros(image.shape().to_vec())))
    }

    fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        let p = self.probabilities(image)?;
        Ok(argmax(&p))
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// How the information-removed image `I′` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    /// Gaussian blur with σ as a fraction of the shorter image side.
    Blur { sigma_fraction: f64 },
    /// `I′ = 0`.
    FadeToBlack,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation::Blur { sigma_fraction: 0.05 }
    }
}

/// Original image `I` with its perturbed counterpart `I′`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T = f32> {
    original: Tensor<T>,
    perturbed: Tensor<T>,
}

impl<T: Element> ImagePair<T> {
    pub fn new(original: Tensor<T>, perturbed: Tensor<T>) -> Result<Self> {
        image_dims(&original)?;
        if original.shape() != perturbed.shape() {
            return Err(Error::ShapeMismatch {
                op: "image_pair",
                left: original.shape().to_vec(),
                right: perturbed.shape().to_vec(),
            });
        }
        let in_range = |t: &Tensor<T>| t.data().iter().all(|v| (0.0..=1.0).contains(&v.f64()));
        if !in_range(&original) || !in_range(&perturbed) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { original, perturbed })
    }

    pub fn from_image(original: Tensor<T>, perturbation: Perturbation) -> Result<Self> {
        let perturbed = match perturbation {
            Perturbation::Blur { sigma_fraction } => gaussian_blur(&original, sigma_fraction)?,
            Perturbation::FadeToBlack => Tensor::zeros(original.shape().to_vec()),
        };
        Self::new(original, perturbed)
    }

    pub fn original(&self) -> &Tensor<T> {
        &self.original
    }

    pub fn perturbed(&self) -> &Tensor<T> {
        &self.perturbed
    }

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        image_dims(&self.original).expect("validated at construction")
    }

    pub fn cast<U: Element>(&self) -> ImagePair<U> {
        ImagePair {
            original: self.original.cast(),
            perturbed: self.perturbed.cast(),
        }
    }
}
