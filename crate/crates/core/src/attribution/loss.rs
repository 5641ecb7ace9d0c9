use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, ImagePair};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Smoothing constant of the soft Dice overlap.
pub const DICE_EPSILON: f64 = 1e-6;

/// Weights of the area regularizer and the overlap penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 1.0,
            lambda_d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r >= 0.0 && self.lambda_d >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// What is being explained: a classifier, an image pair and the class whose
/// probability the mask has to preserve.
pub struct Problem<'a, T: Element> {
    pub pair: &'a ImagePair<T>,
    pub classifier: &'a dyn Classifier<T>,
    pub class: usize,
}

impl<'a, T: Element> Problem<'a, T> {
    pub fn new(pair: &'a ImagePair<T>, classifier: &'a dyn Classifier<T>, class: usize) -> Result<Self> {
        if class >= classifier.num_classes() {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                classifier.num_classes()
            )));
        }
        Ok(Self { pair, classifier, class })
    }

    /// Targets the class the classifier predicts for the original image.
    pub fn predicted(pair: &'a ImagePair<T>, classifier: &'a dyn Classifier<T>) -> Result<Self> {
        let class = classifier.predict(pair.original())?;
        Ok(Self { pair, classifier, class })
    }

    pub fn spatial_shape(&self) -> [usize; 2] {
        let (_, h, w) = self.pair.dims();
        [h, w]
    }

    /// Class probability of an image (untracked).
    pub fn phi(&self, image: &Tensor<T>) -> Result<f64> {
        Ok(self.classifier.probabilities(image)?[self.class])
    }

    /// Class probability of the original image.
    pub fn phi_original(&self) -> Result<f64> {
        self.phi(self.pair.original())
    }

    /// Class probability after blending with `mask` (untracked).
    pub fn phi_masked(&self, mask: &Tensor<T>) -> Result<f64> {
        self.phi(&compose(mask, self.pair)?)
    }

    /// Records `Φ(image)` on `tape`.
    pub fn phi_var(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let p = self.classifier.forward(tape, image)?;
        tape.select(p, self.class)
    }
}

fn check_mask_shape(op: &'static str, mask: &[usize], pair: &ImagePair<impl Element>) -> Result<()> {
    let (c, h, w) = pair.dims();
    if mask != [h, w] {
        return Err(Error::ShapeMismatch {
            op,
            left: mask.to_vec(),
            right: vec![c, h, w],
        });
    }
    Ok(())
}

/// `Î = M ⊗ I + (1 − M) ⊗ I′`, with the `[h, w]` mask broadcast across
/// channels. Written as `I′ + M ⊗ (I − I′)`.
pub fn compose_perturbed<T: Element>(tape: &mut Tape<T>, mask: Var, pair: &ImagePair<T>) -> Result<Var> {
    check_mask_shape("compose_perturbed", tape.value(mask).shape(), pair)?;
    let (c, _, _) = pair.dims();
    let delta: Vec<T> = pair
        .original()
        .data()
        .iter()
        .zip(pair.perturbed().data())
        .map(|(&i, &p)| i - p)
        .collect();
    let delta = tape.constant(Tensor::new(pair.original().shape().to_vec(), delta)?);
    let base = tape.constant(pair.perturbed().clone());
    let m = tape.broadcast_channels(mask, c)?;
    let kept = tape.mul(m, delta)?;
    tape.add(kept, base)
}

/// Untracked [`compose_perturbed`], evaluated in the direct form.
pub fn compose<T: Element>(mask: &Tensor<T>, pair: &ImagePair<T>) -> Result<Tensor<T>> {
    check_mask_shape("compose_perturbed", mask.shape(), pair)?;
    let plane = mask.len();
    let data = pair
        .original()
        .data()
        .iter()
        .zip(pair.perturbed().data())
        .enumerate()
        .map(|(k, (&i, &p))| {
            let m = mask.data()[k % plane];
            m * i + (T::one() - m) * p
        })
        .collect();
    Tensor::new(pair.original().shape().to_vec(), data)
}

/// Number of leading zeros in the reference vector: `floor((1 − a)·n)`.
pub fn reference_zeros(n: usize, area: f64) -> usize {
    (((1.0 - area) * n as f64).floor().max(0.0) as usize).min(n)
}

/// Ascending reference vector with `floor((1 − a)·n)` zeros followed by ones.
pub fn reference_vector<T: Element>(n: usize, area: f64) -> Vec<T> {
    let zeros = reference_zeros(n, area);
    (0..n).map(|i| if i < zeros { T::zero() } else { T::one() }).collect()
}

/// Area regularizer: mean squared distance between the sorted mask values
/// and the reference vector for raw area `area`.
pub fn area_regularizer<T: Element>(tape: &mut Tape<T>, mask: Var, area: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&area) {
        return Err(Error::invalid(format!("area {area} outside [0, 1]")));
    }
    let flat = tape.flatten(mask)?;
    let n = tape.value(flat).len();
    let (sorted, _) = tape.vecsort(flat, true)?;
    let reference = tape.constant(Tensor::from_vec(reference_vector(n, area)));
    let diff = tape.sub(sorted, reference)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Soft Dice overlap `(2Σ ab + ε) / (Σ a + Σ b + ε)` on `tape`.
pub fn dice_penalty<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let eps = T::of(DICE_EPSILON);
    let prod = tape.mul(a, b)?;
    let inter = tape.sum(prod)?;
    let num = tape.mul_scalar(inter, T::of(2.0))?;
    let num = tape.add_scalar(num, eps)?;
    let sa = tape.sum(a)?;
    let sb = tape.sum(b)?;
    let den = tape.add(sa, sb)?;
    let den = tape.add_scalar(den, eps)?;
    tape.div(num, den)
}

/// Handles to the individual loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub phi: Var,
    pub area: Var,
    pub dice: Option<Var>,
}

/// `−Φ(Î) + λ_r R_a(M_reg) [+ λ_d Dice(M, M^b)]`.
///
/// `mask` is the mask the classifier sees; `regularized` is the mask the
/// area term is computed on (usually the same variable).
pub fn loss_extremal<T: Element>(
    tape: &mut Tape<T>,
    problem: &Problem<'_, T>,
    mask: Var,
    regularized: Var,
    area: f64,
    weights: &LossWeights,
    baseline: Option<&Tensor<T>>,
) -> Result<LossTerms> {
    let composed = compose_perturbed(tape, mask, problem.pair)?;
    let phi = problem.phi_var(tape, composed)?;
    let reg = area_regularizer(tape, regularized, area)?;
    let neg_phi = tape.mul_scalar(phi, -T::one())?;
    let scaled_reg = tape.mul_scalar(reg, T::of(weights.lambda_r))?;
    let mut total = tape.add(neg_phi, scaled_reg)?;
    let mut dice = None;
    if let Some(b) = baseline {
        if b.shape() != tape.value(mask).shape() {
            return Err(Error::ShapeMismatch {
                op: "dice_penalty",
                left: tape.value(mask).shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let b = tape.constant(b.clone());
        let d = dice_penalty(tape, mask, b)?;
        let scaled = tape.mul_scalar(d, T::of(weights.lambda_d))?;
        total = tape.add(total, scaled)?;
        dice = Some(d);
    }
    Ok(LossTerms {
        total,
        phi,
        area: reg,
        dice,
    })
}
