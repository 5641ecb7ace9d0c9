use super::{Classifier, ImagePair};
use crate::error::{Error, Result};
use crate::image::{image_dims, BinaryMap};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Two-class test double whose ground truth is known exactly.
///
/// The class-1 logit is `β · (s − θ)` where `s` is the mean intensity (over
/// channels and pixels) inside the target region; class 0 gets the negated
/// logit. With several regions, `s` is a softmax-weighted maximum of the
/// per-region means (each multiplied by its own gain), so evidence from any
/// one region suffices.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleClassifier {
    regions: Vec<BinaryMap>,
    gains: Vec<f64>,
    beta: f64,
    theta: f64,
    sharpness: f64,
}

impl OracleClassifier {
    pub const TARGET_CLASS: usize = 1;

    pub fn new(regions: Vec<BinaryMap>, beta: f64, theta: f64) -> Result<Self> {
        if regions.is_empty() || regions.iter().any(BinaryMap::is_empty) {
            return Err(Error::invalid("oracle classifier needs nonempty regions"));
        }
        if regions.iter().any(|r| r.shape() != regions[0].shape()) {
            return Err(Error::invalid("oracle regions must share one shape"));
        }
        if !(beta.is_finite() && theta.is_finite()) {
            return Err(Error::invalid("oracle beta and theta must be finite"));
        }
        Ok(Self {
            gains: vec![1.0; regions.len()],
            regions,
            beta,
            theta,
            sharpness: 25.0,
        })
    }

    /// Scales every region mean to 1 on the original image, places `θ`
    /// halfway between the score of the original and the perturbed image and
    /// picks `β` so that the original is classified with probability
    /// `confidence`. Any single region then carries the same evidence.
    pub fn calibrated<T: Element>(regions: Vec<BinaryMap>, pair: &ImagePair<T>, confidence: f64) -> Result<Self> {
        if !(0.5 < confidence && confidence < 1.0) {
            return Err(Error::invalid("calibration confidence must lie in (0.5, 1)"));
        }
        let mut probe = Self::new(regions, 1.0, 0.0)?;
        let means = probe.region_means(pair.original())?;
        if means.iter().any(|&m| m < 1e-6) {
            return Err(Error::invalid("a region is black in the original image; cannot calibrate"));
        }
        probe.gains = means.iter().map(|&m| 1.0 / m).collect();
        let hi = probe.region_score(pair.original())?;
        let lo = probe.region_score(pair.perturbed())?;
        if hi - lo < 1e-6 {
            return Err(Error::invalid(
                "perturbation does not change the region intensity; cannot calibrate",
            ));
        }
        let theta = 0.5 * (hi + lo);
        let logit = (confidence / (1.0 - confidence)).ln();
        // class probability is sigmoid(2 * logit) for the ±logit pair
        Ok(Self {
            beta: logit / (2.0 * (hi - theta)),
            theta,
            ..probe
        })
    }

    pub fn with_sharpness(mut self, sharpness: f64) -> Self {
        self.sharpness = sharpness;
        self
    }

    pub fn regions(&self) -> &[BinaryMap] {
        &self.regions
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Union of all regions: the support of the input gradient.
    pub fn support(&self) -> BinaryMap {
        self.regions[1..]
            .iter()
            .fold(self.regions[0].clone(), |acc, r| acc.union(r).expect("same shape"))
    }

    fn region_weights<T: Element>(&self, region: &BinaryMap, channels: usize, gain: f64) -> Tensor<T> {
        let w = T::of(gain / (channels * region.count()) as f64);
        let plane: Vec<T> = region.data().iter().map(|&b| if b { w } else { T::zero() }).collect();
        let mut data = Vec::with_capacity(channels * plane.len());
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Tensor::new([channels, region.height(), region.width()], data).expect("consistent shape")
    }

    fn score_var<T: Element>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let (c, h, w) = image_dims(tape.value(image))?;
        if [h, w] != self.regions[0].shape() {
            return Err(Error::ShapeMismatch {
                op: "oracle_forward",
                left: vec![c, h, w],
                right: self.regions[0].shape().to_vec(),
            });
        }
        let mut means = Vec::with_capacity(self.regions.len());
        for (region, &gain) in self.regions.iter().zip(&self.gains) {
            let weights = tape.constant(self.region_weights(region, c, gain));
            let weighted = tape.mul(image, weights)?;
            means.push(tape.sum(weighted)?);
        }
        if means.len() == 1 {
            return Ok(means[0]);
        }
        let stacked = tape.concat(&means)?;
        let scaled = tape.mul_scalar(stacked, T::of(self.sharpness))?;
        let attention = tape.softmax(scaled)?;
        let weighted = tape.mul(attention, stacked)?;
        tape.sum(weighted)
    }

    /// Gain-scaled mean intensity of each region (untracked).
    pub fn region_means<T: Element>(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let (c, h, w) = image_dims(image)?;
        if [h, w] != self.regions[0].shape() {
            return Err(Error::ShapeMismatch {
                op: "oracle_forward",
                left: vec![c, h, w],
                right: self.regions[0].shape().to_vec(),
            });
        }
        let plane = h * w;
        Ok(self
            .regions
            .iter()
            .zip(&self.gains)
            .map(|(region, gain)| {
                let total: f64 = (0..c)
                    .flat_map(|ch| region.data().iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| ch * plane + i))
                    .map(|k| image.data()[k].f64())
                    .sum();
                gain * total / (c * region.count()) as f64
            })
            .collect())
    }

    /// Region intensity `s` of an image (untracked).
    pub fn region_score<T: Element>(&self, image: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let s = self.score_var(&mut tape, x)?;
        Ok(tape.value(s).item()?.f64())
    }
}

impl<T: Element> Classifier<T> for OracleClassifier {
    fn num_classes(&self) -> usize {
        2
    }

    fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let s = self.score_var(tape, image)?;
        let shifted = tape.add_scalar(s, T::of(-self.theta))?;
        let logit = tape.mul_scalar(shifted, T::of(self.beta))?;
        let negated = tape.mul_scalar(logit, -T::one())?;
        let logits = tape.concat(&[negated, logit])?;
        tape.softmax(logits)
    }
}
