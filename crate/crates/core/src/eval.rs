//! Precision, hit rate, soft Dice, saliency thresholding and per-image
//! aggregation over seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attribution::DICE_EPSILON;
use crate::error::{Error, Result};
use crate::image::BinaryMap;
use crate::tensor::{Element, Tensor};

/// Default binarization threshold for soft masks.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentationSource {
    Semantic,
    BoundingBox,
}

/// Ground-truth region `S` an attribution is scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSegmentation {
    pub map: BinaryMap,
    pub source: SegmentationSource,
}

impl ReferenceSegmentation {
    pub fn new(map: BinaryMap, source: SegmentationSource) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::invalid("reference segmentation has empty support"));
        }
        Ok(Self { map, source })
    }
}

/// Precision together with a flag for masks that binarize to nothing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionScore {
    pub value: f64,
    pub empty_mask: bool,
}

/// `|M ∩ S| / |M|` after binarizing `M` with `value > threshold`.
/// An empty binarized mask scores 0 and is flagged.
pub fn precision<T: Element>(mask: &Tensor<T>, seg: &BinaryMap, threshold: f64) -> Result<PrecisionScore> {
    let m = BinaryMap::from_values(mask, threshold)?;
    binary_precision(&m, seg)
}

pub fn binary_precision(mask: &BinaryMap, seg: &BinaryMap) -> Result<PrecisionScore> {
    let inter = mask.intersection_count(seg)?;
    let size = mask.count();
    Ok(if size == 0 {
        PrecisionScore {
            value: 0.0,
            empty_mask: true,
        }
    } else {
        PrecisionScore {
            value: inter as f64 / size as f64,
            empty_mask: false,
        }
    })
}

/// Weighted precision `Σ m·s / Σ m` on the soft mask.
pub fn soft_precision<T: Element>(mask: &Tensor<T>, seg: &BinaryMap) -> Result<PrecisionScore> {
    if mask.shape() != seg.shape() {
        return Err(Error::ShapeMismatch {
            op: "precision",
            left: mask.shape().to_vec(),
            right: seg.shape().to_vec(),
        });
    }
    let total = mask.sum_f64();
    let inside: f64 = mask
        .data()
        .iter()
        .zip(seg.data())
        .filter(|(_, &s)| s)
        .map(|(v, _)| v.f64())
        .sum();
    Ok(if total <= 0.0 {
        PrecisionScore {
            value: 0.0,
            empty_mask: true,
        }
    } else {
        PrecisionScore {
            value: inside / total,
            empty_mask: false,
        }
    })
}

/// Strict: exactly 0.5 is not a hit.
pub fn is_hit(precision: f64) -> bool {
    precision > 0.5
}

/// Fraction of precisions strictly above 0.5.
pub fn hit_rate(precisions: &[f64]) -> Result<f64> {
    if precisions.is_empty() {
        return Err(Error::Empty { op: "hit_rate" });
    }
    Ok(precisions.iter().filter(|&&p| is_hit(p)).count() as f64 / precisions.len() as f64)
}

/// `(2Σ ab + ε) / (Σ a + Σ b + ε)`.
pub fn soft_dice<T: Element, U: Element>(a: &Tensor<T>, b: &Tensor<U>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_dice",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let inter: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x.f64() * y.f64()).sum();
    Ok((2.0 * inter + DICE_EPSILON) / (a.sum_f64() + b.sum_f64() + DICE_EPSILON))
}

/// Result of [`threshold_saliency`].
#[derive(Clone, Debug, PartialEq)]
pub struct Thresholded {
    pub mask: BinaryMap,
    /// Values were min-max rescaled before thresholding.
    pub rescaled: bool,
    /// The map was constant; no meaningful ranking exists.
    pub constant: bool,
}

/// Binarizes a saliency map with `value > cutoff`. Maps with values outside
/// `[0, 1]` are min-max rescaled first. A constant map is flagged; in range
/// it is thresholded as is, out of range it yields all zeros.
pub fn threshold_saliency<T: Element>(map: &Tensor<T>, cutoff: f64) -> Result<Thresholded> {
    if !(0.0 < cutoff && cutoff < 1.0) {
        return Err(Error::invalid(format!("cutoff {cutoff} outside (0, 1)")));
    }
    let &[h, w] = map.shape() else {
        return Err(Error::InvalidShape {
            op: "threshold_saliency",
            shape: map.shape().to_vec(),
            reason: "expected [h, w]".into(),
        });
    };
    let (lo, hi) = map.min_max().ok_or(Error::Empty { op: "threshold_saliency" })?;
    let (lo, hi) = (lo.f64(), hi.f64());
    let constant = lo == hi;
    let in_range = lo >= 0.0 && hi <= 1.0;
    let values: Vec<bool> = if in_range {
        map.data().iter().map(|v| v.f64() > cutoff).collect()
    } else if constant {
        vec![false; h * w]
    } else {
        map.data().iter().map(|v| (v.f64() - lo) / (hi - lo) > cutoff).collect()
    };
    Ok(Thresholded {
        mask: BinaryMap::new(h, w, values)?,
        rescaled: !in_range && !constant,
        constant,
    })
}

/// Per-image evaluation over seeds (and optionally over iterations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub method: String,
    pub seeds: Vec<u64>,
    /// Precision of the first iteration's mask, one per seed.
    pub precisions: Vec<f64>,
    pub mean_precision: f64,
    pub hit_rate: f64,
    /// `[seed][iteration]` precisions.
    pub iteration_precisions: Vec<Vec<f64>>,
    /// Mean over seeds of the best iteration's precision.
    pub max_precision: f64,
}

impl EvalRecord {
    /// Hit flag per seed.
    pub fn hits(&self) -> Vec<bool> {
        self.precisions.iter().map(|&p| is_hit(p)).collect()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Builds an [`EvalRecord`] from `masks[seed][iteration]`, binarizing each
/// mask at `threshold`.
pub fn aggregate_seeds<T: Element>(
    image_id: &str,
    method: &str,
    seeds: &[u64],
    masks: &[Vec<Tensor<T>>],
    seg: &BinaryMap,
    threshold: f64,
) -> Result<EvalRecord> {
    if masks.is_empty() || masks.iter().any(Vec::is_empty) {
        return Err(Error::Empty { op: "aggregate_seeds" });
    }
    if seeds.len() != masks.len() {
        return Err(Error::invalid(format!(
            "{} seeds for {} mask sets",
            seeds.len(),
            masks.len()
        )));
    }
    let iteration_precisions = masks
        .iter()
        .map(|per_seed| {
            per_seed
                .iter()
                .map(|m| precision(m, seg, threshold).map(|p| p.value))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(record_from_precisions(image_id, method, seeds, iteration_precisions))
}

/// Builds an [`EvalRecord`] from already computed `[seed][iteration]`
/// precisions (each inner list nonempty).
pub fn record_from_precisions(
    image_id: &str,
    method: &str,
    seeds: &[u64],
    iteration_precisions: Vec<Vec<f64>>,
) -> EvalRecord {
    let precisions: Vec<f64> = iteration_precisions.iter().map(|p| p[0]).collect();
    let best: Vec<f64> = iteration_precisions
        .iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    EvalRecord {
        image_id: image_id.to_string(),
        method: method.to_string(),
        seeds: seeds.to_vec(),
        mean_precision: mean(&precisions),
        hit_rate: precisions.iter().filter(|&&p| is_hit(p)).count() as f64 / precisions.len() as f64,
        precisions,
        iteration_precisions,
        max_precision: mean(&best),
    }
}

/// Writes one JSON object per line.
pub fn write_json_lines<W: Write, S: Serialize>(mut out: W, records: &[S]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<json lines>", e))?;
    }
    Ok(())
}
