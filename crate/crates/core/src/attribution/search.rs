use serde::{Deserialize, Serialize};

use super::filter::RbfFilter;
use super::loss::Problem;
use super::mask::AttributionMask;
use super::train::extract_mask;
use crate::error::{Error, Result};
use crate::inr::{AreaRange, CoordinateGrid, ImplicitMaskNetwork};
use crate::tensor::Element;

/// Probability the masked image must retain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// `Φ₀ = τ · Φ(I)`.
    Relative(f64),
    /// `Φ₀` as given.
    Absolute(f64),
}

impl Threshold {
    pub fn resolve(&self, phi_original: f64) -> f64 {
        match *self {
            Threshold::Relative(tau) => tau * phi_original,
            Threshold::Absolute(phi0) => phi0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaSearchConfig {
    pub grid: Vec<f64>,
    pub threshold: Threshold,
}

impl Default for AreaSearchConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.025, 0.05, 0.1, 0.2],
            threshold: Threshold::Relative(0.9),
        }
    }
}

impl AreaSearchConfig {
    pub fn validate(&self, range: &AreaRange) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::invalid("area grid is empty"));
        }
        if self.grid.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::invalid("area grid must be strictly increasing"));
        }
        if let Some(a) = self.grid.iter().find(|&&a| !range.contains(a)) {
            return Err(Error::invalid(format!(
                "grid area {a} outside [{}, {}]",
                range.min, range.max
            )));
        }
        let t = match self.threshold {
            Threshold::Relative(t) | Threshold::Absolute(t) => t,
        };
        if !t.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(())
    }
}

/// Class probability and mask area at one grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaEvaluation {
    pub area: f64,
    pub phi: f64,
    pub measured_area: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Selected area `a*`.
    pub area: f64,
    pub mask: AttributionMask,
    /// No grid area reached `Φ₀`; `mask` is the largest-area mask.
    pub insufficient: bool,
    pub phi_original: f64,
    pub phi0: f64,
    /// Class probability of the selected composition.
    pub phi: f64,
    /// One row per grid area, in grid order.
    pub table: Vec<AreaEvaluation>,
    /// Masks for every grid area, in grid order.
    pub masks: Vec<AttributionMask>,
}

/// Picks the smallest-area mask whose composition keeps `Φ ≥ Φ₀`.
///
/// `masks` must be ordered by increasing area.
pub fn select_smallest_sufficient<T: Element>(
    problem: &Problem<'_, T>,
    masks: Vec<AttributionMask>,
    threshold: Threshold,
) -> Result<SearchOutcome> {
    if masks.is_empty() {
        return Err(Error::Empty { op: "area_search" });
    }
    let phi_original = problem.phi_original()?;
    let phi0 = threshold.resolve(phi_original);
    let mut table = Vec::with_capacity(masks.len());
    for m in &masks {
        let phi = problem.phi_masked(&m.values().cast())?;
        table.push(AreaEvaluation {
            area: m.area(),
            phi,
            measured_area: m.measured_area(),
        });
    }
    let (index, insufficient) = match table.iter().position(|row| row.phi >= phi0) {
        Some(i) => (i, false),
        None => (masks.len() - 1, true),
    };
    Ok(SearchOutcome {
        area: table[index].area,
        mask: masks[index].clone(),
        insufficient,
        phi_original,
        phi0,
        phi: table[index].phi,
        table,
        masks,
    })
}

/// Extracts the mask at every grid area and selects `a*`.
pub fn extremal_area_search<T: Element>(
    net: &ImplicitMaskNetwork<T>,
    problem: &Problem<'_, T>,
    search: &AreaSearchConfig,
    filter: &RbfFilter<T>,
) -> Result<SearchOutcome> {
    search.validate(&net.config().area_range)?;
    let [h, w] = problem.spatial_shape();
    let grid = CoordinateGrid::new(h, w)?;
    let masks = search
        .grid
        .iter()
        .map(|&a| extract_mask(net, &grid, a, filter))
        .collect::<Result<Vec<_>>>()?;
    select_smallest_sufficient(problem, masks, search.threshold)
}
