use super::filter::RbfFilter;
use super::loss::{LossWeights, Problem};
use super::search::{extremal_area_search, AreaSearchConfig, SearchOutcome};
use super::train::{train_inr, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::soft_dice;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct IterationResult {
    pub iteration: usize,
    pub search: SearchOutcome,
    /// Soft Dice between this iteration's selected mask and the union of
    /// the previous ones (`None` for the first iteration).
    pub baseline_dice: Option<f64>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MultiOutcome {
    pub iterations: Vec<IterationResult>,
    /// Pairwise soft Dice between the selected masks.
    pub dice: Vec<Vec<f64>>,
}

/// Produces `count` explanations. The first is a standard run; each later
/// one retrains from scratch with an overlap penalty against the clamped
/// sum of all earlier selected masks.
pub fn multi_explain<T: Element>(
    problem: &Problem<'_, T>,
    count: usize,
    train: &TrainConfig,
    weights: &LossWeights,
    filter: &RbfFilter<T>,
    search: &AreaSearchConfig,
) -> Result<MultiOutcome> {
    if count == 0 {
        return Err(Error::invalid("at least one explanation is required"));
    }
    let [h, w] = problem.spatial_shape();
    let mut union: Option<Tensor<T>> = None;
    let mut iterations = Vec::with_capacity(count);
    for iteration in 0..count {
        let wrap = |e| Error::Iteration {
            iteration,
            source: Box::new(e),
        };
        let trained = train_inr(problem, train, weights, filter, union.as_ref()).map_err(wrap)?;
        let mut outcome = extremal_area_search(&trained.network, problem, search, filter).map_err(wrap)?;
        outcome.mask = outcome.mask.with_iteration(iteration);
        outcome.masks = outcome.masks.into_iter().map(|m| m.with_iteration(iteration)).collect();
        let selected: Tensor<T> = outcome.mask.values().cast();
        let baseline_dice = match &union {
            Some(b) => Some(soft_dice(&selected, b)?),
            None => None,
        };
        union = Some(match union {
            None => selected,
            Some(b) => {
                let data = b
                    .data()
                    .iter()
                    .zip(selected.data())
                    .map(|(&p, &q)| (p + q).min(T::one()))
                    .collect();
                Tensor::new([h, w], data)?
            }
        });
        iterations.push(IterationResult {
            iteration,
            search: outcome,
            baseline_dice,
            losses: trained.losses,
        });
    }
    let n = iterations.len();
    let mut dice = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = soft_dice(iterations[i].search.mask.values(), iterations[j].search.mask.values())?;
            dice[i][j] = d;
            dice[j][i] = d;
        }
    }
    Ok(MultiOutcome { iterations, dice })
}
