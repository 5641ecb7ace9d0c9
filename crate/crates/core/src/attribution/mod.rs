//! Mask optimization: loss terms, mask smoothing, network training, the
//! smallest-sufficient-area search, a direct-parameterization baseline and
//! iterative multi-explanation.

mod baseline;
mod filter;
mod loss;
mod mask;
mod multi;
mod search;
mod train;

pub use baseline::{baseline_extremal, BaselineConfig};
pub use filter::{FilterSpec, RbfFilter};
pub use loss::{
    area_regularizer, compose, compose_perturbed, dice_penalty, loss_extremal, reference_vector, reference_zeros,
    LossTerms, LossWeights, Problem, DICE_EPSILON,
};
pub use mask::{AttributionMask, MaskRecord, PhiValues, Provenance};
pub use multi::{multi_explain, IterationResult, MultiOutcome};
pub use search::{extremal_area_search, select_smallest_sufficient, AreaEvaluation, AreaSearchConfig, SearchOutcome, Threshold};
pub use train::{extract_mask, train_inr, DivergencePolicy, RegularizeOn, TrainConfig, TrainedInr};
