use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filter::RbfFilter;
use super::loss::{loss_extremal, LossWeights, Problem};
use super::mask::{AttributionMask, Provenance};
use crate::error::{Error, Result};
use crate::inr::{CoordinateGrid, ImplicitMaskNetwork, InrConfig};
use crate::optim::Adam;
use crate::tensor::{Element, Tape, Tensor};

/// What to do when the loss or a gradient stops being finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergencePolicy {
    /// Stop and report the epoch.
    Abort,
    /// Restart from scratch with a derived seed, at most `attempts` times.
    Reseed { attempts: usize },
}

/// Which mask the area regularizer sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizeOn {
    /// The smoothed mask, i.e. what the classifier sees.
    Filtered,
    /// The raw network output.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub divergence: DivergencePolicy,
    pub regularize_on: RegularizeOn,
    /// Epochs over which `λ_r` ramps linearly up from zero (0 disables).
    pub lambda_r_warmup: usize,
    pub network: InrConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            learning_rate: 1e-4,
            seed: 0,
            divergence: DivergencePolicy::Abort,
            regularize_on: RegularizeOn::Filtered,
            lambda_r_warmup: 0,
            network: InrConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.network.validate()
    }
}

/// A trained network with its per-epoch loss curve.
#[derive(Clone, Debug)]
pub struct TrainedInr<T: Element = f32> {
    pub network: ImplicitMaskNetwork<T>,
    pub losses: Vec<f64>,
    /// Seed actually used (differs from the configured one after a reseed).
    pub seed: u64,
    pub attempts: usize,
}

fn derived_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        seed
    } else {
        seed.wrapping_add((attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Optimizes an area-conditioned mask network.
///
/// Every epoch uses the whole coordinate grid with one scaled area drawn
/// uniformly from `[0, 1]`, followed by one Adam step. With `baseline`
/// present the soft Dice overlap with it is added to the loss.
pub fn train_inr<T: Element>(
    problem: &Problem<'_, T>,
    config: &TrainConfig,
    weights: &LossWeights,
    filter: &RbfFilter<T>,
    baseline: Option<&Tensor<T>>,
) -> Result<TrainedInr<T>> {
    config.validate()?;
    weights.validate()?;
    let attempts = match config.divergence {
        DivergencePolicy::Abort => 1,
        DivergencePolicy::Reseed { attempts } => attempts.max(1),
    };
    let mut last = Error::Diverged { epoch: 0 };
    for attempt in 0..attempts {
        let seed = derived_seed(config.seed, attempt);
        match train_once(problem, config, weights, filter, baseline, seed) {
            Ok((network, losses)) => {
                return Ok(TrainedInr {
                    network,
                    losses,
                    seed,
                    attempts: attempt + 1,
                })
            }
            Err(e @ Error::Diverged { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

fn train_once<T: Element>(
    problem: &Problem<'_, T>,
    config: &TrainConfig,
    weights: &LossWeights,
    filter: &RbfFilter<T>,
    baseline: Option<&Tensor<T>>,
    seed: u64,
) -> Result<(ImplicitMaskNetwork<T>, Vec<f64>)> {
    let [h, w] = problem.spatial_shape();
    let grid = CoordinateGrid::new(h, w)?;
    let mut net = ImplicitMaskNetwork::<T>::init(&config.network, seed)?;
    let encoded = net.encoder().prepare(&grid);
    let range = config.network.area_range;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut adam = Adam::<T>::new(config.learning_rate);
    let mut tape = Tape::<T>::new();
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let scaled: f64 = rng.random();
        let area = range.from_scaled(scaled)?;
        let weights = warmed_up(weights, epoch, config.lambda_r_warmup);
        tape.reset();
        let step = (|| {
            let features = tape.constant(encoded.features(area.scaled)?);
            let bound = net.bind(&mut tape, true);
            let raw = net.forward(&mut tape, &bound, features, &grid)?;
            let filtered = filter.apply_var(&mut tape, raw)?;
            let reg = match config.regularize_on {
                RegularizeOn::Filtered => filtered,
                RegularizeOn::Raw => raw,
            };
            let terms = loss_extremal(&mut tape, problem, filtered, reg, area.raw, &weights, baseline)?;
            let loss = tape.value(terms.total).item()?.f64();
            let mut grads = tape.backward(terms.total)?;
            let grads: Vec<Tensor<T>> = bound
                .iter()
                .zip(net.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            Ok::<_, Error>((loss, grads))
        })();
        let (loss, grads) = match step {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { epoch });
        }
        adam.step(net.params_mut(), &grads)?;
        losses.push(loss);
    }
    Ok((net, losses))
}

pub(crate) fn warmed_up(weights: &LossWeights, epoch: usize, warmup: usize) -> LossWeights {
    if epoch >= warmup {
        return *weights;
    }
    LossWeights {
        lambda_r: weights.lambda_r * (epoch + 1) as f64 / (warmup + 1) as f64,
        ..*weights
    }
}

/// Smoothed mask of a trained network at raw area `area`.
pub fn extract_mask<T: Element>(
    net: &ImplicitMaskNetwork<T>,
    grid: &CoordinateGrid,
    area: f64,
    filter: &RbfFilter<T>,
) -> Result<AttributionMask> {
    let param = net.config().area_range.parameter(area)?;
    let raw = net.raw_mask(grid, param)?;
    let smooth = filter.apply(&raw)?.map(|v| v.max(T::zero()).min(T::one()));
    AttributionMask::new(
        &smooth,
        area,
        Provenance {
            method: "inr".into(),
            seed: net.seed(),
            iteration: 0,
        },
    )
}
