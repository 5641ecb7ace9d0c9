use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::filter::RbfFilter;
use super::loss::{loss_extremal, LossWeights, Problem};
use super::mask::{AttributionMask, Provenance};
use super::train::{warmed_up, DivergencePolicy};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{Element, Tape, Tensor};

/// Settings of the direct-parameterization reference method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Parameter grid side is `ceil(side / downsample)`.
    pub downsample: usize,
    /// Epochs over which `λ_r` ramps linearly up from zero (0 disables).
    pub lambda_r_warmup: usize,
    pub divergence: DivergencePolicy,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            learning_rate: 0.01,
            seed: 0,
            downsample: 8,
            lambda_r_warmup: 0,
            divergence: DivergencePolicy::Abort,
        }
    }
}

/// `[n, l]` matrix interpolating `l` samples linearly onto `n` points,
/// with the end samples aligned.
fn interpolation_matrix<T: Element>(n: usize, l: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * l];
    for i in 0..n {
        let t = if n == 1 { 0.0 } else { i as f64 * (l - 1) as f64 / (n - 1) as f64 };
        let j = (t.floor() as usize).min(l.saturating_sub(2));
        let frac = t - j as f64;
        if l == 1 {
            data[i] = T::one();
        } else {
            data[i * l + j] = T::of(1.0 - frac);
            data[i * l + j + 1] = T::of(frac);
        }
    }
    Tensor::new([n, l], data).expect("consistent shape")
}

fn transpose<T: Element>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new([c, r], data).expect("consistent shape")
}

/// Optimizes one mask for one raw area directly: a low-resolution grid of
/// logits is squashed by a sigmoid, upsampled bilinearly and smoothed by
/// `filter`, then trained on the same loss as the network.
pub fn baseline_extremal<T: Element>(
    problem: &Problem<'_, T>,
    area: f64,
    config: &BaselineConfig,
    weights: &LossWeights,
    filter: &RbfFilter<T>,
) -> Result<AttributionMask> {
    if !(0.0..=1.0).contains(&area) {
        return Err(Error::invalid(format!("area {area} outside [0, 1]")));
    }
    if config.epochs == 0 || config.downsample == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("baseline needs positive epochs, downsample and learning rate"));
    }
    weights.validate()?;
    let attempts = match config.divergence {
        DivergencePolicy::Abort => 1,
        DivergencePolicy::Reseed { attempts } => attempts.max(1),
    };
    let mut last = Error::Diverged { epoch: 0 };
    for attempt in 0..attempts {
        let seed = config.seed.wrapping_add(attempt as u64);
        match baseline_once(problem, area, config, weights, filter, seed) {
            Ok(values) => {
                return AttributionMask::new(
                    &values,
                    area,
                    Provenance {
                        method: "baseline".into(),
                        seed,
                        iteration: 0,
                    },
                )
            }
            Err(e @ Error::Diverged { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

fn baseline_once<T: Element>(
    problem: &Problem<'_, T>,
    area: f64,
    config: &BaselineConfig,
    weights: &LossWeights,
    filter: &RbfFilter<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let [h, w] = problem.spatial_shape();
    let (lh, lw) = (h.div_ceil(config.downsample).max(2), w.div_ceil(config.downsample).max(2));
    let up_rows = interpolation_matrix::<T>(h, lh);
    let up_cols = transpose(&interpolation_matrix::<T>(w, lw));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("positive std");
    let init = (0..lh * lw).map(|_| T::of(normal.sample(&mut rng))).collect();
    let mut params = vec![Tensor::new([lh, lw], init)?];
    let mut adam = Adam::<T>::new(config.learning_rate);
    let mut tape = Tape::<T>::new();

    let render = |tape: &mut Tape<T>, logits| -> Result<_> {
        let low = tape.sigmoid(logits)?;
        let rows = tape.constant(up_rows.clone());
        let cols = tape.constant(up_cols.clone());
        let tall = tape.matmul(rows, low)?;
        let full = tape.matmul(tall, cols)?;
        filter.apply_var(tape, full)
    };

    for epoch in 0..config.epochs {
        tape.reset();
        let weights = warmed_up(weights, epoch, config.lambda_r_warmup);
        let step = (|| {
            let logits = tape.param(params[0].clone());
            let mask = render(&mut tape, logits)?;
            let terms = loss_extremal(&mut tape, problem, mask, mask, area, &weights, None)?;
            let loss = tape.value(terms.total).item()?.f64();
            let mut grads = tape.backward(terms.total)?;
            let g = grads.take(logits).unwrap_or_else(|| Tensor::zeros([lh, lw]));
            Ok::<_, Error>((loss, g))
        })();
        let (loss, g) = match step {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !g.all_finite() {
            return Err(Error::Diverged { epoch });
        }
        adam.step(&mut params, &[g])?;
    }
    tape.reset();
    let logits = tape.constant(params[0].clone());
    let mask = render(&mut tape, logits)?;
    Ok(tape.value(mask).map(|v| v.max(T::zero()).min(T::one())))
}
