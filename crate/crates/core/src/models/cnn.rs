use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::weights::{find, NamedTensor};
use super::Classifier;
use crate::error::{Error, Result};
use crate::image::image_dims;
use crate::optim::Adam;
use crate::tensor::{Element, Padding, Tape, Tensor, Var};

const NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "dense.weight",
    "dense.bias",
];

/// conv(8, 3×3) → ReLU → conv(16, 3×3) → ReLU → global average pool →
/// dense → softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCnn {
    params: Vec<Tensor<f32>>,
}

impl ToyCnn {
    pub const CONV1: usize = 8;
    pub const CONV2: usize = 16;
    pub const MIN_SIDE: usize = 8;

    pub fn init(channels: usize, classes: usize, seed: u64) -> Result<Self> {
        if channels == 0 || classes < 2 {
            return Err(Error::invalid("toy cnn needs channels > 0 and at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: Vec<usize>, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng) as f32).collect()).expect("shape")
        };
        let params = vec![
            he(vec![Self::CONV1, channels, 3, 3], channels * 9),
            Tensor::zeros([Self::CONV1]),
            he(vec![Self::CONV2, Self::CONV1, 3, 3], Self::CONV1 * 9),
            Tensor::zeros([Self::CONV2]),
            he(vec![Self::CONV2, classes], Self::CONV2),
            Tensor::zeros([classes]),
        ];
        Ok(Self { params })
    }

    pub fn channels(&self) -> usize {
        self.params[0].shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.params[5].len()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    fn logits<T: Element>(&self, tape: &mut Tape<T>, bound: &[Var], image: Var) -> Result<Var> {
        let (c, h, w) = image_dims(tape.value(image))?;
        if c != self.channels() || h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::InvalidShape {
                op: "toy_cnn",
                shape: vec![c, h, w],
                reason: format!("expected {} channels and sides >= {}", self.channels(), Self::MIN_SIDE),
            });
        }
        let x = tape.conv2d(image, bound[0], Padding::Same)?;
        let x = tape.add_channel_bias(x, bound[1])?;
        let x = tape.relu(x)?;
        let x = tape.conv2d(x, bound[2], Padding::Same)?;
        let x = tape.add_channel_bias(x, bound[3])?;
        let x = tape.relu(x)?;
        let pooled = tape.spatial_mean(x)?;
        let row = tape.reshape(pooled, [1, Self::CONV2])?;
        let z = tape.matmul(row, bound[4])?;
        let z = tape.add_row_bias(z, bound[5])?;
        tape.reshape(z, [self.classes()])
    }

    fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.cast()) } else { tape.constant(p.cast()) })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        NAMES.iter().map(|n| n.to_string()).zip(self.params.iter().cloned()).collect()
    }

    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let params: Vec<Tensor<f32>> = NAMES
            .iter()
            .map(|n| find(tensors, n).cloned())
            .collect::<Result<_>>()?;
        let channels = params[0].shape().get(1).copied().unwrap_or(0);
        let classes = params[5].len();
        let reference = Self::init(channels, classes, 0)?;
        for (name, (got, want)) in NAMES.iter().zip(params.iter().zip(&reference.params)) {
            if got.shape() != want.shape() {
                return Err(Error::invalid(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { params })
    }
}

impl<T: Element> Classifier<T> for ToyCnn {
    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        let z = self.logits(tape, &bound, image)?;
        tape.softmax(z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Mini-batch Adam on mean cross-entropy.
pub fn train_toy_cnn(data: &[(Tensor<f32>, usize)], classes: usize, config: &CnnTrainConfig) -> Result<ToyCnn> {
    let mut seen = vec![false; classes];
    for (img, label) in data {
        if *label >= classes {
            return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
        }
        seen[*label] = true;
        image_dims(img)?;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::invalid("training data must contain at least two classes"));
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("epochs, batch size and learning rate must be positive"));
    }
    let channels = image_dims(&data[0].0)?.0;
    let mut model = ToyCnn::init(channels, classes, config.seed)?;
    let mut adam = Adam::<f32>::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, label) = &data[i];
                let x = tape.constant(img.clone());
                let z = model.logits(&mut tape, &bound, x).map_err(|e| diverged(e, epoch))?;
                let p = tape.softmax(z).map_err(|e| diverged(e, epoch))?;
                let p = tape.select(p, *label)?;
                let p = tape.clamp(p, 1e-12, 1.0)?;
                let nll = tape.ln(p)?;
                losses.push(nll);
            }
            let stacked = tape.concat(&losses)?;
            let mean = tape.mean(stacked)?;
            let loss = tape.mul_scalar(mean, -1.0)?;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut model.params, &grads)?;
        }
    }
    Ok(model)
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

/// Fraction of correctly predicted labels.
pub fn accuracy(model: &ToyCnn, data: &[(Tensor<f32>, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty { op: "accuracy" });
    }
    let mut correct = 0;
    for (img, label) in data {
        if Classifier::<f32>::predict(model, img)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
