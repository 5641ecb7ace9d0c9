//! Area-conditioned coordinate network producing attribution masks.
//!
//! Each pixel coordinate is concatenated with the scaled area value, passed
//! through a fixed Fourier feature map and then through a ReLU MLP with a
//! single sigmoid output unit.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Input dimension of the encoder: two coordinates plus the area value.
pub const INPUT_DIM: usize = 3;

/// How the Fourier frequency matrix is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourierKind {
    /// `components` random rows drawn from N(0, frequencies²).
    Gaussian,
    /// Octave frequencies 2^0 .. 2^(frequencies-1) along each input axis.
    AxisAligned,
}

/// Closed interval of raw mask areas the network is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl Default for AreaRange {
    fn default() -> Self {
        Self { min: 0.025, max: 0.2 }
    }
}

impl AreaRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && 0.0 <= min && min < max && max <= 1.0) {
            return Err(Error::invalid(format!("area range [{min}, {max}] must satisfy 0 <= min < max <= 1")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, raw: f64) -> bool {
        // tolerate the round-off of scale/unscale at the endpoints
        raw >= self.min - 1e-12 && raw <= self.max + 1e-12
    }

    pub fn scale(&self, raw: f64) -> f64 {
        (raw - self.min) / (self.max - self.min)
    }

    pub fn unscale(&self, scaled: f64) -> f64 {
        self.min + scaled * (self.max - self.min)
    }

    pub fn parameter(&self, raw: f64) -> Result<AreaParameter> {
        if !self.contains(raw) {
            return Err(Error::invalid(format!(
                "area {raw} outside [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(AreaParameter {
            raw,
            scaled: self.scale(raw).clamp(0.0, 1.0),
        })
    }

    pub fn from_scaled(&self, scaled: f64) -> Result<AreaParameter> {
        if !(0.0..=1.0).contains(&scaled) {
            return Err(Error::invalid(format!("scaled area {scaled} outside [0, 1]")));
        }
        Ok(AreaParameter {
            raw: self.unscale(scaled),
            scaled,
        })
    }
}

/// A raw mask area together with its value rescaled into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaParameter {
    pub raw: f64,
    pub scaled: f64,
}

/// Pixel-center coordinates normalized so the first and last row/column sit
/// exactly at 0 and 1. Row-major, matching image layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoordinateGrid {
    pub height: usize,
    pub width: usize,
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("coordinate grid must be nonempty"));
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn axis(i: usize, n: usize) -> f64 {
        if n == 1 {
            0.0
        } else {
            i as f64 / (n - 1) as f64
        }
    }

    /// `(row, col)` coordinate of pixel `index`.
    pub fn coordinate(&self, index: usize) -> [f64; 2] {
        [
            Self::axis(index / self.width, self.height),
            Self::axis(index % self.width, self.width),
        ]
    }

    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.coordinate(i)).collect()
    }
}

/// Fixed Fourier feature map `v -> [sin(2πBv), cos(2πBv)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoder {
    kind: FourierKind,
    frequencies: usize,
    /// `[rows, INPUT_DIM]`
    matrix: Tensor<f64>,
}

impl FourierEncoder {
    pub fn new(kind: FourierKind, frequencies: usize, components: usize, seed: u64) -> Result<Self> {
        if frequencies == 0 {
            return Err(Error::invalid("fourier encoder needs at least one frequency"));
        }
        let matrix = match kind {
            FourierKind::Gaussian => {
                if components == 0 {
                    return Err(Error::invalid("gaussian fourier encoder needs components > 0"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                let normal = Normal::new(0.0, frequencies as f64).expect("positive std");
                let data = (0..components * INPUT_DIM).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new([components, INPUT_DIM], data)?
            }
            FourierKind::AxisAligned => {
                let rows = INPUT_DIM * frequencies;
                let mut data = vec![0.0; rows * INPUT_DIM];
                for d in 0..INPUT_DIM {
                    for k in 0..frequencies {
                        data[(d * frequencies + k) * INPUT_DIM + d] = (1u64 << k) as f64;
                    }
                }
                Tensor::new([rows, INPUT_DIM], data)?
            }
        };
        Ok(Self {
            kind,
            frequencies,
            matrix,
        })
    }

    /// Multiplies every frequency along the area input by `scale`, leaving
    /// the spatial frequencies untouched.
    pub fn with_area_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("area frequency scale must be positive, got {scale}")));
        }
        for row in self.matrix.data_mut().chunks_mut(INPUT_DIM) {
            row[INPUT_DIM - 1] *= scale;
        }
        Ok(self)
    }

    pub fn kind(&self) -> FourierKind {
        self.kind
    }

    pub fn frequencies(&self) -> usize {
        self.frequencies
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        2 * self.rows()
    }

    /// Encodes explicit input vectors `[x1, x2, scaled_area]`.
    pub fn encode_points<T: Element>(&self, points: &[[f64; INPUT_DIM]]) -> Result<Tensor<T>> {
        if let Some(p) = points.iter().find(|p| !(0.0..=1.0).contains(&p[2])) {
            return Err(Error::invalid(format!("scaled area {} outside [0, 1]", p[2])));
        }
        let rows = self.rows();
        let b = self.matrix.data();
        let mut out = Vec::with_capacity(points.len() * 2 * rows);
        for p in points {
            let phases: Vec<f64> = (0..rows)
                .map(|r| 2.0 * PI * (0..INPUT_DIM).map(|d| b[r * INPUT_DIM + d] * p[d]).sum::<f64>())
                .collect();
            out.extend(phases.iter().map(|&ph| T::of(ph.sin())));
            out.extend(phases.iter().map(|&ph| T::of(ph.cos())));
        }
        Tensor::new([points.len(), 2 * rows], out)
    }

    /// Encodes a whole grid with one shared scaled area value.
    pub fn encode<T: Element>(&self, grid: &CoordinateGrid, scaled_area: f64) -> Result<Tensor<T>> {
        self.prepare(grid).features(scaled_area)
    }

    /// Caches sines and cosines of the coordinate phases; a new area value
    /// then only needs the angle-addition identities.
    pub fn prepare(&self, grid: &CoordinateGrid) -> EncodedGrid {
        let rows = self.rows();
        let b = self.matrix.data();
        let mut coord_sin = Vec::with_capacity(grid.len() * rows);
        let mut coord_cos = Vec::with_capacity(grid.len() * rows);
        for i in 0..grid.len() {
            let [y, x] = grid.coordinate(i);
            for r in 0..rows {
                let (sn, cs) = (2.0 * PI * (b[r * INPUT_DIM] * y + b[r * INPUT_DIM + 1] * x)).sin_cos();
                coord_sin.push(sn);
                coord_cos.push(cs);
            }
        }
        EncodedGrid {
            grid: *grid,
            area_phase: (0..rows).map(|r| 2.0 * PI * b[r * INPUT_DIM + 2]).collect(),
            coord_sin,
            coord_cos,
        }
    }
}

/// Coordinate phases of a grid, ready to be combined with an area value.
#[derive(Clone, Debug)]
pub struct EncodedGrid {
    grid: CoordinateGrid,
    coord_sin: Vec<f64>,
    coord_cos: Vec<f64>,
    area_phase: Vec<f64>,
}

impl EncodedGrid {
    pub fn grid(&self) -> &CoordinateGrid {
        &self.grid
    }

    pub fn features<T: Element>(&self, scaled_area: f64) -> Result<Tensor<T>> {
        if !(0.0..=1.0).contains(&scaled_area) {
            return Err(Error::invalid(format!("scaled area {scaled_area} outside [0, 1]")));
        }
        let rows = self.area_phase.len();
        let (area_sin, area_cos): (Vec<f64>, Vec<f64>) =
            self.area_phase.iter().map(|&ap| (ap * scaled_area).sin_cos()).unzip();
        let mut out = vec![T::zero(); self.grid.len() * 2 * rows];
        for ((ps, pc), dst) in self
            .coord_sin
            .chunks_exact(rows)
            .zip(self.coord_cos.chunks_exact(rows))
            .zip(out.chunks_exact_mut(2 * rows))
        {
            let (sin_half, cos_half) = dst.split_at_mut(rows);
            for r in 0..rows {
                sin_half[r] = T::of(ps[r] * area_cos[r] + pc[r] * area_sin[r]);
                cos_half[r] = T::of(pc[r] * area_cos[r] - ps[r] * area_sin[r]);
            }
        }
        Tensor::new([self.grid.len(), 2 * rows], out)
    }
}

/// Architecture and conditioning settings of the mask network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InrConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub fourier: FourierKind,
    pub frequencies: usize,
    pub components: usize,
    /// Factor on the frequencies along the area input. Values below one
    /// make masks at neighbouring areas share more structure.
    pub area_frequency_scale: f64,
    pub area_range: AreaRange,
}

impl Default for InrConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 5,
            hidden_width: 256,
            fourier: FourierKind::Gaussian,
            frequencies: 6,
            components: 128,
            area_frequency_scale: 1.0,
            area_range: AreaRange::default(),
        }
    }
}

impl InrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("network needs at least one hidden layer of nonzero width"));
        }
        if !(self.area_frequency_scale > 0.0 && self.area_frequency_scale.is_finite()) {
            return Err(Error::invalid("area frequency scale must be positive"));
        }
        AreaRange::new(self.area_range.min, self.area_range.max)?;
        Ok(())
    }
}

/// Fourier encoder followed by a ReLU MLP with a sigmoid output unit.
///
/// Parameters are stored as `[weight_0, bias_0, weight_1, bias_1, ...]`,
/// weights shaped `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitMaskNetwork<T = f32> {
    config: InrConfig,
    encoder: FourierEncoder,
    params: Vec<Tensor<T>>,
    seed: u64,
}

impl<T: Element> ImplicitMaskNetwork<T> {
    /// He-initialized hidden layers; the output layer uses a fan-in scaled
    /// Gaussian with unit gain. Biases start at zero.
    pub fn init(config: &InrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = FourierEncoder::new(config.fourier, config.frequencies, config.components, seed)?
            .with_area_scale(config.area_frequency_scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut fan_in = encoder.output_dim();
        for layer in 0..=config.hidden_layers {
            let output = layer == config.hidden_layers;
            let fan_out = if output { 1 } else { config.hidden_width };
            let gain = if output { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            let w = (0..fan_in * fan_out).map(|_| T::of(normal.sample(&mut rng))).collect();
            params.push(Tensor::new([fan_in, fan_out], w)?);
            params.push(Tensor::zeros([fan_out]));
            fan_in = fan_out;
        }
        Ok(Self {
            config: config.clone(),
            encoder,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &InrConfig {
        &self.config
    }

    pub fn encoder(&self) -> &FourierEncoder {
        &self.encoder
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Raw (unfiltered) mask `[h, w]` from precomputed features `[h*w, dim]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], features: Var, grid: &CoordinateGrid) -> Result<Var> {
        if bound.len() != self.params.len() {
            return Err(Error::invalid("bound parameter count does not match network"));
        }
        let mut h = features;
        let layers = bound.len() / 2;
        for (l, wb) in bound.chunks_exact(2).enumerate() {
            let z = tape.matmul(h, wb[0])?;
            let z = tape.add_row_bias(z, wb[1])?;
            h = if l + 1 == layers { tape.sigmoid(z)? } else { tape.relu(z)? };
        }
        tape.reshape(h, [grid.height, grid.width])
    }

    /// Convenience wrapper encoding `grid` at `area` before [`forward`](Self::forward).
    pub fn forward_mask(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        grid: &CoordinateGrid,
        area: AreaParameter,
    ) -> Result<Var> {
        let features = tape.constant(self.encoder.encode(grid, area.scaled)?);
        self.forward(tape, bound, features, grid)
    }

    /// Untracked evaluation of the raw mask.
    pub fn raw_mask(&self, grid: &CoordinateGrid, area: AreaParameter) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward_mask(&mut tape, &bound, grid, area)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluates the network at explicit `[x1, x2, scaled_area]` inputs.
    pub fn evaluate_points(&self, points: &[[f64; INPUT_DIM]]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let features = tape.constant(self.encoder.encode_points(points)?);
        let grid = CoordinateGrid::new(1, points.len())?;
        let out = self.forward(&mut tape, &bound, features, &grid)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Named tensors for the weight container (stored as `f32`).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let kind = if i % 2 == 0 { "weight" } else { "bias" };
                (format!("layer{}.{kind}", i / 2), p.cast())
            })
            .collect()
    }

    /// Rebuilds a network with `config` and `seed` from container tensors.
    pub fn from_named_tensors(config: &InrConfig, seed: u64, tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut net = Self::init(config, seed)?;
        let expected = net.named_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} network tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, want)), (got_name, got)) in net.params.iter_mut().zip(&expected).zip(tensors) {
            if name != got_name || want.shape() != got.shape() {
                return Err(Error::invalid(format!(
                    "network tensor {got_name} {:?} does not match expected {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            *slot = got.cast();
        }
        Ok(net)
    }
}
