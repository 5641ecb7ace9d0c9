use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::weights::{self, find};
use crate::netpbm;
use crate::tensor::{Element, Tensor};

/// Where a mask came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
}

/// An `[h, w]` field with values in `[0, 1]`, tagged with the area it was
/// requested at.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMask {
    values: Tensor<f32>,
    area: f64,
    provenance: Provenance,
}

impl AttributionMask {
    pub fn new<T: Element>(values: &Tensor<T>, area: f64, provenance: Provenance) -> Result<Self> {
        if values.rank() != 2 || values.is_empty() {
            return Err(Error::InvalidShape {
                op: "attribution_mask",
                shape: values.shape().to_vec(),
                reason: "expected a nonempty [h, w] map".into(),
            });
        }
        if !values.data().iter().all(|v| (0.0..=1.0).contains(&v.f64())) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self {
            values: values.cast(),
            area,
            provenance,
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.values.shape()[0], self.values.shape()[1]]
    }

    /// Requested (raw) area parameter.
    pub fn area(&self) -> f64 {
        self.area
    }

    /// Mean mask value.
    pub fn measured_area(&self) -> f64 {
        self.values.mean_f64()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.provenance.iteration = iteration;
        self
    }

    /// Writes `<stem>.pgm` (8-bit preview), `<stem>.inrw` (exact values) and
    /// `<stem>.json` (provenance). Returns the three paths.
    pub fn save(&self, dir: &Path, stem: &str, phi: PhiValues) -> Result<[PathBuf; 3]> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pgm = dir.join(format!("{stem}.pgm"));
        let inrw = dir.join(format!("{stem}.inrw"));
        let json = dir.join(format!("{stem}.json"));
        netpbm::write_pgm(&pgm, &self.values)?;
        weights::save_weights(&inrw, &[("mask".to_string(), self.values.clone())])?;
        let record = MaskRecord {
            method: self.provenance.method.clone(),
            seed: self.provenance.seed,
            iteration: self.provenance.iteration,
            area: self.area,
            measured_area: self.measured_area(),
            height: self.shape()[0],
            width: self.shape()[1],
            phi_original: phi.original,
            phi_masked: phi.masked,
        };
        let text = serde_json::to_string_pretty(&record)? + "\n";
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        Ok([pgm, inrw, json])
    }

    /// Loads a mask written by [`save`](Self::save) from its sidecars.
    pub fn load(dir: &Path, stem: &str) -> Result<(Self, MaskRecord)> {
        let json = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let record: MaskRecord = serde_json::from_str(&text)?;
        let tensors = weights::load_weights(dir.join(format!("{stem}.inrw")))?;
        let values = find(&tensors, "mask")?;
        let mask = Self::new(
            values,
            record.area,
            Provenance {
                method: record.method.clone(),
                seed: record.seed,
                iteration: record.iteration,
            },
        )?;
        Ok((mask, record))
    }
}

/// Class probability of the original image and of the masked composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiValues {
    pub original: f64,
    pub masked: f64,
}

/// JSON provenance sidecar of a saved mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub area: f64,
    pub measured_area: f64,
    pub height: usize,
    pub width: usize,
    pub phi_original: f64,
    pub phi_masked: f64,
}
