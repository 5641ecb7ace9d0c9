//! Loading the image, the classifier under explanation and optional
//! reference segmentations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskfield::image::BinaryMap;
use maskfield::models::{load_weights, Classifier, ImagePair, OracleClassifier, ToyCnn};
use maskfield::netpbm;
use maskfield::tensor::{Tape, Tensor, Var};

use crate::config::RunConfig;

/// Either a calibrated oracle or a trained toy network.
pub enum LoadedClassifier {
    Oracle(OracleClassifier),
    Model(ToyCnn),
}

impl LoadedClassifier {
    pub fn kind(&self) -> &'static str {
        match self {
            LoadedClassifier::Oracle(_) => "oracle",
            LoadedClassifier::Model(_) => "model",
        }
    }
}

impl Classifier<f32> for LoadedClassifier {
    fn num_classes(&self) -> usize {
        match self {
            LoadedClassifier::Oracle(c) => Classifier::<f32>::num_classes(c),
            LoadedClassifier::Model(c) => Classifier::<f32>::num_classes(c),
        }
    }

    fn forward(&self, tape: &mut Tape<f32>, image: Var) -> maskfield::Result<Var> {
        match self {
            LoadedClassifier::Oracle(c) => c.forward(tape, image),
            LoadedClassifier::Model(c) => c.forward(tape, image),
        }
    }
}

/// Command-line description of the classifier.
#[derive(Clone, Debug, Default)]
pub struct ClassifierSource {
    pub model: Option<PathBuf>,
    pub oracle: Vec<PathBuf>,
    pub class: Option<usize>,
    pub segmentation: Option<PathBuf>,
}

/// Everything a single-image command needs.
pub struct Subject {
    pub image_path: PathBuf,
    pub pair: ImagePair<f32>,
    pub classifier: LoadedClassifier,
    pub class: usize,
    /// Union reference for precision: the given segmentation, else the
    /// oracle's support.
    pub segmentation: Option<BinaryMap>,
    /// Individual oracle regions (empty for a model).
    pub regions: Vec<BinaryMap>,
}

pub fn read_map(path: &Path) -> Result<BinaryMap> {
    let values = netpbm::read_pgm(path).with_context(|| format!("reading mask {}", path.display()))?;
    Ok(BinaryMap::from_values(&values, 0.5)?)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    netpbm::read_rgb(path).with_context(|| format!("reading image {}", path.display()))
}

impl Subject {
    pub fn load(image: &Path, source: &ClassifierSource, config: &RunConfig) -> Result<Self> {
        let original = read_image(image)?;
        let pair = ImagePair::from_image(original, config.perturbation(source.model.is_none()))?;
        let (classifier, regions) = match (&source.model, source.oracle.is_empty()) {
            (Some(_), false) => bail!("pass either --model or --oracle, not both"),
            (None, true) => bail!("a classifier is required: --model WEIGHTS or --oracle REGION.pgm"),
            (Some(path), true) => {
                let tensors = load_weights(path).with_context(|| format!("loading model {}", path.display()))?;
                (LoadedClassifier::Model(ToyCnn::from_named_tensors(&tensors)?), Vec::new())
            }
            (None, false) => {
                let regions = source.oracle.iter().map(|p| read_map(p)).collect::<Result<Vec<_>>>()?;
                let oracle = OracleClassifier::calibrated(regions.clone(), &pair, config.oracle_confidence)
                    .context("calibrating the oracle classifier")?;
                (LoadedClassifier::Oracle(oracle), regions)
            }
        };
        let class = match (&classifier, source.class) {
            (_, Some(c)) => c,
            (LoadedClassifier::Oracle(_), None) => OracleClassifier::TARGET_CLASS,
            (LoadedClassifier::Model(_), None) => classifier.predict(pair.original())?,
        };
        let segmentation = match &source.segmentation {
            Some(path) => Some(read_map(path)?),
            None => match &classifier {
                LoadedClassifier::Oracle(o) => Some(o.support()),
                LoadedClassifier::Model(_) => None,
            },
        };
        Ok(Self {
            image_path: image.to_path_buf(),
            pair,
            classifier,
            class,
            segmentation,
            regions,
        })
    }
}
