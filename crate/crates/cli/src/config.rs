//! Effective run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use maskfield::attribution::{
    AreaSearchConfig, BaselineConfig, DivergencePolicy, FilterSpec, LossWeights, RegularizeOn, Threshold, TrainConfig,
};
use maskfield::inr::{AreaRange, FourierKind, InrConfig};
use maskfield::models::{CnnTrainConfig, Perturbation};
use maskfield::scene::DatasetSpec;
use maskfield::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationKind {
    /// Fade-to-black for the oracle (it reads intensity only), blur otherwise.
    Auto,
    Blur,
    FadeToBlack,
}

/// Every tunable of every command. Defaults are desk-scale.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,

    pub epochs: usize,
    pub lr: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub lambda_r_warmup: usize,
    pub regularize_on: RegularizeOn,
    pub divergence: DivergencePolicy,

    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub fourier: FourierKind,
    pub frequencies: usize,
    pub components: usize,
    pub area_frequency_scale: f64,
    pub area_min: f64,
    pub area_max: f64,

    pub area_grid: Vec<f64>,
    pub threshold: Threshold,

    pub perturbation: PerturbationKind,
    pub blur_sigma_frac: f64,
    pub filter_radius_frac: f64,
    pub oracle_confidence: f64,
    pub cutoff: f64,

    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub baseline_downsample: usize,
    pub baseline_warmup: usize,

    pub toy_epochs: usize,
    pub toy_lr: f64,
    pub toy_batch: usize,

    pub dataset_classes: usize,
    pub dataset_size: usize,
    pub dataset_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("out"),
            epochs: 1000,
            lr: 1e-3,
            lambda_r: 50.0,
            lambda_d: 10.0,
            lambda_r_warmup: 300,
            regularize_on: RegularizeOn::Filtered,
            divergence: DivergencePolicy::Abort,
            hidden_layers: 5,
            hidden_width: 64,
            fourier: FourierKind::Gaussian,
            frequencies: 6,
            components: 128,
            area_frequency_scale: 0.1,
            area_min: 0.025,
            area_max: 0.2,
            area_grid: vec![0.025, 0.05, 0.1, 0.2],
            threshold: Threshold::Relative(0.9),
            perturbation: PerturbationKind::Auto,
            blur_sigma_frac: 0.05,
            filter_radius_frac: 0.05,
            oracle_confidence: 0.99,
            cutoff: 0.5,
            baseline_epochs: 1000,
            baseline_lr: 0.05,
            baseline_downsample: 8,
            baseline_warmup: 300,
            toy_epochs: 15,
            toy_lr: 0.01,
            toy_batch: 16,
            dataset_classes: 3,
            dataset_size: 64,
            dataset_per_class: 40,
        }
    }
}

/// Keys in dump order.
pub const KEYS: &[&str] = &[
    "seeds",
    "out",
    "epochs",
    "lr",
    "lambda_r",
    "lambda_d",
    "lambda_r_warmup",
    "regularize_on",
    "divergence",
    "hidden_layers",
    "hidden_width",
    "fourier",
    "frequencies",
    "components",
    "area_frequency_scale",
    "area_min",
    "area_max",
    "area_grid",
    "threshold",
    "perturbation",
    "blur_sigma_frac",
    "filter_radius_frac",
    "oracle_confidence",
    "cutoff",
    "baseline_epochs",
    "baseline_lr",
    "baseline_downsample",
    "baseline_warmup",
    "toy_epochs",
    "toy_lr",
    "toy_batch",
    "dataset_classes",
    "dataset_size",
    "dataset_per_class",
];

fn bad(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_num<N: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| bad(line, format!("{key}: cannot parse {value:?}")))
}

fn parse_list<N: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<N>> {
    value
        .split(',')
        .map(|s| parse_num(line, key, s.trim()))
        .collect()
}

fn join<N: std::fmt::Display>(values: &[N]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text value. `line` is reported in errors
    /// (0 for command-line overrides).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value.trim();
        match key {
            "seeds" => self.seeds = parse_list(line, key, v)?,
            "out" => self.out = PathBuf::from(v),
            "epochs" => self.epochs = parse_num(line, key, v)?,
            "lr" => self.lr = parse_num(line, key, v)?,
            "lambda_r" => self.lambda_r = parse_num(line, key, v)?,
            "lambda_d" => self.lambda_d = parse_num(line, key, v)?,
            "lambda_r_warmup" => self.lambda_r_warmup = parse_num(line, key, v)?,
            "regularize_on" => {
                self.regularize_on = match v {
                    "filtered" => RegularizeOn::Filtered,
                    "raw" => RegularizeOn::Raw,
                    _ => return Err(bad(line, format!("{key}: expected filtered or raw, got {v:?}"))),
                }
            }
            "divergence" => {
                self.divergence = match v.split_once(':') {
                    None if v == "abort" => DivergencePolicy::Abort,
                    Some(("reseed", n)) => DivergencePolicy::Reseed {
                        attempts: parse_num(line, key, n)?,
                    },
                    _ => return Err(bad(line, format!("{key}: expected abort or reseed:N, got {v:?}"))),
                }
            }
            "hidden_layers" => self.hidden_layers = parse_num(line, key, v)?,
            "hidden_width" => self.hidden_width = parse_num(line, key, v)?,
            "fourier" => {
                self.fourier = match v {
                    "gaussian" => FourierKind::Gaussian,
                    "axis_aligned" => FourierKind::AxisAligned,
                    _ => return Err(bad(line, format!("{key}: expected gaussian or axis_aligned, got {v:?}"))),
                }
            }
            "frequencies" => self.frequencies = parse_num(line, key, v)?,
            "components" => self.components = parse_num(line, key, v)?,
            "area_frequency_scale" => self.area_frequency_scale = parse_num(line, key, v)?,
            "area_min" => self.area_min = parse_num(line, key, v)?,
            "area_max" => self.area_max = parse_num(line, key, v)?,
            "area_grid" => self.area_grid = parse_list(line, key, v)?,
            "threshold" => {
                self.threshold = match v.split_once(':') {
                    Some(("relative", t)) => Threshold::Relative(parse_num(line, key, t)?),
                    Some(("absolute", t)) => Threshold::Absolute(parse_num(line, key, t)?),
                    _ => {
                        return Err(bad(
                            line,
                            format!("{key}: expected relative:TAU or absolute:PHI0, got {v:?}"),
                        ))
                    }
                }
            }
            "perturbation" => {
                self.perturbation = match v {
                    "auto" => PerturbationKind::Auto,
                    "blur" => PerturbationKind::Blur,
                    "fade_to_black" => PerturbationKind::FadeToBlack,
                    _ => return Err(bad(line, format!("{key}: expected auto, blur or fade_to_black, got {v:?}"))),
                }
            }
            "blur_sigma_frac" => self.blur_sigma_frac = parse_num(line, key, v)?,
            "filter_radius_frac" => self.filter_radius_frac = parse_num(line, key, v)?,
            "oracle_confidence" => self.oracle_confidence = parse_num(line, key, v)?,
            "cutoff" => self.cutoff = parse_num(line, key, v)?,
            "baseline_epochs" => self.baseline_epochs = parse_num(line, key, v)?,
            "baseline_lr" => self.baseline_lr = parse_num(line, key, v)?,
            "baseline_downsample" => self.baseline_downsample = parse_num(line, key, v)?,
            "baseline_warmup" => self.baseline_warmup = parse_num(line, key, v)?,
            "toy_epochs" => self.toy_epochs = parse_num(line, key, v)?,
            "toy_lr" => self.toy_lr = parse_num(line, key, v)?,
            "toy_batch" => self.toy_batch = parse_num(line, key, v)?,
            "dataset_classes" => self.dataset_classes = parse_num(line, key, v)?,
            "dataset_size" => self.dataset_size = parse_num(line, key, v)?,
            "dataset_per_class" => self.dataset_per_class = parse_num(line, key, v)?,
            _ => return Err(bad(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text value of `key` as `dump` writes it.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seeds" => join(&self.seeds),
            "out" => self.out.display().to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "lambda_r" => self.lambda_r.to_string(),
            "lambda_d" => self.lambda_d.to_string(),
            "lambda_r_warmup" => self.lambda_r_warmup.to_string(),
            "regularize_on" => match self.regularize_on {
                RegularizeOn::Filtered => "filtered".into(),
                RegularizeOn::Raw => "raw".into(),
            },
            "divergence" => match self.divergence {
                DivergencePolicy::Abort => "abort".into(),
                DivergencePolicy::Reseed { attempts } => format!("reseed:{attempts}"),
            },
            "hidden_layers" => self.hidden_layers.to_string(),
            "hidden_width" => self.hidden_width.to_string(),
            "fourier" => match self.fourier {
                FourierKind::Gaussian => "gaussian".into(),
                FourierKind::AxisAligned => "axis_aligned".into(),
            },
            "frequencies" => self.frequencies.to_string(),
            "components" => self.components.to_string(),
            "area_frequency_scale" => self.area_frequency_scale.to_string(),
            "area_min" => self.area_min.to_string(),
            "area_max" => self.area_max.to_string(),
            "area_grid" => join(&self.area_grid),
            "threshold" => match self.threshold {
                Threshold::Relative(t) => format!("relative:{t}"),
                Threshold::Absolute(t) => format!("absolute:{t}"),
            },
            "perturbation" => match self.perturbation {
                PerturbationKind::Auto => "auto".into(),
                PerturbationKind::Blur => "blur".into(),
                PerturbationKind::FadeToBlack => "fade_to_black".into(),
            },
            "blur_sigma_frac" => self.blur_sigma_frac.to_string(),
            "filter_radius_frac" => self.filter_radius_frac.to_string(),
            "oracle_confidence" => self.oracle_confidence.to_string(),
            "cutoff" => self.cutoff.to_string(),
            "baseline_epochs" => self.baseline_epochs.to_string(),
            "baseline_lr" => self.baseline_lr.to_string(),
            "baseline_downsample" => self.baseline_downsample.to_string(),
            "baseline_warmup" => self.baseline_warmup.to_string(),
            "toy_epochs" => self.toy_epochs.to_string(),
            "toy_lr" => self.toy_lr.to_string(),
            "toy_batch" => self.toy_batch.to_string(),
            "dataset_classes" => self.dataset_classes.to_string(),
            "dataset_size" => self.dataset_size.to_string(),
            "dataset_per_class" => self.dataset_per_class.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| bad(line, format!("expected key = value, got {content:?}")))?;
            self.set(key.trim(), value, line)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            writeln!(out, "{key} = {value}").expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        self.train_config(self.seeds[0]).validate()?;
        self.loss_weights().validate()?;
        self.search_config().validate(&self.area_range()?)?;
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::invalid("cutoff must lie in (0, 1)"));
        }
        if !(self.blur_sigma_frac > 0.0 && self.filter_radius_frac > 0.0) {
            return Err(Error::invalid("blur and filter fractions must be positive"));
        }
        Ok(())
    }

    pub fn area_range(&self) -> Result<AreaRange> {
        AreaRange::new(self.area_min, self.area_max)
    }

    pub fn network(&self) -> InrConfig {
        InrConfig {
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            fourier: self.fourier,
            frequencies: self.frequencies,
            components: self.components,
            area_frequency_scale: self.area_frequency_scale,
            area_range: AreaRange {
                min: self.area_min,
                max: self.area_max,
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            seed,
            divergence: self.divergence,
            regularize_on: self.regularize_on,
            lambda_r_warmup: self.lambda_r_warmup,
            network: self.network(),
        }
    }

    pub fn baseline_config(&self, seed: u64) -> BaselineConfig {
        BaselineConfig {
            epochs: self.baseline_epochs,
            learning_rate: self.baseline_lr,
            seed,
            downsample: self.baseline_downsample,
            lambda_r_warmup: self.baseline_warmup,
            divergence: self.divergence,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_r: self.lambda_r,
            lambda_d: self.lambda_d,
        }
    }

    pub fn search_config(&self) -> AreaSearchConfig {
        AreaSearchConfig {
            grid: self.area_grid.clone(),
            threshold: self.threshold,
        }
    }

    pub fn filter_spec(&self) -> FilterSpec {
        FilterSpec {
            radius_fraction: self.filter_radius_frac,
        }
    }

    /// `I′` for a run; `oracle` resolves [`PerturbationKind::Auto`].
    pub fn perturbation(&self, oracle: bool) -> Perturbation {
        match self.perturbation {
            PerturbationKind::Auto if oracle => Perturbation::FadeToBlack,
            PerturbationKind::Auto | PerturbationKind::Blur => Perturbation::Blur {
                sigma_fraction: self.blur_sigma_frac,
            },
            PerturbationKind::FadeToBlack => Perturbation::FadeToBlack,
        }
    }

    pub fn toy_config(&self, seed: u64) -> CnnTrainConfig {
        CnnTrainConfig {
            epochs: self.toy_epochs,
            learning_rate: self.toy_lr,
            batch_size: self.toy_batch,
            seed,
        }
    }

    pub fn dataset_spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            classes: self.dataset_classes,
            size: self.dataset_size,
            per_class: self.dataset_per_class,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_then_parse_is_identity() {
        let mut c = RunConfig::default();
        c.seeds = vec![3, 1];
        c.lr = 0.1 + 0.2;
        c.threshold = Threshold::Absolute(0.37);
        c.divergence = DivergencePolicy::Reseed { attempts: 4 };
        c.fourier = FourierKind::AxisAligned;
        c.perturbation = PerturbationKind::FadeToBlack;
        assert_eq!(RunConfig::parse(&c.dump()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().dump()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_settable_and_dumped() {
        let dumped = RunConfig::default().dump();
        assert_eq!(dumped.lines().count(), KEYS.len());
        for key in KEYS {
            let value = RunConfig::default().get(key).unwrap();
            RunConfig::default().set(key, &value, 1).unwrap();
        }
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let c = RunConfig::parse("# header\n\nepochs = 12  # trailing\n  lambda_r=3\n").unwrap();
        assert_eq!(c.epochs, 12);
        assert_eq!(c.lambda_r, 3.0);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::parse("epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            Error::Config { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("learning_rate"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn malformed_values_are_errors() {
        for text in ["epochs = many", "area_grid = 0.1,x", "threshold = 0.9", "divergence = retry", "no equals sign"] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn validation_catches_inconsistent_grid() {
        let mut c = RunConfig::default();
        c.area_grid = vec![0.05, 0.3];
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
